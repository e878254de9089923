//! Bit-exact wire format for compressed models.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DCAD" | version u8 = 1 | client_id u32 | round u32 | layer_count u16
//! per layer:  rows u32 | cols u32 | k u16 | k × f32 centroids (first must be 0)
//!             | ceil(n·bits/8) bytes of LSB-first packed indices
//! per layer:  bias_len u32 | bias_len × f32
//! ```
//!
//! Centroids and biases travel as f32; the decoder widens them back to f64.

use super::{bits_per_index, CentroidTable, CompressedLayer, CompressedModel, IndexSequence};
use crate::error::{DecodeError, Error, Result};

pub const MAGIC: [u8; 4] = *b"DCAD";
pub const VERSION: u8 = 1;

// ---------------------------------------------------------------------------
// Bit packing
// ---------------------------------------------------------------------------

fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    let total_bits = indices.len() as u64 * bits as u64;
    let mut out = vec![0u8; total_bits.div_ceil(8) as usize];
    let mut bitpos = 0u64;
    for &idx in indices {
        let mut v = (idx as u64) << (bitpos % 8);
        let mut byte = (bitpos / 8) as usize;
        while v != 0 {
            out[byte] |= (v & 0xff) as u8;
            v >>= 8;
            byte += 1;
        }
        bitpos += bits as u64;
    }
    out
}

fn unpack_indices(bytes: &[u8], n: usize, bits: u32) -> Vec<u32> {
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let bitpos = i as u64 * bits as u64;
        let byte = (bitpos / 8) as usize;
        let off = bitpos % 8;
        let mut v = 0u64;
        for (j, &b) in bytes[byte..bytes.len().min(byte + 4)].iter().enumerate() {
            v |= (b as u64) << (8 * j);
        }
        out.push(((v >> off) & mask) as u32);
    }
    out
}

// ---------------------------------------------------------------------------
// Encode
// ---------------------------------------------------------------------------

/// Serialize a compressed model; `decode_wire` inverts this exactly for any
/// model whose centroid and bias values are f32-representable.
pub fn encode_wire(model: &CompressedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&model.client_id.to_le_bytes());
    out.extend_from_slice(&model.round.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.cols() as u32).to_le_bytes());
        let k = layer.table().k();
        out.extend_from_slice(&(k as u16).to_le_bytes());
        for &v in layer.table().values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let bits = bits_per_index(k as u64);
        out.extend_from_slice(&pack_indices(layer.indices().as_slice(), bits));
    }
    for bias in &model.biases {
        out.extend_from_slice(&(bias.len() as u32).to_le_bytes());
        for &b in bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    out
}

/// Exact encoded length without materializing the stream.
pub fn encoded_len(model: &CompressedModel) -> usize {
    let mut len = 4 + 1 + 4 + 4 + 2;
    for layer in &model.layers {
        let k = layer.table().k();
        let bits = bits_per_index(k as u64) as u64;
        len += 4 + 4 + 2 + 4 * k;
        len += ((layer.weight_count() as u64 * bits).div_ceil(8)) as usize;
    }
    for bias in &model.biases {
        len += 4 + 4 * bias.len();
    }
    len
}

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> std::result::Result<&'a [u8], DecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecodeError::Truncated { field });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> std::result::Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> std::result::Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parse a wire stream back into a compressed model, validating magic,
/// version, shapes, the pinned zero centroid, and every index bound.
pub fn decode_wire(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = Reader { bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic { found: magic.try_into().unwrap() }.into());
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(DecodeError::BadVersion(version).into());
    }
    let client_id = r.u32("client_id")?;
    let round = r.u32("round")?;
    let layer_count = r.u16("layer_count")? as usize;

    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if rows == 0 || cols == 0 {
            return Err(DecodeError::BadShape(format!("layer {li}: shape {rows}x{cols}")).into());
        }
        let k = r.u16("k")?;
        if k < 2 {
            return Err(DecodeError::BadTable(format!("layer {li}: k={k} < 2")).into());
        }
        let mut values = Vec::with_capacity(k as usize);
        for _ in 0..k {
            values.push(r.f32("centroid")? as f64);
        }
        if values[0] != 0.0 {
            return Err(DecodeError::BadTable(format!(
                "layer {li}: centroid 0 is {} instead of 0",
                values[0]
            ))
            .into());
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DecodeError::BadTable(format!("layer {li}: non-finite centroid")).into());
        }
        let n = rows * cols;
        let bits = bits_per_index(k as u64);
        let packed_len = ((n as u64 * bits as u64).div_ceil(8)) as usize;
        let packed = r.take(packed_len, "indices")?;
        let indices = unpack_indices(packed, n, bits);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k as u32) {
            return Err(DecodeError::IndexOverflow { layer: li, index: bad, k }.into());
        }
        let table = CentroidTable::new(values)
            .map_err(|e| Error::from(DecodeError::BadTable(e.to_string())))?;
        layers.push(CompressedLayer::new(rows, cols, table, IndexSequence::new(indices))?);
    }

    let mut biases = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let len = r.u32("bias_len")? as usize;
        let mut bias = Vec::with_capacity(len);
        for _ in 0..len {
            bias.push(r.f32("bias")? as f64);
        }
        biases.push(bias);
    }

    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok(CompressedModel { client_id, round, layers, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{DecodeError, Error};
    use proptest::prelude::*;

    fn table(values: Vec<f64>) -> CentroidTable {
        CentroidTable::new(values).unwrap()
    }

    fn sample_model() -> CompressedModel {
        let t1 = table(vec![0.0, 0.5, -1.25, 2.0]);
        let l1 = CompressedLayer::new(2, 3, t1, IndexSequence::new(vec![0, 1, 2, 3, 1, 0])).unwrap();
        let t2 = table(vec![0.0, 1.0]);
        let l2 = CompressedLayer::new(1, 4, t2, IndexSequence::new(vec![1, 0, 1, 1])).unwrap();
        CompressedModel {
            client_id: 7,
            round: 42,
            layers: vec![l1, l2],
            biases: vec![vec![0.25, -0.5], vec![1.0]],
        }
    }

    #[test]
    fn roundtrip_identity() {
        let model = sample_model();
        let bytes = encode_wire(&model);
        assert_eq!(bytes.len(), encoded_len(&model));
        let back = decode_wire(&bytes).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn empty_layer_list_is_header_only() {
        let model = CompressedModel { client_id: 1, round: 2, layers: vec![], biases: vec![] };
        let bytes = encode_wire(&model);
        assert_eq!(bytes.len(), 15);
        assert_eq!(decode_wire(&bytes).unwrap(), model);
    }

    #[test]
    fn byte_length_matches_formula() {
        let model = sample_model();
        let bytes = encode_wire(&model);
        let mut expected = 15usize;
        for layer in &model.layers {
            let k = layer.table().k() as u64;
            let n = layer.weight_count() as u64;
            expected += 10 + ((k * 32 + n * bits_per_index(k) as u64).div_ceil(8)) as usize;
        }
        for bias in &model.biases {
            expected += 4 + 4 * bias.len();
        }
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn payload_matches_cost_model_bit_for_bit() {
        let model = sample_model();
        for layer in &model.layers {
            let k = layer.table().k() as u64;
            let n = layer.weight_count() as u64;
            let table_bytes = 4 * k;
            let index_bytes = (n * bits_per_index(k) as u64).div_ceil(8);
            // Before byte padding, the payload is exactly k·32 + n·ceil(log2 k).
            let payload = super::super::payload_bits(n, k, 32);
            assert!(table_bytes * 8 + index_bytes * 8 >= payload);
            assert!(table_bytes * 8 + (index_bytes - 1) * 8 < payload + 8);
        }
    }

    #[test]
    fn bad_magic_is_distinguished() {
        let mut bytes = encode_wire(&sample_model());
        bytes[0] = b'X';
        match decode_wire(&bytes) {
            Err(Error::Decode(DecodeError::BadMagic { .. })) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_is_distinguished() {
        let mut bytes = encode_wire(&sample_model());
        bytes[4] = 9;
        match decode_wire(&bytes) {
            Err(Error::Decode(DecodeError::BadVersion(9))) => {}
            other => panic!("expected BadVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_distinguished() {
        let bytes = encode_wire(&sample_model());
        // Cut inside the first layer's index block.
        let cut = 15 + 10 + 16 + 1;
        match decode_wire(&bytes[..cut]) {
            Err(Error::Decode(DecodeError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
        // Cut inside the header too.
        match decode_wire(&bytes[..7]) {
            Err(Error::Decode(DecodeError::Truncated { .. })) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn index_overflow_is_distinguished() {
        // k=3 → 2 bits per index; the raw value 3 is representable but out
        // of range, so a hand-built stream can smuggle it in.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.push(VERSION);
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes());
        for v in [0.0f32, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(0b11_10_01_00); // indices [0, 1, 2, 3]
        bytes.extend_from_slice(&0u32.to_le_bytes());
        match decode_wire(&bytes) {
            Err(Error::Decode(DecodeError::IndexOverflow { layer: 0, index: 3, k: 3 })) => {}
            other => panic!("expected IndexOverflow, got {other:?}"),
        }
    }

    #[test]
    fn nonzero_pinned_centroid_is_rejected() {
        let mut bytes = encode_wire(&sample_model());
        // First centroid f32 sits right after the first layer's rows/cols/k.
        let off = 15 + 10;
        bytes[off..off + 4].copy_from_slice(&0.5f32.to_le_bytes());
        match decode_wire(&bytes) {
            Err(Error::Decode(DecodeError::BadTable(_))) => {}
            other => panic!("expected BadTable, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_wire(&sample_model());
        bytes.push(0);
        match decode_wire(&bytes) {
            Err(Error::Decode(DecodeError::TrailingBytes(1))) => {}
            other => panic!("expected TrailingBytes, got {other:?}"),
        }
    }

    // Strategy for arbitrary wire-representable models: f32-grid values, any
    // small shape, any k in [2, 20).
    fn arb_model() -> impl Strategy<Value = CompressedModel> {
        let layer = (1usize..5, 1usize..7, 2usize..20).prop_flat_map(|(rows, cols, k)| {
            let n = rows * cols;
            (
                proptest::collection::vec(-10.0f32..10.0, k - 1),
                proptest::collection::vec(0u32..k as u32, n),
                proptest::collection::vec(-10.0f32..10.0, rows),
            )
                .prop_map(move |(cvals, indices, bias)| {
                    let mut values = vec![0.0f64];
                    values.extend(cvals.into_iter().map(|v| v as f64));
                    let layer = CompressedLayer::new(
                        rows,
                        cols,
                        CentroidTable::new(values).unwrap(),
                        IndexSequence::new(indices),
                    )
                    .unwrap();
                    let bias: Vec<f64> = bias.into_iter().map(|b| b as f64).collect();
                    (layer, bias)
                })
        });
        (any::<u32>(), any::<u32>(), proptest::collection::vec(layer, 0..4)).prop_map(
            |(client_id, round, pairs)| {
                let (layers, biases) = pairs.into_iter().unzip();
                CompressedModel { client_id, round, layers, biases }
            },
        )
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity_on_arbitrary_models(model in arb_model()) {
            let bytes = encode_wire(&model);
            prop_assert_eq!(bytes.len(), encoded_len(&model));
            let back = decode_wire(&bytes).unwrap();
            prop_assert_eq!(back, model);
        }
    }
}
