//! Weight Clustering Pruning: Lloyd-style k-means over a layer's flattened
//! weights with centroid 0 pinned at exactly zero, so weights that land in
//! cluster 0 are pruned. Only the centroid table and the per-weight index
//! sequence cross the wire; `codec` holds the bit-exact stream format.

mod codec;

pub use codec::{decode_wire, encode_wire, encoded_len};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Matrix, ModelParams, PruneMask};

/// Default cluster count: 4-bit indices.
pub const DEFAULT_K: usize = 16;
/// Default Lloyd iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Default convergence tolerance on centroid movement.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Wire precision of one dense weight, in bits.
pub const WIRE_BITS_PER_WEIGHT: u64 = 32;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// K centroid values with values[0] pinned at exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable {
    values: Vec<f64>,
}

impl CentroidTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config(format!("centroid table needs k >= 2, got {}", values.len())));
        }
        if values[0] != 0.0 {
            return Err(Error::Corrupt(format!("centroid 0 must be exactly 0, got {}", values[0])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite centroid value".into()));
        }
        Ok(Self { values })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the nearest centroid; ties break toward the lowest index,
    /// which biases exact ties toward pruning.
    pub fn nearest(&self, w: f64) -> usize {
        let mut best = 0usize;
        let mut best_d = (w - self.values[0]).abs();
        for (i, &c) in self.values.iter().enumerate().skip(1) {
            let d = (w - c).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Per-weight centroid indices for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequence {
    indices: Vec<u32>,
}

impl IndexSequence {
    pub fn new(indices: Vec<u32>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }
}

/// One compressed layer: shape metadata, centroid table, index sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    rows: usize,
    cols: usize,
    table: CentroidTable,
    indices: IndexSequence,
}

impl CompressedLayer {
    pub fn new(rows: usize, cols: usize, table: CentroidTable, indices: IndexSequence) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::Corrupt(format!(
                "index count {} does not match shape {rows}x{cols}",
                indices.len()
            )));
        }
        let k = table.k() as u32;
        if let Some(&bad) = indices.as_slice().iter().find(|&&i| i >= k) {
            return Err(Error::Corrupt(format!("index {bad} out of range for k={k}")));
        }
        Ok(Self { rows, cols, table, indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weight_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn table(&self) -> &CentroidTable {
        &self.table
    }

    pub fn indices(&self) -> &IndexSequence {
        &self.indices
    }

    /// Prune mask implied by the index sequence: false where index = 0.
    pub fn mask(&self) -> Vec<bool> {
        self.indices.as_slice().iter().map(|&i| i != 0).collect()
    }
}

/// Everything one client sends: per-layer compressed weights plus raw biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub client_id: u32,
    pub round: u32,
    pub layers: Vec<CompressedLayer>,
    pub biases: Vec<Vec<f64>>,
}

impl CompressedModel {
    /// Reconstruct a dense model from the tables, indices and raw biases.
    pub fn to_model(&self, activation: Activation) -> Result<ModelParams> {
        if self.biases.len() != self.layers.len() {
            return Err(Error::Corrupt(format!(
                "{} bias vectors for {} layers",
                self.biases.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, bias) in self.layers.iter().zip(&self.biases) {
            layers.push(Layer { weight: wcp_decompress(layer)?, bias: bias.clone() });
        }
        ModelParams::new(layers, activation)
    }

    /// Prune mask implied by all layers' index sequences.
    pub fn to_mask(&self) -> PruneMask {
        PruneMask::from_layers(self.layers.iter().map(|l| l.mask()).collect())
    }
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Output of `wcp_compress` for one layer.
#[derive(Debug, Clone)]
pub struct WcpOutput {
    pub table: CentroidTable,
    pub indices: IndexSequence,
    /// false where the weight maps to the pinned zero centroid.
    pub mask: Vec<bool>,
    /// Lloyd iterations actually run.
    pub iterations: usize,
}

fn nearest_idx(values: &[f64], w: f64) -> usize {
    let mut best = 0usize;
    let mut best_d = (w - values[0]).abs();
    for (i, &c) in values.iter().enumerate().skip(1) {
        let d = (w - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Deterministic initialization of the k-1 free centroids: evenly spaced
/// quantiles of the nonzero weights. An all-zero layer keeps a fixed ramp
/// that no weight will select.
fn init_centroids(weights: &[f64], k: usize) -> Vec<f64> {
    let mut nonzero: Vec<f64> = weights.iter().copied().filter(|&w| w != 0.0).collect();
    let mut values = vec![0.0; k];
    if nonzero.is_empty() {
        for (j, v) in values.iter_mut().enumerate().skip(1) {
            *v = j as f64;
        }
        return values;
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = nonzero.len();
    for j in 1..k {
        let level = (j as f64 - 0.5) / (k - 1) as f64;
        let pos = level * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[j] = nonzero[lo] * (1.0 - frac) + nonzero[hi] * frac;
    }
    values
}

/// Pruned k-means over a flat weight vector. Centroid 0 stays exactly 0;
/// every other centroid tracks the mean of its assigned weights. Terminates
/// when the largest centroid movement drops below `tol` or after `max_iters`
/// passes; indices point at the nearest centroid of the final table.
pub fn wcp_compress(weights: &[f64], k: usize, max_iters: usize, tol: f64) -> Result<WcpOutput> {
    let n = weights.len();
    let mut problems = Vec::new();
    if n == 0 {
        problems.push("weights must be nonempty".to_string());
    }
    if k < 2 {
        problems.push(format!("k={k} must be >= 2"));
    }
    if n > 0 && n < k {
        problems.push(format!("n={n} must be >= k={k}"));
    }
    if max_iters < 1 {
        problems.push("max_iters must be >= 1".to_string());
    }
    if !(tol > 0.0) {
        problems.push(format!("tol={tol} must be > 0"));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("non-finite weight".into()));
    }

    let mut values = init_centroids(weights, k);
    let mut assign = vec![0usize; n];
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        for (a, &w) in assign.iter_mut().zip(weights) {
            *a = nearest_idx(&values, w);
        }

        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&a, &w) in assign.iter().zip(weights) {
            sums[a] += w;
            counts[a] += 1;
        }

        let mut new_values = values.clone();
        for j in 1..k {
            if counts[j] > 0 {
                new_values[j] = sums[j] / counts[j] as f64;
            }
        }

        // Empty-cluster repair: re-seed at the weight farthest from its own
        // centroid, one weight per repaired cluster. When every weight sits
        // exactly on its centroid there is nothing to repair and the empty
        // centroid keeps its value.
        let mut taken: Vec<usize> = Vec::new();
        for j in 1..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far_i = None;
            let mut far_d = 0.0f64;
            for (i, &w) in weights.iter().enumerate() {
                if taken.contains(&i) {
                    continue;
                }
                let d = (w - values[assign[i]]).abs();
                if d > far_d {
                    far_d = d;
                    far_i = Some(i);
                }
            }
            if let Some(i) = far_i {
                new_values[j] = weights[i];
                taken.push(i);
            }
        }

        let movement = values
            .iter()
            .zip(&new_values)
            .skip(1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        values = new_values;
        if movement < tol {
            break;
        }
    }

    // Final assignment against the converged table.
    let indices: Vec<u32> = weights.iter().map(|&w| nearest_idx(&values, w) as u32).collect();
    let mask: Vec<bool> = indices.iter().map(|&i| i != 0).collect();
    let table = CentroidTable::new(values)?;
    Ok(WcpOutput { table, indices: IndexSequence::new(indices), mask, iterations })
}

/// Rebuild the dense weight matrix: weight[i] = table.values[indices[i]].
pub fn wcp_decompress(layer: &CompressedLayer) -> Result<Matrix> {
    let values = layer.table.values();
    let mut data = Vec::with_capacity(layer.weight_count());
    for &idx in layer.indices.as_slice() {
        let v = values
            .get(idx as usize)
            .ok_or_else(|| Error::Corrupt(format!("index {idx} out of range for k={}", values.len())))?;
        data.push(*v);
    }
    Matrix::new(layer.rows, layer.cols, data)
}

/// Compress every layer of a model, producing the message for this round and
/// the refreshed prune mask.
pub fn compress_model(
    model: &ModelParams,
    client_id: u32,
    round: u32,
    k: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(CompressedModel, PruneMask)> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut masks = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let out = wcp_compress(layer.weight.data(), k, max_iters, tol)?;
        masks.push(out.mask);
        layers.push(CompressedLayer::new(
            layer.weight.rows(),
            layer.weight.cols(),
            out.table,
            out.indices,
        )?);
    }
    let compressed = CompressedModel {
        client_id,
        round,
        layers,
        biases: model.layers.iter().map(|l| l.bias.clone()).collect(),
    };
    Ok((compressed, PruneMask::from_layers(masks)))
}

// ---------------------------------------------------------------------------
// Payload cost model
// ---------------------------------------------------------------------------

/// Bits per packed index for a table of k centroids.
pub fn bits_per_index(k: u64) -> u32 {
    debug_assert!(k >= 2);
    64 - (k - 1).leading_zeros()
}

/// Payload cost of one compressed layer in bits: k·b for the centroid table
/// plus n·ceil(log2 k) for the index sequence. Headers and biases are
/// accounted separately by the protocol.
pub fn payload_bits(n: u64, k: u64, b: u64) -> u64 {
    k * b + n * bits_per_index(k) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn all_zero_layer_prunes_everything() {
        let out = wcp_compress(&[0.0; 10], 4, 50, 1e-6).unwrap();
        assert!(out.indices.as_slice().iter().all(|&i| i == 0));
        assert!(out.mask.iter().all(|&m| !m));
        // Free centroids keep their initialization instead of collapsing to 0.
        assert!(out.table.values()[1..].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn five_point_example() {
        let out = wcp_compress(&[-1.0, -1.0, 0.001, 1.0, 1.0], 3, 50, 1e-6).unwrap();
        let v = out.table.values();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[2] - 1.0).abs() < 1e-12);
        assert_eq!(out.indices.as_slice(), &[1, 1, 0, 2, 2]);
        assert_eq!(out.mask, vec![true, true, false, true, true]);
    }

    #[test]
    fn symmetric_weights_give_symmetric_centroids() {
        let mut rng = rng::stream(3, rng::Stream::DataGen, 0, 0);
        let mut w: Vec<f64> = (0..40).map(|_| rng.random_range(0.5..2.0)).collect();
        let mirrored: Vec<f64> = w.iter().map(|&x| -x).collect();
        w.extend(mirrored);
        let out = wcp_compress(&w, 3, 200, 1e-12).unwrap();
        let v = out.table.values();
        assert!(
            (v[1] + v[2]).abs() < 1e-9,
            "centroids {} and {} should mirror",
            v[1],
            v[2]
        );
    }

    #[test]
    fn nearest_centroid_consistency_at_termination() {
        let mut rng = rng::stream(5, rng::Stream::DataGen, 0, 0);
        for trial in 0..10 {
            let n = 30 + trial * 7;
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let out = wcp_compress(&w, 5, 50, 1e-9).unwrap();
            let v = out.table.values();
            for (i, &wi) in w.iter().enumerate() {
                let assigned = v[out.indices.as_slice()[i] as usize];
                for &c in v {
                    assert!(
                        (wi - assigned).abs() <= (wi - c).abs() + 1e-12,
                        "weight {wi} assigned to {assigned} but {c} is closer"
                    );
                }
            }
        }
    }

    #[test]
    fn within_cluster_sse_is_monotone_in_iterations() {
        let mut rng = rng::stream(6, rng::Stream::DataGen, 0, 0);
        let w: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sse = |out: &WcpOutput| -> f64 {
            w.iter()
                .zip(out.indices.as_slice())
                .map(|(&wi, &i)| (wi - out.table.values()[i as usize]).powi(2))
                .sum()
        };
        // Tiny tol so every run executes exactly `iters` Lloyd passes.
        let mut prev = f64::INFINITY;
        for iters in 1..=12 {
            let out = wcp_compress(&w, 4, iters, 1e-300).unwrap();
            let e = sse(&out);
            assert!(e <= prev + 1e-12, "SSE rose from {prev} to {e} at {iters} iterations");
            prev = e;
        }
    }

    #[test]
    fn mask_and_index_zero_coupling() {
        let mut rng = rng::stream(8, rng::Stream::DataGen, 0, 0);
        let w: Vec<f64> = (0..50)
            .map(|_| if rng.random_range(0..4) == 0 { 0.0 } else { rng.random_range(-1.0..1.0f64) })
            .collect();
        let out = wcp_compress(&w, 6, 50, 1e-8).unwrap();
        for (&idx, &m) in out.indices.as_slice().iter().zip(&out.mask) {
            assert_eq!(m, idx != 0);
        }
    }

    #[test]
    fn decompress_reconstructs_nearest_centroids() {
        let mut rng = rng::stream(9, rng::Stream::DataGen, 0, 0);
        let w: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = wcp_compress(&w, 5, 50, 1e-9).unwrap();
        let layer =
            CompressedLayer::new(6, 8, out.table.clone(), out.indices.clone()).unwrap();
        let rebuilt = wcp_decompress(&layer).unwrap();
        for (i, &wi) in w.iter().enumerate() {
            let expected = out.table.values()[out.table.nearest(wi)];
            assert_eq!(rebuilt.data()[i], expected);
        }
    }

    #[test]
    fn all_zero_indices_decompress_to_zero_matrix() {
        let table = CentroidTable::new(vec![0.0, 1.5, -2.0]).unwrap();
        let layer = CompressedLayer::new(2, 3, table, IndexSequence::new(vec![0; 6])).unwrap();
        let m = wcp_decompress(&layer).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k_equals_n_reconstructs_exactly() {
        let w = [0.0, -10.0, 5.0, 20.0];
        let out = wcp_compress(&w, 4, 100, 1e-12).unwrap();
        let layer = CompressedLayer::new(1, 4, out.table, out.indices).unwrap();
        let rebuilt = wcp_decompress(&layer).unwrap();
        for (a, b) in rebuilt.data().iter().zip(&w) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(matches!(wcp_compress(&[], 4, 50, 1e-6), Err(Error::Config(_))));
        assert!(matches!(wcp_compress(&[1.0, 2.0], 4, 50, 1e-6), Err(Error::Config(_))));
        assert!(matches!(wcp_compress(&[1.0; 8], 1, 50, 1e-6), Err(Error::Config(_))));
        assert!(matches!(wcp_compress(&[1.0; 8], 4, 0, 1e-6), Err(Error::Config(_))));
        assert!(matches!(wcp_compress(&[1.0; 8], 4, 50, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn pinned_zero_survives_arbitrary_iteration_counts() {
        let mut rng = rng::stream(10, rng::Stream::DataGen, 0, 0);
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for iters in [1, 2, 7, 50] {
            let out = wcp_compress(&w, 4, iters, 1e-300).unwrap();
            assert_eq!(out.table.values()[0], 0.0);
        }
    }

    #[test]
    fn payload_bits_examples() {
        assert_eq!(payload_bits(1000, 16, 32), 16 * 32 + 1000 * 4);
        assert_eq!(payload_bits(1000, 16, 32), 4512);
        // k = 2 → one bit per index.
        assert_eq!(payload_bits(777, 2, 32), 2 * 32 + 777);
        // The 4-bit regime on a megaweight layer: 87.5% below dense 32-bit.
        let bits = payload_bits(1_000_000, 16, 32);
        assert_eq!(bits, 4_000_512);
        let dense = 1_000_000u64 * 32;
        let reduction = 1.0 - bits as f64 / dense as f64;
        assert!(reduction > 0.86 && reduction < 0.88);
    }

    #[test]
    fn bits_per_index_boundaries() {
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(3), 2);
        assert_eq!(bits_per_index(4), 2);
        assert_eq!(bits_per_index(5), 3);
        assert_eq!(bits_per_index(16), 4);
        assert_eq!(bits_per_index(17), 5);
    }
}
