//! Synthetic classification data and Dirichlet non-IID partitioning.
//!
//! Classes are isotropic Gaussian blobs around means placed on a circle in
//! the first two feature dimensions. Partitioning draws per-class client
//! proportions from a symmetric Dirichlet: small concentration produces
//! skewed, heterogeneous shards; large concentration approaches IID.

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

/// Radius of the circle the class means sit on.
const MEAN_RADIUS: f64 = 2.0;

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub features: Matrix,
    pub labels: Vec<u16>,
    pub classes: usize,
    pub class_means: Matrix,
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Gather rows into a (features, labels) batch.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u16>) {
        let d = self.dim();
        let mut feat = Matrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..d {
                feat.set(r, c, self.features.get(i, c));
            }
            labels.push(self.labels[i]);
        }
        (feat, labels)
    }
}

/// Gaussian blobs, one mean per class on a scaled circle; deterministic in
/// the seed. The first `classes` labels cycle through every class so each is
/// guaranteed at least one sample, the rest are drawn uniformly.
pub fn gen_synthetic(
    classes: usize,
    dim: usize,
    samples: usize,
    spread: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if classes < 2 || dim < 1 || samples < classes {
        return Err(Error::Config(format!(
            "need classes >= 2, dim >= 1, samples >= classes; got C={classes}, d={dim}, M={samples}"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::Config(format!("spread={spread} must be finite and >= 0")));
    }
    let class_means = Matrix::from_fn(classes, dim, |c, j| {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        match j {
            0 => MEAN_RADIUS * angle.cos(),
            1 => MEAN_RADIUS * angle.sin(),
            _ => 0.0,
        }
    });
    let mut rng = rng::stream(seed, Stream::DataGen, 0, 0);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        if i < classes {
            labels.push(i as u16);
        } else {
            labels.push(rng.random_range(0..classes as u16));
        }
    }
    let mut features = Matrix::zeros(samples, dim);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.set(i, j, class_means.get(y as usize, j) + spread * noise);
        }
    }
    Ok(SyntheticDataset { features, labels, classes, class_means, spread, seed })
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Per-client sample indices plus, once split, per-client train/test halves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Dirichlet partition: per class, draw client proportions from Dir(α·1) and
/// route that class's samples multinomially. Clients that end up empty steal
/// one sample from the currently largest shard.
pub fn dirichlet_partition(
    labels: &[u16],
    num_clients: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Partition> {
    if num_clients < 1 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha={alpha} must be positive and finite")));
    }
    if labels.is_empty() {
        return Err(Error::Config("cannot partition an empty dataset".into()));
    }
    let classes = *labels.iter().max().unwrap() as usize + 1;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for class in 0..classes {
        // Dir(α·1) via normalized Gamma draws.
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = props.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            props = vec![1.0 / num_clients as f64; num_clients];
        } else {
            props.iter_mut().for_each(|p| *p /= sum);
        }
        let mut cumulative = Vec::with_capacity(num_clients);
        let mut acc = 0.0;
        for &p in &props {
            acc += p;
            cumulative.push(acc);
        }
        for (i, &y) in labels.iter().enumerate() {
            if y as usize != class {
                continue;
            }
            let u: f64 = rng.random_range(0.0..1.0);
            let client = cumulative.iter().position(|&c| u < c).unwrap_or(num_clients - 1);
            shards[client].push(i);
        }
    }

    // Empty-shard repair: lowest-id empty client steals the last sample of
    // the largest shard.
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let largest = (0..shards.len())
            .max_by_key(|&c| shards[c].len())
            .expect("at least one shard");
        if shards[largest].len() <= 1 {
            return Err(Error::Config(format!(
                "cannot give every one of {num_clients} clients a sample from {} total",
                labels.len()
            )));
        }
        let moved = shards[largest].pop().unwrap();
        shards[empty].push(moved);
    }

    Ok(Partition { shards, train: Vec::new(), test: Vec::new() })
}

/// Per-client stratified train/test split: each class group contributes
/// round(count · test_fraction) test samples, so per-class test proportions
/// land within one sample of the target. Shards of size 1 go entirely to
/// train with an empty test split, which shows up as a null accuracy in the
/// metrics.
pub fn split_train_test(
    mut partition: Partition,
    labels: &[u16],
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Partition> {
    use rand::seq::SliceRandom;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction={test_fraction} must lie in (0, 1)")));
    }
    let mut train = Vec::with_capacity(partition.shards.len());
    let mut test = Vec::with_capacity(partition.shards.len());
    for shard in &partition.shards {
        if shard.len() <= 1 {
            train.push(shard.clone());
            test.push(Vec::new());
            continue;
        }
        let mut by_class: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
        for &i in shard {
            by_class.entry(labels[i]).or_default().push(i);
        }
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for group in by_class.values_mut() {
            group.shuffle(rng);
            let want = ((group.len() as f64) * test_fraction).round() as usize;
            let want = want.min(group.len());
            te.extend_from_slice(&group[..want]);
            tr.extend_from_slice(&group[want..]);
        }
        // Both splits must be nonempty on shards of size >= 2.
        if te.is_empty() {
            te.push(tr.pop().unwrap());
        }
        if tr.is_empty() {
            tr.push(te.pop().unwrap());
        }
        train.push(tr);
        test.push(te);
    }
    partition.train = train;
    partition.test = test;
    Ok(partition)
}

// ---------------------------------------------------------------------------
// Flat binary dump / load
// ---------------------------------------------------------------------------

/// Write the dataset as `M u32 | d u32 | C u32 | M·d f32 features | M u16
/// labels`, little-endian.
pub fn dump_dataset(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.classes as u32).to_le_bytes());
    for &v in dataset.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &dataset.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Inverse of `dump_dataset`. Generator parameters are not stored; the loaded
/// dataset carries zeroed means and spread.
pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Corrupt("dataset file shorter than its header".into()));
    }
    let m = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * m * d + 2 * m;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "dataset file is {} bytes, expected {expected} for M={m}, d={d}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m * d {
        let off = 12 + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let off = 12 + 4 * m * d + 2 * i;
        let y = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
        if (y as usize) >= c {
            return Err(Error::Corrupt(format!("label {y} out of range for {c} classes")));
        }
        labels.push(y);
    }
    Ok(SyntheticDataset {
        features: Matrix::new(m, d, data)?,
        labels,
        classes: c,
        class_means: Matrix::zeros(c, d),
        spread: 0.0,
        seed: 0,
    })
}
