//! Centroid-distribution distance and teacher weighting.
//!
//! A centroid table is read as a discrete uniform distribution over its k
//! values; its characteristic function is Φ(t) = (1/k)·Σ exp(i·t·μ). The
//! distance between two tables is the Monte Carlo average of |Φ_A − Φ_B|²
//! over Gaussian frequencies, and per-teacher importance weights come from a
//! softmax over negated min-max-normalized distances: structurally closer
//! neighbors weigh more.

use crate::error::{Error, Result};
use crate::rng;
use crate::wcp::{CentroidTable, CompressedModel};
use rand_distr::{Distribution, StandardNormal};

/// Stability constant in the min-max normalization.
pub const EPSILON: f64 = 1e-8;
/// Default frequency-set size.
pub const DEFAULT_N_FREQ: usize = 1024;
/// Default frequency standard deviation.
pub const DEFAULT_SIGMA: f64 = 1.0;

// ---------------------------------------------------------------------------
// Frequency set
// ---------------------------------------------------------------------------

/// Scalar frequencies drawn from N(0, σ²), regenerable bit-exactly from the
/// seed. One set is shared by every pairwise comparison in a round so the
/// scores stay comparable across teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySet {
    samples: Vec<f64>,
    sigma: f64,
    seed: u64,
}

impl FrequencySet {
    pub fn generate(n: usize, sigma: f64, seed: u64) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config("frequency set needs n >= 1".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma={sigma} must be positive and finite")));
        }
        let mut rng = rng::stream(seed, rng::Stream::Frequencies, 0, 0);
        let samples = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect();
        Ok(Self { samples, sigma, seed })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

// ---------------------------------------------------------------------------
// Characteristic function and distance
// ---------------------------------------------------------------------------

/// Φ(t) of a bare centroid list (k ≥ 1), returned as (re, im).
/// |Φ(t)| ≤ 1 always.
pub fn char_fn_values(values: &[f64], t: f64) -> (f64, f64) {
    debug_assert!(!values.is_empty());
    let k = values.len() as f64;
    let mut re = 0.0;
    let mut im = 0.0;
    for &mu in values {
        let phase = t * mu;
        re += phase.cos();
        im += phase.sin();
    }
    (re / k, im / k)
}

/// Φ(t) of a zero-pinned centroid table.
pub fn char_fn(table: &CentroidTable, t: f64) -> (f64, f64) {
    char_fn_values(table.values(), t)
}

/// Monte Carlo estimate of E_t |Φ_A(t) − Φ_B(t)|² over bare centroid lists.
pub fn cfd_values(a: &[f64], b: &[f64], freqs: &FrequencySet) -> f64 {
    let mut acc = 0.0;
    for &t in freqs.samples() {
        let (ar, ai) = char_fn_values(a, t);
        let (br, bi) = char_fn_values(b, t);
        let dr = ar - br;
        let di = ai - bi;
        acc += dr * dr + di * di;
    }
    acc / freqs.samples().len() as f64
}

/// Monte Carlo estimate of E_t |Φ_A(t) − Φ_B(t)|². Symmetric, zero when
/// A = B, and bounded by 4 since both moduli are at most 1.
pub fn cfd_layer(a: &CentroidTable, b: &CentroidTable, freqs: &FrequencySet) -> f64 {
    cfd_values(a.values(), b.values(), freqs)
}

/// Unweighted mean of per-layer distances between two compressed models.
pub fn cfd_model(a: &CompressedModel, b: &CompressedModel, freqs: &FrequencySet) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Shape(format!(
            "layer count mismatch: {} vs {}",
            a.layers.len(),
            b.layers.len()
        )));
    }
    if a.layers.is_empty() {
        return Err(Error::Shape("cfd of zero-layer models".into()));
    }
    let sum: f64 = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| cfd_layer(la.table(), lb.table(), freqs))
        .sum();
    Ok(sum / a.layers.len() as f64)
}

// ---------------------------------------------------------------------------
// Teacher weighting
// ---------------------------------------------------------------------------

/// Per-teacher importance weights; each α in (0, 1], summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherWeights {
    alphas: Vec<f64>,
}

impl TeacherWeights {
    /// Build from explicit weights; they must lie in (0, 1] and sum to 1
    /// within 1e-12.
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("teacher weights must be nonempty".into()));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(format!("weights must lie in (0, 1]: {alphas:?}")));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// Min-max normalize the distances, then softmax the negated scores. Smaller
/// distance ⇒ larger weight; equal distances ⇒ uniform weights.
pub fn teacher_weights(cfds: &[f64]) -> Result<TeacherWeights> {
    if cfds.is_empty() {
        return Err(Error::Config("teacher_weights needs at least one score".into()));
    }
    if cfds.iter().any(|&c| !c.is_finite() || c < 0.0) {
        return Err(Error::Config(format!("CFD scores must be finite and >= 0, got {cfds:?}")));
    }
    let min = cfds.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cfds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scores: Vec<f64> = cfds.iter().map(|&c| (c - min) / (max - min + EPSILON)).collect();
    // Softmax of -score; scores are already in [0, 1) so no max-shift needed.
    let exps: Vec<f64> = scores.iter().map(|&s| (-s).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let alphas = exps.into_iter().map(|e| e / sum).collect();
    Ok(TeacherWeights { alphas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wcp::CentroidTable;

    fn table(values: Vec<f64>) -> CentroidTable {
        CentroidTable::new(values).unwrap()
    }

    fn singleton_cfd(a: f64, b: f64, freqs: &FrequencySet) -> (f64, f64) {
        // Returns (mean, standard error) of the per-frequency samples.
        let samples: Vec<f64> = freqs
            .samples()
            .iter()
            .map(|&t| {
                let (ar, ai) = char_fn_values(&[a], t);
                let (br, bi) = char_fn_values(&[b], t);
                (ar - br).powi(2) + (ai - bi).powi(2)
            })
            .collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn zero_table_has_unit_cf() {
        let t = table(vec![0.0, 0.0]);
        for freq in [-3.0, 0.0, 0.7, 11.0] {
            let (re, im) = char_fn(&t, freq);
            assert!((re - 1.0).abs() < 1e-15);
            assert!(im.abs() < 1e-15);
        }
    }

    #[test]
    fn conjugate_pair_gives_cosine() {
        for freq in [-2.0, 0.3, 1.0, 5.5] {
            let (re, im) = char_fn_values(&[-1.0, 1.0], freq);
            assert!((re - freq.cos()).abs() < 1e-12);
            assert!(im.abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_modulus_is_one() {
        for freq in [-2.0, 0.0, 0.9, 4.0] {
            let (re, im) = char_fn_values(&[1.37], freq);
            assert!((re * re + im * im - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cf_modulus_bounded_by_one() {
        let t = table(vec![0.0, 0.3, -1.7, 2.9]);
        for i in 0..50 {
            let freq = -5.0 + i as f64 * 0.2;
            let (re, im) = char_fn(&t, freq);
            assert!(re * re + im * im <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn distance_is_zero_symmetric_and_bounded() {
        let freqs = FrequencySet::generate(512, 1.0, 99).unwrap();
        let a = table(vec![0.0, 1.0, -0.5]);
        let b = table(vec![0.0, 2.5, 0.25]);
        assert_eq!(cfd_layer(&a, &a, &freqs), 0.0);
        let ab = cfd_layer(&a, &b, &freqs);
        let ba = cfd_layer(&b, &a, &freqs);
        assert_eq!(ab, ba);
        assert!(ab > 0.0 && ab <= 4.0);
    }

    #[test]
    fn distance_ignores_centroid_order() {
        let freqs = FrequencySet::generate(256, 1.0, 5).unwrap();
        let a = table(vec![0.0, 1.0, -2.0, 0.5]);
        let b = table(vec![0.0, 3.0, 1.5, -1.0]);
        let a_perm = table(vec![0.0, -2.0, 0.5, 1.0]);
        let d1 = cfd_layer(&a, &b, &freqs);
        let d2 = cfd_layer(&a_perm, &b, &freqs);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn singleton_distance_matches_gaussian_expectation() {
        // E|Φ_{a}(t) − Φ_{b}(t)|² = 2(1 − e^{−σ²Δ²/2}) for t ~ N(0, σ²).
        let freqs = FrequencySet::generate(4096, 1.0, 2024).unwrap();
        for delta in [0.5, 1.0, 2.0] {
            let (mean, se) = singleton_cfd(0.0, delta, &freqs);
            let expected = 2.0 * (1.0 - (-delta * delta / 2.0).exp());
            assert!(
                (mean - expected).abs() <= 3.0 * se,
                "delta {delta}: estimate {mean} vs {expected} (se {se})"
            );
        }
    }

    #[test]
    fn monte_carlo_error_shrinks_with_n() {
        let expected = 2.0 * (1.0 - (-0.5f64).exp());
        for (n, seed) in [(256usize, 1u64), (4096, 1)] {
            let freqs = FrequencySet::generate(n, 1.0, seed).unwrap();
            let (mean, se) = singleton_cfd(0.0, 1.0, &freqs);
            assert!((mean - expected).abs() <= 3.0 * se, "n={n}: {mean} vs {expected}");
        }
        let f256 = FrequencySet::generate(256, 1.0, 3).unwrap();
        let f4096 = FrequencySet::generate(4096, 1.0, 3).unwrap();
        let se256 = singleton_cfd(0.0, 1.0, &f256).1;
        let se4096 = singleton_cfd(0.0, 1.0, &f4096).1;
        assert!(se4096 < se256);
    }

    #[test]
    fn model_distance_averages_layers() {
        use crate::wcp::{CompressedLayer, IndexSequence};
        let freqs = FrequencySet::generate(128, 1.0, 7).unwrap();
        let shared = table(vec![0.0, 1.0]);
        let far = table(vec![0.0, 4.0]);
        let mk = |t: CentroidTable| CompressedLayer::new(1, 2, t, IndexSequence::new(vec![0, 1])).unwrap();
        let a = CompressedModel {
            client_id: 0,
            round: 0,
            layers: vec![mk(shared.clone()), mk(shared.clone())],
            biases: vec![vec![], vec![]],
        };
        let b = CompressedModel {
            client_id: 1,
            round: 0,
            layers: vec![mk(shared.clone()), mk(far.clone())],
            biases: vec![vec![], vec![]],
        };
        assert_eq!(cfd_model(&a, &a, &freqs).unwrap(), 0.0);
        let whole = cfd_model(&a, &b, &freqs).unwrap();
        let second_layer_only = cfd_layer(&shared, &far, &freqs);
        assert!((whole - second_layer_only / 2.0).abs() < 1e-15);

        let short = CompressedModel { client_id: 2, round: 0, layers: vec![mk(shared)], biases: vec![vec![]] };
        assert!(matches!(cfd_model(&a, &short, &freqs), Err(Error::Shape(_))));
    }

    #[test]
    fn frequency_set_regenerates_bit_exactly() {
        let a = FrequencySet::generate(333, 1.5, 77).unwrap();
        let b = FrequencySet::generate(333, 1.5, 77).unwrap();
        assert_eq!(a, b);
        let c = FrequencySet::generate(333, 1.5, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let w = teacher_weights(&[0.2, 0.2]).unwrap();
        assert!((w.alphas()[0] - 0.5).abs() < 1e-12);
        assert!((w.alphas()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_example() {
        let w = teacher_weights(&[0.1, 0.3]).unwrap();
        assert!((w.alphas()[0] - 0.7311).abs() < 1e-4);
        assert!((w.alphas()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn single_teacher_gets_everything() {
        let w = teacher_weights(&[0.42]).unwrap();
        assert_eq!(w.alphas(), &[1.0]);
    }

    #[test]
    fn weights_sum_to_one_and_respect_order() {
        let scores = [0.9, 0.1, 0.5, 0.100001, 2.4];
        let w = teacher_weights(&scores).unwrap();
        let sum: f64 = w.alphas().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    assert!(w.alphas()[i] > w.alphas()[j], "cfd {i} < {j} must imply alpha {i} > {j}");
                }
            }
        }
        assert!(w.alphas().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn invalid_scores_are_rejected() {
        assert!(teacher_weights(&[]).is_err());
        assert!(teacher_weights(&[0.1, -0.2]).is_err());
        assert!(teacher_weights(&[f64::NAN]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_table() -> impl Strategy<Value = CentroidTable> {
            proptest::collection::vec(-5.0f64..5.0, 1..8).prop_map(|mut tail| {
                let mut values = vec![0.0];
                values.append(&mut tail);
                CentroidTable::new(values).unwrap()
            })
        }

        proptest! {
            #[test]
            fn pseudometric_properties(a in arb_table(), b in arb_table(), seed in 0u64..500) {
                let freqs = FrequencySet::generate(64, 1.0, seed).unwrap();
                let ab = cfd_layer(&a, &b, &freqs);
                prop_assert!((0.0..=4.0).contains(&ab), "distance {} out of [0, 4]", ab);
                prop_assert_eq!(cfd_layer(&b, &a, &freqs), ab);
                prop_assert_eq!(cfd_layer(&a, &a, &freqs), 0.0);
            }

            #[test]
            fn weights_are_a_distribution(scores in proptest::collection::vec(0.0f64..10.0, 1..8)) {
                let w = teacher_weights(&scores).unwrap();
                let sum: f64 = w.alphas().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(w.alphas().iter().all(|&a| a > 0.0 && a <= 1.0));
            }
        }
    }
}
