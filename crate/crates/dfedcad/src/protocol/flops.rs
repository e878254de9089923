//! FLOP accounting.
//!
//! Counting rule: a dense forward pass costs 2 FLOPs per weight per sample
//! (multiply + add) and the backward pass twice the forward; pruned layers
//! count only unmasked weights. Differentiable-k-means alignment costs
//! 2·N·K per E/M pair times the unroll depth, plus K_t·K_s·(N+3) per teacher
//! for the matching block. Weight clustering costs 2·N·K per Lloyd
//! iteration. Evaluation passes are measurement, not method, and are not
//! counted.

use crate::nn::{ModelParams, PruneMask};

/// Forward + backward cost of training on `samples` samples with `nnz`
/// unmasked weights in total: 2·nnz + 4·nnz per sample.
pub fn train_flops(nnz: u64, samples: u64) -> u64 {
    6 * nnz * samples
}

/// Training cost for a masked model, the spec's per-batch accounting entry.
pub fn account_flops(model: &ModelParams, mask: &PruneMask, samples: u64) -> u64 {
    debug_assert_eq!(mask.layer_count(), model.layers.len());
    train_flops(mask.total_nnz() as u64, samples)
}

/// One alignment call on a layer of `n` weights with `k` student clusters.
pub fn dkm_flops(n: u64, k: u64, t_dkm: u64) -> u64 {
    2 * n * k * t_dkm
}

/// Matching cost between one teacher's k_t clusters and k_s student clusters.
pub fn match_flops(k_t: u64, k_s: u64, n: u64) -> u64 {
    k_t * k_s * (n + 3)
}

/// One weight-clustering run of `iters` Lloyd iterations.
pub fn wcp_flops(n: u64, k: u64, iters: u64) -> u64 {
    2 * n * k * iters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelParams, PruneMask};
    use crate::rng::{stream, Stream};

    #[test]
    fn dense_rule_counts_every_weight() {
        let mut rng = stream(1, Stream::Init, 0, 0);
        let model = ModelParams::init(&[4, 6, 3], Activation::Tanh, 1.0, &mut rng).unwrap();
        let mask = PruneMask::all_true(&model);
        let weights = (4 * 6 + 6 * 3) as u64;
        assert_eq!(account_flops(&model, &mask, 10), 6 * weights * 10);
    }

    #[test]
    fn half_sparse_halves_weight_flops() {
        let mut rng = stream(2, Stream::Init, 0, 0);
        let model = ModelParams::init(&[4, 4], Activation::Tanh, 1.0, &mut rng).unwrap();
        let half: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let mask = PruneMask::from_layers(vec![half]);
        let dense = account_flops(&model, &PruneMask::all_true(&model), 5);
        let sparse = account_flops(&model, &mask, 5);
        assert_eq!(sparse * 2, dense);
    }

    #[test]
    fn auxiliary_costs_follow_the_rule() {
        assert_eq!(dkm_flops(512, 16, 5), 2 * 512 * 16 * 5);
        assert_eq!(match_flops(16, 16, 512), 16 * 16 * 515);
        assert_eq!(wcp_flops(512, 16, 7), 2 * 512 * 16 * 7);
    }
}
