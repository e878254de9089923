// Indexed loops and NaN-rejecting negated comparisons are the clearer idiom
// in the numeric kernels and validators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Decentralized federated learning with centroid-aligned distillation.
//!
//! Clients train small dense classifiers on private non-IID shards and gossip
//! weight-clustered, pruned models to random peers each round. Late joiners
//! weigh the received models by a characteristic-function distance between
//! centroid tables and distill their structure through a differentiable
//! k-means alignment loss, while a momentum term pulls every client toward
//! the mean of its neighborhood.
//!
//! - [`nn`] — dense layers, exact manual gradients, masked momentum updates
//! - [`wcp`] — zero-pinned weight clustering, prune masks, the wire codec
//! - [`cfd`] — centroid-distribution distance and teacher weighting
//! - [`dkm`] — differentiable k-means alignment with exact gradients
//! - [`data`] — synthetic blobs and Dirichlet non-IID partitioning
//! - [`protocol`] — the round engine: peer graphs, warm-up, local updates,
//!   cost accounting
//! - [`cli`] — run configs and the command-line entry points

pub mod cfd;
pub mod cli;
pub mod data;
pub mod dkm;
pub mod error;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod wcp;

pub use error::{Error, Result};
