//! Operator entry points: run simulations from JSON configs, exercise the
//! codec and the centroid distance standalone, and verify the alignment
//! gradient against finite differences.
//!
//! Config files are strict JSON: unknown keys are rejected, missing keys fall
//! back to the defaults in [`SimConfig::default`]. Diagnostics go to stderr;
//! metrics files and summary lines are the data.

use crate::cfd::{self, FrequencySet};
use crate::dkm::{self, AlignConfig, AlignTeacher};
use crate::error::{Error, Result};
use crate::protocol::{self, DelayedClient, MetricsRow, RunMode, SimConfig};
use crate::rng::{self, Stream};
use crate::wcp;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// JSON mirror of [`SimConfig`] plus output paths. Every field is optional;
/// unknown keys fail the parse.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: Option<u32>,
    pub clients: Option<u32>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub local_epochs: Option<u32>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub peers: Option<usize>,
    pub k: Option<usize>,
    pub wcp_max_iters: Option<usize>,
    pub wcp_tol: Option<f64>,
    pub t_dkm: Option<usize>,
    pub sigma: Option<f64>,
    pub n_freq: Option<usize>,
    pub alpha_mix: Option<f64>,
    pub beta_dist: Option<f64>,
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub hidden: Option<Vec<usize>>,
    pub init_scale: Option<f64>,
    pub classes: Option<usize>,
    pub feature_dim: Option<usize>,
    pub samples: Option<usize>,
    pub spread: Option<f64>,
    pub dirichlet_alpha: Option<f64>,
    pub test_fraction: Option<f64>,
    pub delayed: Option<Vec<DelayedClient>>,
    pub align_rounds: Option<u32>,
    pub mode: Option<RunMode>,
    pub parallel: Option<bool>,
    /// Output base path; `<out>.jsonl`, `<out>.csv` and `<out>.meta.json`.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failed: {e}")))
    }

    /// Fill missing keys from the library defaults.
    pub fn resolve(&self) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            rounds: self.rounds.unwrap_or(d.rounds),
            clients: self.clients.unwrap_or(d.clients),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            local_epochs: self.local_epochs.unwrap_or(d.local_epochs),
            lambda: self.lambda.unwrap_or(d.lambda),
            gamma: self.gamma.unwrap_or(d.gamma),
            peers: self.peers.unwrap_or(d.peers),
            k: self.k.unwrap_or(d.k),
            wcp_max_iters: self.wcp_max_iters.unwrap_or(d.wcp_max_iters),
            wcp_tol: self.wcp_tol.unwrap_or(d.wcp_tol),
            t_dkm: self.t_dkm.unwrap_or(d.t_dkm),
            sigma: self.sigma.unwrap_or(d.sigma),
            n_freq: self.n_freq.unwrap_or(d.n_freq),
            alpha_mix: self.alpha_mix.unwrap_or(d.alpha_mix),
            beta_dist: self.beta_dist.unwrap_or(d.beta_dist),
            eps: self.eps.unwrap_or(d.eps),
            seed: self.seed.unwrap_or(d.seed),
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            init_scale: self.init_scale.unwrap_or(d.init_scale),
            classes: self.classes.unwrap_or(d.classes),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
            samples: self.samples.unwrap_or(d.samples),
            spread: self.spread.unwrap_or(d.spread),
            dirichlet_alpha: self.dirichlet_alpha.unwrap_or(d.dirichlet_alpha),
            test_fraction: self.test_fraction.unwrap_or(d.test_fraction),
            delayed: self.delayed.clone().unwrap_or(d.delayed),
            align_rounds: self.align_rounds.or(d.align_rounds),
            mode: self.mode.unwrap_or(d.mode),
            parallel: self.parallel.unwrap_or(d.parallel),
        }
    }
}

/// Sidecar metadata written next to the metrics files.
#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    label: &'a str,
    config: &'a SimConfig,
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Execute a simulation and write `<out>.jsonl`, `<out>.csv` and
/// `<out>.meta.json`. Returns the metrics for programmatic callers.
pub fn cmd_run(
    config_path: Option<&Path>,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
    ablation_no_align: bool,
    baseline_dense: bool,
) -> Result<Vec<MetricsRow>> {
    let run_config = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = run_config.resolve();
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if baseline_dense {
        cfg.mode = RunMode::DenseWire;
    } else if ablation_no_align {
        cfg.mode = RunMode::NoAlign;
    }
    let label = match cfg.mode {
        RunMode::Full => "full",
        RunMode::NoAlign => "ablation",
        RunMode::DenseWire => "dense",
    };

    let rows = protocol::run_simulation(&cfg)?;

    let out = out_override
        .map(Path::to_path_buf)
        .or(run_config.out)
        .unwrap_or_else(|| PathBuf::from("dfedcad_run"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out.with_extension("jsonl"), protocol::to_jsonl(&rows)?)?;
    fs::write(out.with_extension("csv"), protocol::to_csv(&rows))?;
    let meta = RunMeta { label, config: &cfg };
    fs::write(out.with_extension("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    // One summary line per delayed client: peak accuracy and mean per-round
    // costs, the quantities the cost table tracks.
    for d in &cfg.delayed {
        let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.client_id == d.id).collect();
        if mine.is_empty() {
            continue;
        }
        let max_acc = mine.iter().filter_map(|r| r.acc).fold(0.0f64, f64::max);
        let mean_bytes = mine.iter().map(|r| (r.bytes_sent + r.bytes_recv) as f64).sum::<f64>()
            / mine.len() as f64;
        let mean_flops = mine.iter().map(|r| r.flops as f64).sum::<f64>() / mine.len() as f64;
        println!(
            "run={label} delayed_client={} max_acc={max_acc:.4} mean_bytes_per_round={mean_bytes:.1} mean_flops_per_round={mean_flops:.1}",
            d.id
        );
    }
    eprintln!(
        "wrote {} metric rows to {}.{{jsonl,csv}} (run={label})",
        rows.len(),
        out.display()
    );
    Ok(rows)
}

// ---------------------------------------------------------------------------
// compress / decompress
// ---------------------------------------------------------------------------

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn write_f32_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Cluster-compress a flat little-endian f32 weight file into a single-layer
/// wire stream; prints the payload cost and reduction versus dense 32-bit.
pub fn cmd_compress(input: &Path, output: &Path, k: usize) -> Result<()> {
    let weights = read_f32_file(input)?;
    let n = weights.len();
    let out = wcp::wcp_compress(&weights, k, wcp::DEFAULT_MAX_ITERS, wcp::DEFAULT_TOL)?;
    let layer = wcp::CompressedLayer::new(1, n, out.table, out.indices)?;
    let model = wcp::CompressedModel {
        client_id: 0,
        round: 0,
        layers: vec![layer],
        biases: vec![Vec::new()],
    };
    fs::write(output, wcp::encode_wire(&model))?;
    let payload = wcp::payload_bits(n as u64, k as u64, wcp::WIRE_BITS_PER_WEIGHT);
    let dense = n as u64 * wcp::WIRE_BITS_PER_WEIGHT;
    println!(
        "n={n} k={k} index_bits_per_weight={} payload_bits={payload} dense_bits={dense} reduction={:.2}%",
        wcp::bits_per_index(k as u64),
        100.0 * (1.0 - payload as f64 / dense as f64)
    );
    Ok(())
}

/// Reconstruct the flat f32 weight file from a compressed wire stream.
pub fn cmd_decompress(input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input)?;
    let model = wcp::decode_wire(&bytes)?;
    let mut values = Vec::new();
    for layer in &model.layers {
        let matrix = wcp::wcp_decompress(layer)?;
        values.extend_from_slice(matrix.data());
    }
    write_f32_file(output, &values)?;
    eprintln!(
        "decompressed {} layers, {} weights, to {}",
        model.layers.len(),
        values.len(),
        output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cfd / align-check
// ---------------------------------------------------------------------------

/// Model-level centroid-distribution distance between two wire files,
/// printed as decimal text.
pub fn cmd_cfd(file_a: &Path, file_b: &Path, sigma: f64, n_freq: usize, seed: u64) -> Result<f64> {
    let a = wcp::decode_wire(&fs::read(file_a)?)?;
    let b = wcp::decode_wire(&fs::read(file_b)?)?;
    let freqs = FrequencySet::generate(n_freq, sigma, seed)?;
    let value = cfd::cfd_model(&a, &b, &freqs)?;
    println!("{value}");
    Ok(value)
}

/// Maximum relative error between the alignment gradient and central finite
/// differences over random instances (N = 32, K = 4, 2 teachers).
pub fn alignment_fd_error(instances: u64, h: f64) -> Result<f64> {
    let cfg = AlignConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = rng::stream(seed, Stream::DataGen, 31, 0);
        let n = 32;
        let k = 4;
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let c_init: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let teacher_data: Vec<(Vec<u32>, Vec<f64>)> = (0..2)
            .map(|_| {
                let idx: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
                let c: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                (idx, c)
            })
            .collect();
        let teachers: Vec<AlignTeacher<'_>> = teacher_data
            .iter()
            .map(|(idx, c)| AlignTeacher { indices: idx, centroids: c })
            .collect();
        let scores: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
        let alpha = cfd::teacher_weights(&scores)?;

        let (_, grad) = dkm::align_loss_and_grad(&weights, &c_init, &teachers, &alpha, &cfg)?;
        let mut fd = vec![0.0; n];
        let mut probe = weights.clone();
        for i in 0..n {
            probe[i] = weights[i] + h;
            let plus = dkm::align_loss(&probe, &c_init, &teachers, &alpha, &cfg)?;
            probe[i] = weights[i] - h;
            let minus = dkm::align_loss(&probe, &c_init, &teachers, &alpha, &cfg)?;
            probe[i] = weights[i];
            fd[i] = (plus - minus) / (2.0 * h);
        }
        let max_abs = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let scale = grad
            .iter()
            .chain(&fd)
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        worst = worst.max(max_abs / scale);
    }
    Ok(worst)
}

/// Run the finite-difference verification and print PASS/FAIL at 1e-5.
pub fn cmd_align_check(instances: u64) -> Result<()> {
    let err = alignment_fd_error(instances, 1e-6)?;
    let pass = err < 1e-5;
    println!(
        "align-check instances={instances} max_relative_error={err:.3e} {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "alignment gradient disagrees with finite differences: {err:.3e} >= 1e-5"
        )))
    }
}
