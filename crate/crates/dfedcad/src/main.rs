use clap::{Parser, Subcommand};
use dfedcad::cli;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dfedcad",
    version,
    about = "Decentralized federated learning with weight-cluster pruning and centroid-aligned distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation from a JSON config and write JSONL + CSV metrics.
    Run {
        /// JSON config; missing keys take defaults, unknown keys fail.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output base path for <out>.jsonl, <out>.csv, <out>.meta.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable the alignment loss (λ = 0 ablation).
        #[arg(long)]
        ablation_no_align: bool,
        /// Send raw f32 weights instead of clustered models (cost baseline).
        #[arg(long)]
        baseline_dense: bool,
    },
    /// Cluster-compress a flat little-endian f32 weight file.
    Compress {
        input: PathBuf,
        output: PathBuf,
        /// Centroid count (table size).
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Reconstruct a flat f32 weight file from a compressed stream.
    Decompress { input: PathBuf, output: PathBuf },
    /// Centroid-distribution distance between two wire files.
    Cfd {
        file_a: PathBuf,
        file_b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Monte Carlo frequency count.
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the alignment gradient against central finite differences.
    AlignCheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed, ablation_no_align, baseline_dense } => cli::cmd_run(
            config.as_deref(),
            out.as_deref(),
            seed,
            ablation_no_align,
            baseline_dense,
        )
        .map(|_| ()),
        Command::Compress { input, output, k } => cli::cmd_compress(&input, &output, k),
        Command::Decompress { input, output } => cli::cmd_decompress(&input, &output),
        Command::Cfd { file_a, file_b, sigma, n, seed } => {
            cli::cmd_cfd(&file_a, &file_b, sigma, n, seed).map(|_| ())
        }
        Command::AlignCheck { instances } => cli::cmd_align_check(instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
