use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use dyndepth_cli::config::{load_config, DatasetConfig};
use dyndepth_cli::evalrun::{cmd_eval, cmd_sweep, cmd_threshold_sweep, EvalPolicy, EvalSplit};
use dyndepth_cli::report::write_reports;
use dyndepth_cli::train::cmd_train;
use dyndepth_core::data::write_manifest;
use dyndepth_core::metrics::RunReport;

/// Train and evaluate dynamic-depth transformer encoders with input-driven
/// layer dropping, random-dropping and early-exit baselines.
#[derive(Parser)]
#[command(name = "dyndepth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Dev => EvalSplit::Dev,
            SplitArg::Test => EvalSplit::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint under exactly one policy point.
    Eval(EvalArgs),
    /// Sweep dropped-layer counts: random-exact, input-driven top-k and
    /// (on early-exit checkpoints) forced-exit rows per n.
    Sweep {
        /// Checkpoint(s); several checkpoints aggregate as model seeds.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        /// Dropped-layer counts, e.g. --n-list 0,2,4.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
        /// Random mask draws per checkpoint for the rd column.
        #[arg(long, default_value_t = 5)]
        rd_seeds: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep gate thresholds (input-driven) or entropy thresholds (early
    /// exit) and report executed layers against the task metric.
    ThresholdSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        gamma_list: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        tau_list: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the config's synthetic dataset as JSONL manifests.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[command(group(
    ArgGroup::new("policy")
        .required(true)
        .args(["full", "drop_n", "topk", "gate_threshold", "rd_exact", "ee_entropy"]),
))]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Run every layer.
    #[arg(long)]
    full: bool,
    /// Input-driven top-k with n layers dropped (k = N − n).
    #[arg(long)]
    drop_n: Option<usize>,
    /// Input-driven top-k with k layers kept.
    #[arg(long)]
    topk: Option<usize>,
    /// Keep layers whose gate score exceeds this threshold.
    #[arg(long)]
    gate_threshold: Option<f64>,
    /// Drop a uniformly random subset of exactly n layers.
    #[arg(long)]
    rd_exact: Option<usize>,
    /// Early exit at the first head with mean entropy (nats) below this.
    #[arg(long)]
    ee_entropy: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn policy(&self) -> Result<EvalPolicy> {
        if self.full {
            Ok(EvalPolicy::Full)
        } else if let Some(n) = self.drop_n {
            Ok(EvalPolicy::DropN(n))
        } else if let Some(k) = self.topk {
            Ok(EvalPolicy::TopK(k))
        } else if let Some(g) = self.gate_threshold {
            Ok(EvalPolicy::GateThreshold(g))
        } else if let Some(n) = self.rd_exact {
            Ok(EvalPolicy::RdExact(n))
        } else if let Some(t) = self.ee_entropy {
            Ok(EvalPolicy::EeEntropy(t))
        } else {
            bail!("exactly one policy flag is required")
        }
    }
}

fn emit(rows: &[RunReport], out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            write_reports(file, rows)?;
        }
        None => write_reports(std::io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let result = cmd_train(&cfg, &out)?;
            println!("final checkpoint: {}", result.final_checkpoint.display());
            println!("training log:    {}", result.log_path.display());
            println!("dev metrics:     {}", result.dev_metrics_path.display());
            if let Some(metric) = result.final_dev_metric {
                println!("final dev metric: {}", metric);
            }
        }
        Command::Eval(args) => {
            let policy = args.policy()?;
            let row = cmd_eval(&args.ckpt, &policy, args.split.into(), args.seed)?;
            emit(&[row], args.out.as_ref())?;
        }
        Command::Sweep { ckpt, n_list, rd_seeds, split, seed, out } => {
            let paths: Vec<&std::path::Path> = ckpt.iter().map(|p| p.as_path()).collect();
            let rows = cmd_sweep(&paths, &n_list, rd_seeds, split.into(), seed)?;
            emit(&rows, out.as_ref())?;
        }
        Command::ThresholdSweep { ckpt, gamma_list, tau_list, split, seed, out } => {
            let rows = cmd_threshold_sweep(&ckpt, &gamma_list, &tau_list, split.into(), seed)?;
            emit(&rows, out.as_ref())?;
        }
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            if matches!(cfg.dataset, DatasetConfig::Manifest(_)) {
                bail!("gen-data needs a synthetic dataset config, not manifests");
            }
            std::fs::create_dir_all(&out)?;
            let splits = cfg.load_splits()?;
            for (name, samples) in
                [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)]
            {
                let path = out.join(format!("{}.jsonl", name));
                write_manifest(&path, samples)?;
                println!("wrote {} ({} samples)", path.display(), samples.len());
            }
        }
    }
    Ok(())
}
