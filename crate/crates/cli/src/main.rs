use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use mtl_cli::*;
use mtl_core::data::Split;
use mtl_core::synth::SynthConfig;

#[derive(Parser)]
#[command(
    name = "mtl",
    version,
    about = "Multi-task text classification with joint label embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Enable the label transfer network.
        #[arg(long)]
        use_ltn: bool,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Task the data belongs to (default: the main task).
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Score the transfer network's predictions instead of the main model's.
        #[arg(long)]
        use_ltn: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write transfer-network pseudo-labels for a pool of examples.
    Relabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Task whose data format the pool follows (default: the main task).
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export label embeddings with 2-D PCA coordinates as CSV.
    ExportLabels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate two correlated synthetic tasks and a run config.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_dev: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        n_unlabelled: usize,
        #[arg(long, default_value_t = 0.9)]
        correlation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation variant and print a summary table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, use_ltn: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.train.use_ltn |= use_ltn;
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(out: Option<&Path>, report: &mtl_core::metrics::MetricReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(EVAL_FILE), text + "\n")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            use_ltn,
            out,
        } => {
            let cfg = load_config(&config, seed, use_ltn)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (outcome, artifacts) = cmd_train(&cfg, &out)?;
            println!(
                "best epoch {} {} {:.4}",
                outcome.history.best_epoch.unwrap_or(0),
                outcome.dev_report.metric_name,
                outcome.dev_report.value
            );
            println!("wrote {}", artifacts.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            split,
            use_ltn,
            out,
        } => {
            let report = cmd_eval(
                &checkpoint,
                &data,
                task.as_deref(),
                split.map(Split::from),
                use_ltn,
            )?;
            write_report(out.as_deref(), &report)?;
        }
        Command::Relabel {
            checkpoint,
            pool,
            task,
            out,
        } => {
            let labels = cmd_relabel(&checkpoint, &pool, task.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(PSEUDO_FILE);
            write_pseudo_labels(&path, &labels)?;
            println!("wrote {} pseudo-labels to {}", labels.len(), path.display());
        }
        Command::ExportLabels { checkpoint, out } => {
            let rows = cmd_export_labels(&checkpoint)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(LABELS_FILE);
            write_label_rows(&path, &rows)?;
            println!("wrote {} label rows to {}", rows.len(), path.display());
        }
        Command::Synth {
            seed,
            n_train,
            n_dev,
            n_test,
            n_unlabelled,
            correlation,
            out,
        } => {
            let cfg = SynthConfig {
                seed,
                n_train,
                n_dev,
                n_test,
                n_unlabelled,
                correlation,
                ..Default::default()
            };
            let path = cmd_synth(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load_config(&config, seed, false)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("ablation"));
            let rows = cmd_ablate(&cfg, &ablation_grid(), &out)?;
            print!("{}", format_ablation(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
