use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abe_core::experiment::commands::{cmd_compare, cmd_eval, cmd_generate, cmd_histogram, cmd_masks, cmd_train, HISTOGRAM_BINS};
use abe_core::experiment::ExperimentConfig;
use abe_core::model::Variant;
use abe_core::{Error, Result};
use clap::{Parser, Subcommand};

/// Attention-based ensembles for deep metric learning.
#[derive(Parser)]
#[command(name = "abe", version)]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the distance matrix; values above 1 only for `eval`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Generate {
        /// Spec file of `key = value` lines (defaults to --config).
        spec: Option<PathBuf>,
        /// Output path (defaults to --out).
        path: Option<PathBuf>,
    },
    /// Train the configured model.
    Train,
    /// Evaluate a checkpoint on its test split.
    Eval {
        checkpoint: PathBuf,
        /// Dataset file replacing the checkpoint's data source.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Recall cut-offs, e.g. `1,2,4,8`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Train several variants under one config and tabulate them.
    Compare {
        /// Variants, e.g. `single,m-heads,m-tails,m-heads-att,abe`.
        #[arg(long, value_delimiter = ',', default_value = "single,m-heads,m-tails,m-heads-att,abe")]
        variants: Vec<String>,
        /// Keep the divergence loss for every variant, not only `abe`.
        #[arg(long)]
        div_all: bool,
    },
    /// Export cosine-similarity histograms of positive, negative and self pairs.
    Histogram {
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output prefix; files are `<prefix>_pos.csv` etc.
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long, default_value_t = HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Write attention masks as PGM images.
    Masks {
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Test-split sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::usage("--config is required"))?;
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn no_seed(cli: &Cli) -> Result<()> {
    match cli.seed {
        Some(_) => Err(Error::usage("--seed does not apply to this command")),
        None => Ok(()),
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::usage("--threads must be at least 1"));
    }
    if cli.threads > 1 && !matches!(cli.command, Command::Eval { .. }) {
        return Err(Error::usage("--threads above 1 is only supported by eval"));
    }
    match &cli.command {
        Command::Generate { spec, path } => {
            let spec = spec.as_ref().or(cli.config.as_ref()).ok_or_else(|| Error::usage("missing spec file"))?;
            let path = path.as_ref().or(cli.out.as_ref()).ok_or_else(|| Error::usage("missing output path"))?;
            let text = fs::read_to_string(spec).map_err(|e| Error::config(format!("{}: {e}", spec.display())))?;
            cmd_generate(&text, cli.seed, path, out)?;
        }
        Command::Train => {
            cmd_train(&load_config(cli)?, out)?;
        }
        Command::Eval { checkpoint, dataset, ks } => {
            no_seed(cli)?;
            cmd_eval(checkpoint, dataset.as_deref(), ks.as_deref(), cli.threads, cli.out.as_deref(), out)?;
        }
        Command::Compare { variants, div_all } => {
            let cfg = load_config(cli)?;
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            cmd_compare(&cfg, &variants, *div_all, out)?;
        }
        Command::Histogram {
            checkpoint,
            dataset,
            prefix,
            bins,
        } => {
            no_seed(cli)?;
            let prefix = match (prefix, &cli.out) {
                (Some(p), _) => p.clone(),
                (None, Some(dir)) => dir.join("hist"),
                (None, None) => PathBuf::from("hist"),
            };
            cmd_histogram(checkpoint, dataset.as_deref(), &prefix, *bins, out)?;
        }
        Command::Masks {
            checkpoint,
            dataset,
            samples,
        } => {
            no_seed(cli)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("masks"));
            cmd_masks(checkpoint, dataset.as_deref(), samples, Path::new(&dir), out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("abe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
