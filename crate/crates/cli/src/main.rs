//! Command-line front-end for the anomalous sound detection toolkit.
//!
//! Results go to stdout, diagnostics and logs to stderr. The exit code
//! classifies the failure: 2 for configuration and usage problems, 3 for
//! I/O and malformed data, 4 for training failures, 5 for architecture
//! mismatches, 6 for a missing reference domain, 7 for missing labels.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use asdkit::ablate::{run_ablate, GridKind};
use asdkit::config::RunConfig;
use asdkit::data::{class_table, Manifest, Split, MANIFEST_NAME};
use asdkit::error::Error;
use asdkit::pipeline;

#[derive(Parser)]
#[command(name = "asdkit", version, about = "Anomalous sound detection toolkit")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log errors only.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the machine-sound corpus and write its manifest.
    GenData {
        /// Output directory (default: the configured data directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoder on the train split, full fine-tune or adapters.
    Train {
        /// Manifest file or corpus directory (default: configured data directory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to warm-start from; omit for a fresh random init.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory (default: the configured out directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Embed one split with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file or corpus directory (default: configured data directory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split to embed: train or test.
        #[arg(long, value_parser = Split::from_str)]
        split: Split,
        /// Output store path (default: embeddings_<split>.jsonl in the out directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score test embeddings against the train-split reference sets.
    Score {
        #[arg(long)]
        train_store: PathBuf,
        #[arg(long)]
        test_store: PathBuf,
        /// Output CSV path (default: scores.csv in the out directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use one combined reference set when a domain has no train clips.
        #[arg(long)]
        single_detector: bool,
    },
    /// Evaluate a score CSV against manifest labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Manifest file or corpus directory (default: configured data directory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory (default: the configured out directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation grids from a shared pretrained base checkpoint.
    Ablate {
        /// Manifest file or corpus directory (default: configured data directory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained base checkpoint every cell fine-tunes from.
        #[arg(long)]
        base: PathBuf,
        /// Output directory (default: ablate/ under the out directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid to run: rank, matrices, layers, multipliers, or all. Repeatable.
        #[arg(long, default_value = "all")]
        grid: Vec<String>,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Fold adapters into the base weights of a checkpoint.
    MergeLora {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::MissingDomain { .. }) {
                eprintln!("hint: pass --single-detector to score with one combined reference set");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    use Error::*;
    match e {
        InvalidConfig(_) | NyquistViolation { .. } | SingleClass | PlanSelectsNoSites
        | AlreadyMerged | EmptyClass(_) | NonPositiveHmeanInput(_) | EmptyBatch
        | PolicyExceedsDims { .. } | ZeroVector | EmptyReferenceSet => 2,
        Io(_) | Malformed { .. } | Json(_) | ClipTooShort { .. } | NonFiniteSamples
        | EmptyWaveform | EmptySpectrogram => 3,
        Divergence { .. } | NonFiniteGradient { .. } => 4,
        ShapeMismatch { .. } | StatsDimMismatch { .. } | AdapterMismatch(_)
        | AdapterSiteOutOfRange { .. } => 5,
        MissingDomain { .. } => 6,
        MissingLabels(_) => 7,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> asdkit::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A `--data` value may be the manifest itself or the corpus directory.
fn manifest_path(cfg: &RunConfig, data: Option<PathBuf>) -> PathBuf {
    let base = data.unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
    if base.is_dir() {
        base.join(MANIFEST_NAME)
    } else {
        base
    }
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir))
}

fn parse_grids(raw: &[String]) -> asdkit::Result<Vec<GridKind>> {
    let mut grids = Vec::new();
    for token in raw {
        if token == "all" {
            grids.extend(GridKind::ALL);
        } else {
            grids.push(token.parse()?);
        }
    }
    grids.dedup();
    Ok(grids)
}

fn run(cli: Cli) -> asdkit::Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
            let manifest = pipeline::run_gen_data(&cfg, &dir)?;
            println!("wrote {} clips under {}", manifest.records.len(), dir.display());
            println!("manifest: {}", dir.join(MANIFEST_NAME).display());
        }
        Command::Train { data, init, out, cache } => {
            let manifest = manifest_path(&cfg, data);
            let dir = out_dir(&cfg, out);
            let n_classes = class_table(&Manifest::read(&manifest)?)?.len();
            let trainable = pipeline::trainable_param_count(&cfg, n_classes)?;
            println!("trainable parameters: {trainable}");
            let summary =
                pipeline::run_train(&cfg, &manifest, init.as_deref(), &dir, cache.as_deref())?;
            println!("checkpoint: {}", summary.checkpoint.display());
            println!(
                "final loss {:.4}, proxy accuracy {:.3} over {} classes",
                summary.final_loss, summary.final_accuracy, summary.n_classes
            );
        }
        Command::Embed { checkpoint, data, split, out, cache } => {
            let manifest = manifest_path(&cfg, data);
            let out = out.unwrap_or_else(|| {
                PathBuf::from(&cfg.paths.out_dir).join(format!("embeddings_{split}.jsonl"))
            });
            let n = pipeline::run_embed(&cfg, &checkpoint, &manifest, split, &out, cache.as_deref())?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Command::Score { train_store, test_store, out, single_detector } => {
            let out = out
                .unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir).join(pipeline::SCORES_NAME));
            let rows = pipeline::run_score(&cfg, &train_store, &test_store, &out, single_detector)?;
            println!("scored {} clips into {}", rows.len(), out.display());
        }
        Command::Eval { scores, data, out } => {
            let manifest = manifest_path(&cfg, data);
            let dir = out_dir(&cfg, out);
            let report = pipeline::run_eval(&cfg, &scores, &manifest, &dir)?;
            print!("{}", report.render_text());
        }
        Command::Ablate { data, base, out, grid, cache } => {
            let manifest = manifest_path(&cfg, data);
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir).join("ablate"));
            let grids = parse_grids(&grid)?;
            let tables = run_ablate(&cfg, &manifest, &base, &dir, &grids, cache.as_deref())?;
            let mut failed = 0usize;
            for table in &tables {
                println!("{}: {}", table.grid, table.csv_path.display());
                for cell in table.failures() {
                    failed += 1;
                    eprintln!(
                        "cell failed: {} / {}: {}",
                        table.grid,
                        cell.label,
                        cell.error.as_deref().unwrap_or("unknown")
                    );
                }
            }
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see the CSVs for completed rows");
            }
        }
        Command::MergeLora { checkpoint, out } => {
            pipeline::run_merge(&checkpoint, &out)?;
            println!("merged adapters into {}", out.display());
        }
    }
    Ok(())
}
