//! Command-line front end. `run` returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::chanenc::EmbeddingSource;
use crate::corpus::{build_corpus, CorpusConfig, Manifest, Split};
use crate::error::{Error, Result};
use crate::evalkit::{
    compare, evaluate, export_embeddings, read_summary_csv, write_jsonl, write_summary_csv, EvalOptions, SummaryRow,
};
use crate::film::Model;
use crate::selfcheck::run_suite;
use crate::trainer::{fit, Strategy, TrainConfig, CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "casnet", version, about = "Channel-aware speech separation: corpus, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    GuideSame,
    GuideDiff,
    Perturb,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::GuideSame => Strategy::GuideSame,
            StrategyArg::GuideDiff => Strategy::GuideDiff,
            StrategyArg::Perturb => Strategy::Perturb,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Same,
    OtherSameChannel,
    OtherChannel,
    AllOnes,
    Gaussian,
    NoFilm,
}

impl From<SourceArg> for EmbeddingSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Same => EmbeddingSource::SameMixture,
            SourceArg::OtherSameChannel => EmbeddingSource::OtherMixtureSameChannel,
            SourceArg::OtherChannel => EmbeddingSource::OtherChannel,
            SourceArg::AllOnes => EmbeddingSource::AllOnes,
            SourceArg::Gaussian => EmbeddingSource::GaussianNoise,
            SourceArg::NoFilm => EmbeddingSource::Bypass,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic multi-channel corpus.
    GenCorpus {
        /// Corpus configuration (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints and logs.
    Train {
        /// Training configuration (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by gen-corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for checkpoints, metrics and step logs.
        #[arg(long)]
        out: PathBuf,
        /// Auxiliary-mixture sampling regime.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Weight of the channel-identification loss.
        #[arg(long)]
        gamma: Option<f64>,
        /// Train the plain separator without channel conditioning.
        #[arg(long)]
        baseline: bool,
        /// Extra separator blocks for the baseline.
        #[arg(long)]
        extra_blocks: Option<usize>,
        /// Number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimisation steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Print a progress line every N steps.
        #[arg(long)]
        log_every: Option<usize>,
        /// Seed for initialisation and sampling; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split under one embedding source.
    Eval {
        /// Checkpoint file.
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Split to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Where the channel embedding comes from.
        #[arg(long, value_enum, default_value = "same")]
        emb_source: SourceArg,
        /// Channels to score (default: the hold-out channel on the test split, else all).
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<u32>>,
        /// Name of the model in reports (default: checkpoint file stem).
        #[arg(long)]
        model_id: Option<String>,
        /// Write the one-row summary CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print the full report, per-mixture scores included, as JSON.
        #[arg(long)]
        json: bool,
        /// Seed for auxiliary-mixture draws and noise embeddings.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export channel embeddings of every mixture in a split as JSONL.
    Embed {
        /// Checkpoint file.
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Split to embed.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Seed for inputs and probed coordinates.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge evaluation summary CSVs into one table.
    Compare {
        /// Summary CSVs written by `eval --csv`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the merged table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn echo<T: Serialize>(what: &str, cfg: &T, seed: u64) -> Result<()> {
    eprintln!("{what}: {}", serde_json::to_string(cfg)?);
    eprintln!("seed: {seed}");
    Ok(())
}

/// Gamma recorded by `train` next to the checkpoint, if any.
fn sibling_gamma(ckpt: &Path) -> Option<f64> {
    let p = ckpt.parent()?.join(CONFIG_FILE);
    TrainConfig::from_json_file(&p).ok().filter(|c| !c.baseline).map(|c| c.gamma)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => CorpusConfig::from_json_file(&p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            echo("config", &cfg, cfg.seed)?;
            build_corpus(&cfg, &out)?;
            println!("wrote corpus to {}", out.display());
        }
        Command::Train {
            config,
            corpus,
            out,
            strategy,
            gamma,
            baseline,
            extra_blocks,
            epochs,
            max_steps,
            log_every,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_json_file(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(c) = corpus {
                cfg.corpus = Some(c);
            }
            if let Some(s) = strategy {
                cfg.strategy = s.into();
            }
            if let Some(g) = gamma {
                cfg.gamma = g;
            }
            cfg.baseline |= baseline;
            if let Some(n) = extra_blocks {
                cfg.extra_blocks = n;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            if let Some(l) = log_every {
                cfg.log_every = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            echo("config", &cfg, cfg.seed)?;
            let outcome = fit(&cfg, Some(&out))?;
            println!(
                "trained {} steps over {} epochs; best validation SI-SNRi {:.3} dB; checkpoints in {}",
                outcome.steps.len(),
                outcome.history.len(),
                outcome.best_val_sisnri,
                out.display()
            );
        }
        Command::Eval { checkpoint, corpus, split, emb_source, channels, model_id, csv, json, seed } => {
            let (model, store) = Model::load(&checkpoint)?;
            let manifest = Manifest::load(&corpus, split.into())?;
            let model_id = model_id.unwrap_or_else(|| {
                checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
            });
            let opts = EvalOptions { source: emb_source.into(), channels, seed, model_id, gamma: sibling_gamma(&checkpoint) };
            echo("model", &model.cfg, seed)?;
            let report = evaluate(&model, &store, &manifest, &opts)?;
            let row = SummaryRow::from(&report);
            if let Some(p) = csv {
                write_summary_csv(std::slice::from_ref(&row), &p)?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", compare(&[row])?.0);
            }
        }
        Command::Embed { checkpoint, corpus, split, out } => {
            let (model, store) = Model::load(&checkpoint)?;
            let manifest = Manifest::load(&corpus, split.into())?;
            echo("model", &model.cfg, 0)?;
            let rows = export_embeddings(&model, &store, &manifest)?;
            write_jsonl(&rows, &out)?;
            println!("wrote {} embeddings to {}", rows.len(), out.display());
        }
        Command::GradCheck { seed } => {
            eprintln!("seed: {seed}");
            let results = run_suite(seed)?;
            let mut failed = 0;
            for c in &results {
                println!(
                    "{} {:<8} {:<22} max rel err {:.3e} (tol {:.0e}) over {} coords",
                    if c.passed() { "PASS" } else { "FAIL" },
                    if c.composite { "compos." } else { "primit." },
                    c.name,
                    c.report.max_rel_error,
                    c.tol,
                    c.report.coordinates
                );
                if !c.passed() {
                    failed += 1;
                    println!("     worst at {}", c.report.worst_at);
                }
            }
            if failed > 0 {
                return Err(Error::Config(format!("{failed} of {} gradient checks failed", results.len())));
            }
            println!("all {} gradient checks passed", results.len());
        }
        Command::Compare { reports, out } => {
            let mut rows = Vec::new();
            for p in &reports {
                rows.extend(read_summary_csv(p)?);
            }
            let (text, csv_text) = compare(&rows)?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(&p, csv_text).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
