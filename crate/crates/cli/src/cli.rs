use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ttasv::audio::{Anchor, SegmentDuration};
use ttasv::backends::BackendKind;
use ttasv::embedding::CONDITION_ORIG;
use ttasv::sim::SimConfig;
use ttasv::training::TrainConfig;

use crate::commands::*;
use crate::config::ExperimentConfig;
use crate::error::{config, CliError, Result};
use crate::pipeline::{cmd_run, RunOptions, CACHE_ENV};
use crate::report::cmd_report;

#[derive(Debug, Parser)]
#[command(name = "ttasv", version, about = "Test-time TTS augmentation for short-utterance speaker verification")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Segment duration(s): seconds or `full`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub duration: Vec<String>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Cut a WAV file (or every WAV under a directory) around its midpoint.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "centered")]
        anchor: String,
    },
    /// Generate speech from a prompt through a TTS backend.
    Synthesize {
        #[arg(long)]
        backend: String,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Extract embeddings into a store (`.emb` binary, otherwise text).
    Embed {
        #[arg(long)]
        backend: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = CONDITION_ORIG)]
        condition: String,
    },
    /// Fuse bona-fide and TTS embeddings of a store.
    Fuse {
        #[arg(long)]
        store: PathBuf,
        /// weighted_mean, addition, concatenation, attention_gate or two_stage.
        #[arg(long)]
        method: String,
        #[arg(long, default_value = CONDITION_ORIG)]
        orig: String,
        #[arg(long)]
        tts: String,
        #[arg(long)]
        tts2: Option<String>,
        #[arg(long, default_value_t = ttasv::fusion::DEFAULT_TWO_STAGE_WEIGHT)]
        w: f64,
        #[arg(long, default_value_t = 0.5)]
        inner: f64,
        #[arg(long)]
        gate: Option<PathBuf>,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Cosine-score a trial list.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = CONDITION_ORIG)]
        condition: String,
    },
    /// EER and minDCF of a score file.
    Eer {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// EER of weighted-mean fusion across weights.
    Sweep {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = CONDITION_ORIG)]
        orig: String,
        #[arg(long)]
        tts: String,
        #[arg(long, value_delimiter = ',', default_values_t = (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>())]
        weights: Vec<f64>,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Phoneme coverage of a text (a file path or the text itself).
    PhonemeReport {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Run the embedding simulator and emit `duration_s,method,w,eer_percent`.
    Simulate,
    /// Train the attention gate on a store's bona-fide/TTS pairs.
    TrainGate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = CONDITION_ORIG)]
        orig: String,
        #[arg(long)]
        tts: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Per-epoch loss/accuracy CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Full pipeline driven by --config.
    Run,
    /// EER grid and relative reductions from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<ExperimentConfig>> {
    path.map(ExperimentConfig::load).transpose()
}

fn durations(specs: &[String]) -> Result<Vec<SegmentDuration>> {
    specs.iter().map(|s| s.parse::<SegmentDuration>().map_err(config)).collect()
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| CliError::Config("--out is required".into()))
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match cli.cmd {
        Cmd::Segment { input, anchor } => {
            let ds = durations(&cli.duration)?;
            let [d] = ds.as_slice() else {
                return Err(CliError::Config("segment needs exactly one --duration".into()));
            };
            let anchor: Anchor = anchor.parse().map_err(config)?;
            cmd_segment(&input, require_out(&cli.out)?, *d, anchor)?;
        }
        Cmd::Synthesize {
            backend,
            prompt,
            text,
            round,
        } => {
            let ep = resolve_backend(cfg.as_ref(), &backend, BackendKind::Tts)?;
            let cache = std::env::var_os(CACHE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("cache"));
            let p = cmd_synthesize(&ep, &prompt, &text, round, out, &cache)?;
            println!("{}", p.display());
        }
        Cmd::Embed {
            backend,
            input,
            condition,
        } => {
            let ep = resolve_backend(cfg.as_ref(), &backend, BackendKind::Embed)?;
            let n = cmd_embed(&ep, &input, &condition, require_out(&cli.out)?)?;
            eprintln!("embedded {n} file(s)");
        }
        Cmd::Fuse {
            store,
            method,
            orig,
            tts,
            tts2,
            w,
            inner,
            gate,
            no_normalize,
        } => {
            let s = load_store(&store)?;
            let fused = cmd_fuse(
                &s,
                &FuseArgs {
                    method: &method,
                    orig: &orig,
                    tts: &tts,
                    tts2: tts2.as_deref(),
                    w,
                    inner,
                    gate: gate.as_deref(),
                    normalize: !no_normalize,
                },
            )?;
            save_store(&fused, require_out(&cli.out)?)?;
        }
        Cmd::Score {
            trials,
            store,
            condition,
        } => {
            let text = cmd_score(&load_trials(&trials)?, &load_store(&store)?, &condition)?;
            emit(out, &text)?;
        }
        Cmd::Eer { trials, scores } => {
            let text = std::fs::read_to_string(&scores)
                .map_err(|e| CliError::Data(format!("{}: {e}", scores.display())))?;
            emit(out, &cmd_eer(&load_trials(&trials)?, &text)?)?;
        }
        Cmd::Sweep {
            trials,
            store,
            orig,
            tts,
            weights,
            no_normalize,
        } => {
            let csv = cmd_sweep(
                &load_trials(&trials)?,
                &load_store(&store)?,
                &orig,
                &tts,
                &weights,
                !no_normalize,
            )?;
            emit(out, &csv)?;
        }
        Cmd::PhonemeReport { dict, text } => emit(out, &cmd_phoneme_report(&dict, &text)?)?,
        Cmd::Simulate => {
            let mut sim = cfg.map(|c| c.sim).unwrap_or_else(SimConfig::default);
            if let Some(seed) = cli.seed {
                sim.seed = seed;
            }
            if !cli.duration.is_empty() {
                sim.durations = durations(&cli.duration)?
                    .into_iter()
                    .map(|d| match d {
                        SegmentDuration::Seconds(s) => s,
                        SegmentDuration::Full => 8.0,
                    })
                    .collect();
            }
            emit(out, &cmd_simulate(&sim)?)?;
        }
        Cmd::TrainGate {
            store,
            orig,
            tts,
            epochs,
            lr,
            hidden,
            batch,
            log,
        } => {
            let mut tc = TrainConfig::default();
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = lr {
                tc.learning_rate = l;
            }
            if let Some(h) = hidden {
                tc.hidden = h;
            }
            if let Some(b) = batch {
                tc.batch_size = b;
            }
            if let Some(s) = cli.seed {
                tc.seed = s;
            }
            let r = cmd_train_gate(&load_store(&store)?, &orig, &tts, &tc, require_out(&cli.out)?)?;
            eprintln!("trained on {} speakers; best epoch {}", r.speakers, r.best_epoch);
            if let Some(p) = log {
                emit(Some(&p), &r.log_csv)?;
            }
        }
        Cmd::Run => {
            let cfg = cfg.ok_or_else(|| CliError::Config("run needs --config".into()))?;
            let opts = RunOptions {
                out: cli.out.clone(),
                jobs: cli.jobs,
                durations: if cli.duration.is_empty() {
                    None
                } else {
                    Some(durations(&cli.duration)?)
                },
                seed: cli.seed,
            };
            let s = cmd_run(&cfg, &opts)?;
            eprintln!(
                "{} system reports in {} (config {}, tts cache {} hit / {} generated)",
                s.reports.len(),
                s.out_dir.display(),
                &s.config_hash[..12],
                s.cache_hits,
                s.cache_misses
            );
        }
        Cmd::Report { results } => {
            let t = cmd_report(&results, out)?;
            print!("{}", t.grid);
        }
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
