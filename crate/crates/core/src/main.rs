use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use avemo_core::config::RunConfig;
use avemo_core::eval::{evaluate_corpus, LexiconEmbedder};
use avemo_core::manifest::{validate_manifest, EmotionPolicy, Split, TaskTag};
use avemo_core::model::AvModel;
use avemo_core::preprocess::synth::{generate_synthetic_corpus, SynthConfig};
use avemo_core::preprocess::{FeatureCache, Preprocessor};
use avemo_core::prompts::Modality;
use avemo_core::service::DialogueService;
use avemo_core::training::{train_stage, FeatureStore, TrainingData};
use avemo_core::util::{sha256_hex, write_atomic};
use avemo_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "avemo",
    version,
    about = "Emotion-aware audio-visual dialogue: data, training, evaluation and serving"
)]
struct Cli {
    /// TOML run configuration; `AVEMO_` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        dialogues: usize,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a manifest and fill the feature cache.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run one training stage (0 is the text warm-up) and write a checkpoint.
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from; a fresh model otherwise.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated objectives, e.g. `asr` or `emr,emd`.
        #[arg(long = "ablate-objectives", alias = "objectives")]
        objectives: Option<String>,
        /// Stage-3 inputs as letters: `t`, `a`, `v` or combinations.
        #[arg(long = "ablate-modality", alias = "modality")]
        modality: Option<Modality>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Feature cache directory.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest and write the metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Allow a manifest whose split is not `test`.
        #[arg(long)]
        allow_non_test: bool,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Serve the dialogue API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_data_error() => 3,
        Error::Precondition(_) => 3,
        _ => 4,
    }
}

fn preprocessor(cfg: &RunConfig, cache: Option<&Path>) -> Result<Preprocessor> {
    let cache = cache.map(FeatureCache::new).transpose()?;
    Preprocessor::new(cfg.preprocess.clone(), cache)
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<avemo_core::manifest::DatasetManifest> {
    validate_manifest(path, &cfg.model.emotions, EmotionPolicy::Strict)
}

fn parse_objectives(s: &str) -> Result<std::collections::BTreeSet<TaskTag>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            serde_json::from_value(serde_json::Value::String(p.trim().to_lowercase()))
                .map_err(|_| Error::Config(format!("unknown objective `{p}`")))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::from_process_env(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            seed,
            dialogues,
            rounds,
            split,
            out,
        } => {
            let split: Split = serde_json::from_value(serde_json::Value::String(split.clone()))
                .map_err(|_| Error::Config(format!("unknown split `{split}`")))?;
            let sc = SynthConfig {
                seed,
                n_dialogues: dialogues,
                rounds_per_dialogue: rounds,
                split,
                ..SynthConfig::default()
            };
            let m = generate_synthetic_corpus(&out, &sc, &cfg.model.emotions)?;
            println!(
                "{} dialogues written to {}",
                m.records.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Preprocess { manifest, out, workers } => {
            let m = load_manifest(&manifest, &cfg)?;
            let pre = preprocessor(&cfg, Some(&out))?;
            let stats = pre.preprocess_manifest(&m, workers)?;
            write_json(
                &out.join("preprocess_report.json"),
                &serde_json::json!({
                    "manifest_sha256": sha256_hex(&std::fs::read(&manifest)?),
                    "config_hash": cfg.hash()?,
                    "stats": stats,
                }),
            )?;
            println!(
                "{} written, {} reused, {} detector fallbacks",
                stats.written, stats.reused, stats.detector_fallbacks
            );
        }
        Command::Train {
            stage,
            manifest,
            out,
            resume,
            objectives,
            modality,
            max_steps,
            cache,
        } => {
            {
                let sc = cfg.stages.get_mut(stage)?;
                if let Some(o) = &objectives {
                    sc.objectives = parse_objectives(o)?;
                }
                if let Some(m) = modality {
                    sc.modality = m;
                }
                if let Some(n) = max_steps {
                    sc.max_steps = n;
                }
            }
            cfg.validate()?;
            let m = load_manifest(&manifest, &cfg)?;
            let mut model = match &resume {
                Some(dir) => AvModel::load(dir)?,
                None => AvModel::new(cfg.model.clone())?,
            };
            if stage == 3 {
                for needed in [1u8, 2] {
                    if !model.stages.iter().any(|s| s.stage == needed) {
                        tracing::warn!("no stage-{needed} training in the starting checkpoint; its encoder stays at random initialization");
                        eprintln!(
                            "warning: stage {needed} has not been run; continuing with a randomly initialized encoder"
                        );
                    }
                }
            }
            let features = FeatureStore::build(&m, &preprocessor(&cfg, cache.as_deref())?)?;
            let sc = cfg.stages.get(stage)?.clone();
            std::fs::create_dir_all(&out)?;
            let report = train_stage(
                &mut model,
                &sc,
                &TrainingData {
                    manifest: &m,
                    features: &features,
                },
                Some(&out.join("train_log.jsonl")),
            )?;
            model.save(&out)?;
            write_atomic(&out.join("resolved_config.toml"), cfg.to_toml()?.as_bytes())?;
            write_json(&out.join("train_report.json"), &report)?;
            println!(
                "stage {stage}: {} steps, final loss {:.4}, checkpoint {}",
                report.steps,
                report.final_loss,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            seed,
            out,
            allow_non_test,
            cache,
        } => {
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            cfg.eval.allow_non_test |= allow_non_test;
            let model = AvModel::load(&checkpoint)?;
            let m = load_manifest(&manifest, &cfg)?;
            let features = FeatureStore::build(&m, &preprocessor(&cfg, cache.as_deref())?)?;
            let report = evaluate_corpus(&model, &m, &features, &cfg.eval, &LexiconEmbedder::default())?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &report)?;
            write_atomic(&out.join("summary.md"), report.summary_table().as_bytes())?;
            write_atomic(&out.join("resolved_config.toml"), cfg.to_toml()?.as_bytes())?;
            print!("{}", report.summary_table());
        }
        Command::Serve { checkpoint, port, host } => {
            let svc = DialogueService::new(cfg.service.clone())?;
            let model = AvModel::load(&checkpoint)?;
            svc.install_model(model, cfg.preprocess.clone())?;
            let addr: std::net::SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(avemo_core::service::http::serve(Arc::new(svc), addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
