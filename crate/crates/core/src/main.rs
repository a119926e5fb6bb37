use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use piave::data::{build_corpus, Corpus, CorpusConfig, Split, ViewLevel};
use piave::dsp::{read_wav, sdr, si_sdr, stoi};
use piave::geometry::{self_align, MeshFile, Topology};
use piave::harness::ablation::{run_ablation, Variant};
use piave::harness::train::{train, TrainConfig, FINE_TUNE_LR};
use piave::harness::{evaluate, load_model, save_model, EvalOptions};
use piave::model::{ModelConfig, Piave};

#[derive(Parser)]
#[command(name = "piave", version, about = "Pose-invariant audio-visual speaker extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; sections absent from the file keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Corpus root directory.
        #[arg(long, default_value = "corpus")]
        root: PathBuf,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Start from this checkpoint (fine-tuning, learning rate 1e-4 unless --lr).
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint under one or more camera views.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// View to evaluate; repeat for several. All seven when omitted.
        #[arg(long = "view")]
        views: Vec<ViewLevel>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-item CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        no_stoi: bool,
    },
    /// Train and evaluate the ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Variants to run; all four when omitted.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare an estimate WAV against a reference WAV.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Face geometry tools.
    Geometry {
        #[command(subcommand)]
        command: GeometryCommand,
    },
}

#[derive(Subcommand)]
enum GeometryCommand {
    /// Estimate the similarity pose mapping the pose-invariant mesh onto the posed mesh.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        posed: PathBuf,
        #[arg(long)]
        invariant: PathBuf,
        /// Topology JSON; its landmark cells are used when --landmarks is absent.
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Comma-separated landmark vertex indices.
        #[arg(long, value_delimiter = ',')]
        landmarks: Vec<usize>,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    corpus: CorpusConfig,
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalOptions,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
        };
        cfg.corpus.validate().context("invalid corpus config")?;
        cfg.model.validate().context("invalid model config")?;
        cfg.train.validate().context("invalid train config")?;
        Ok(cfg)
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_splits(corpus: &Corpus) -> Result<(Vec<piave::data::CorpusItem>, Vec<piave::data::CorpusItem>)> {
    Ok((corpus.load_split(Split::Train)?, corpus.load_split(Split::Val)?))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, root } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.corpus.seed = s;
            }
            let manifest = build_corpus(&cfg.corpus, &root)?;
            let summary = serde_json::json!({
                "root": root,
                "seed": manifest.seed,
                "items": Split::ALL.iter().map(|&s| (s.name(), manifest.items(s).count())).collect::<std::collections::BTreeMap<_, _>>(),
            });
            emit(&summary, common.out.as_deref())
        }
        Command::Train {
            common,
            corpus,
            checkpoint,
            init_from,
            lr,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let model = match &init_from {
                Some(p) => {
                    cfg.train.lr_init = lr.unwrap_or(FINE_TUNE_LR);
                    load_model(p)?.0
                }
                None => {
                    if let Some(l) = lr {
                        cfg.train.lr_init = l;
                    }
                    Piave::new(cfg.model.clone(), cfg.train.seed)?
                }
            };
            cfg.train.validate()?;
            let corpus = Corpus::open(&corpus)?;
            let (train_items, val_items) = load_splits(&corpus)?;
            let (model, history) = train(model, &train_items, &val_items, &cfg.train, |r, secs| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:>8.3}  val SI-SDR {:>7.3} dB  {:?}  ({secs:.0} s)",
                    r.epoch, r.lr, r.train_loss, r.val_si_sdr, r.decision
                );
            })?;
            save_model(
                &checkpoint,
                &model,
                serde_json::json!({ "train": cfg.train, "best_epoch": history.best_epoch }),
            )?;
            emit(&history, common.out.as_deref())
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            views,
            split,
            csv,
            no_stoi,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.eval.view_seed = s;
            }
            if no_stoi {
                cfg.eval.stoi = false;
            }
            let views = if views.is_empty() { ViewLevel::ALL.to_vec() } else { views };
            let (model, _) = load_model(&checkpoint)?;
            let corpus = Corpus::open(&corpus)?;
            let report = evaluate(&model, &corpus, split, &views, &cfg.eval)?;
            for f in &report.failures {
                eprintln!("failed: {} ({})", f.id, f.error);
            }
            if let Some(p) = csv {
                write_text(&p, &report.to_csv())?;
            }
            emit(&report, common.out.as_deref())
        }
        Command::Ablate {
            common,
            corpus,
            seeds,
            variants,
            csv,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let base = common.seed.unwrap_or(cfg.train.seed);
            let seeds: Vec<u64> = (base..base + seeds).collect();
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let corpus = Corpus::open(&corpus)?;
            let (train_items, val_items) = load_splits(&corpus)?;
            let test_items = corpus.load_split(Split::Test)?;
            let report = run_ablation(
                &variants,
                &seeds,
                &cfg.model,
                &cfg.train,
                (&train_items, &val_items, &test_items),
                &cfg.eval,
                |v, s, r, secs| {
                    eprintln!(
                        "{:<10} seed {s}  epoch {:>3}  val SI-SDR {:>7.3} dB  ({secs:.0} s)",
                        v.name(),
                        r.epoch,
                        r.val_si_sdr
                    )
                },
            )?;
            if let Some(p) = csv {
                write_text(&p, &report.to_csv())?;
            }
            emit(&report, common.out.as_deref())
        }
        Command::Metrics { common, est, reference } => {
            let est = read_wav(&est)?;
            let reference = read_wav(&reference)?;
            let report = vec![si_sdr(&est, &reference)?, sdr(&est, &reference)?, stoi(&est, &reference)?];
            emit(&report, common.out.as_deref())
        }
        Command::Geometry {
            command:
                GeometryCommand::Align {
                    common,
                    posed,
                    invariant,
                    topology,
                    landmarks,
                },
        } => {
            let posed = MeshFile::read(&posed)?.to_mesh()?;
            let invariant = MeshFile::read(&invariant)?.to_mesh()?;
            let landmarks = match (landmarks.is_empty(), topology) {
                (false, _) => landmarks,
                (true, Some(p)) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Topology::from_json(&text)?.landmark_vertices()
                }
                (true, None) => (0..posed.m()).collect(),
            };
            let pose = self_align(&posed, &invariant, &landmarks)?;
            emit(&pose, common.out.as_deref())
        }
    }
}
