//! Command-line front end. Every subcommand reads and writes files under
//! explicit paths; failures surface as [`Error`] and are rendered by
//! [`error_record`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::linalg::Matrix;
use crate::pipeline::{
    forward_pass_targets, full_ladder, posteriors, run_ladder, supervised_enhance_with_models,
    EnhanceMethod, EnhanceOptions, Enhancement, PipelineConfig, Pool, RunReport, SystemSpec,
};
use crate::posterior::{Alignment, PosteriorVector, DEFAULT_DECIMALS, DEFAULT_EPS};
use crate::softnet::{
    frame_accuracy, init_mlp, stack_context, train, train_hard, FeatureVector, MlpModel,
};
use crate::synth::{generate, oracle_bayes_accuracy, Corpus, CorpusConfig};

#[derive(Debug, Parser)]
#[command(
    name = "sst",
    version,
    about = "Low-rank and sparse soft targets for classifier retraining"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides seeds in config files when given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Decimal places kept when storing targets.
    #[arg(long, global = true, default_value_t = DEFAULT_DECIMALS)]
    pub decimals: u32,
    /// Floor applied before taking logs.
    #[arg(long, global = true, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        /// Corpus config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the hard-target baseline on a corpus.
    TrainHard {
        #[arg(long)]
        corpus: PathBuf,
        /// Pipeline config (JSON) for network shape and training.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a model's posteriors on one split as a frames × classes matrix.
    DumpPosteriors {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// train, dev, test, icsi-like or lib-like.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Enhance train-split posteriors class by class into soft targets.
    Enhance {
        /// Posterior matrix from dump-posteriors.
        #[arg(long)]
        posteriors: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "pca")]
        method: Enhancement,
        /// Retained variance in percent.
        #[arg(long, default_value_t = 80.0)]
        sigma: f64,
        #[arg(long, default_value_t = crate::sparse::DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Train a fresh model on soft targets.
    TrainSoft {
        #[arg(long)]
        corpus: PathBuf,
        /// Targets for the train split.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Extra pool targets as POOL=FILE, e.g. icsi-like=fp.sstt.
        #[arg(long = "pool-targets")]
        pool_targets: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quantized forward-pass targets for an unlabeled pool.
    FpTargets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "icsi-like")]
        pool: String,
    },
    /// Run a ladder of systems and write report.json and report.txt.
    Ladder {
        /// Ladder spec (JSON); the full PCA/sparse/none ladder when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print the table of a saved report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

/// Ladder file: the systems plus optional corpus and pipeline overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderSpec {
    pub systems: Vec<SystemSpec>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl Default for LadderSpec {
    fn default() -> Self {
        Self {
            systems: full_ladder(&[Enhancement::Pca, Enhancement::Sparse, Enhancement::None]),
            corpus: CorpusConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Machine-readable failure record written to stderr.
pub fn error_record(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_bytes(path, text.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusManifest {
    config: CorpusConfig,
    oracle_accuracy: f64,
    splits: Vec<String>,
}

const LABELED: [&str; 3] = ["train", "dev", "test"];

fn pool_split(pool: Pool) -> &'static str {
    pool.name()
}

fn features_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.features.sstm"))
}

fn labels_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.labels.ssta"))
}

/// Writes every split plus `corpus.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let splits = [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
        (pool_split(Pool::IcsiLike), &corpus.pool_same),
        (pool_split(Pool::LibLike), &corpus.pool_shifted),
    ];
    for (name, split) in splits {
        io::write_bytes(
            &features_path(dir, name),
            &io::encode_matrix(&split.features),
        )?;
        if let Some(labels) = &split.labels {
            io::write_bytes(&labels_path(dir, name), &io::encode_alignment(labels))?;
        }
    }
    let manifest = CorpusManifest {
        config: corpus.config.clone(),
        oracle_accuracy: oracle_bayes_accuracy(corpus)?,
        splits: splits.iter().map(|(n, _)| n.to_string()).collect(),
    };
    write_text(
        &dir.join("corpus.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )
}

/// A corpus directory as written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub config: CorpusConfig,
    features: BTreeMap<String, Matrix>,
    labels: BTreeMap<String, Alignment>,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = read_json(&dir.join("corpus.json"))?;
        let mut features = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for split in &manifest.splits {
            let m = io::read_matrix(&features_path(dir, split))?;
            if m.cols() != manifest.config.feature_dim {
                return Err(Error::Format(format!(
                    "{split}: {} feature columns, corpus says {}",
                    m.cols(),
                    manifest.config.feature_dim
                )));
            }
            if LABELED.contains(&split.as_str()) {
                let a = io::read_alignment(&labels_path(dir, split), manifest.config.classes)?;
                if a.len() != m.rows() {
                    return Err(Error::Format(format!(
                        "{split}: labels and features differ in length"
                    )));
                }
                labels.insert(split.clone(), a);
            }
            features.insert(split.clone(), m);
        }
        Ok(Self {
            config: manifest.config,
            features,
            labels,
        })
    }

    pub fn features(&self, split: &str) -> Result<&Matrix> {
        self.features
            .get(split)
            .ok_or_else(|| Error::InvalidInput(format!("corpus has no split {split:?}")))
    }

    pub fn labels(&self, split: &str) -> Result<&Alignment> {
        self.labels
            .get(split)
            .ok_or_else(|| Error::InvalidInput(format!("split {split:?} has no labels")))
    }

    /// Stacked inputs of a split with the given window.
    pub fn stacked(&self, split: &str, context: usize) -> Result<Vec<FeatureVector>> {
        stack_context(self.features(split)?, context)
    }

    /// Window size implied by a model's input width.
    pub fn context_for(&self, model: &MlpModel) -> Result<usize> {
        let f = self.config.feature_dim;
        let d = model.input_dim();
        if !d.is_multiple_of(f) || (d / f).is_multiple_of(2) {
            return invalid(format!(
                "model input {d} is not an odd multiple of feature dim {f}"
            ));
        }
        Ok(d / f)
    }
}

fn pipeline_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    train_frames: usize,
    holdout_frames: usize,
    loss_history: Vec<f64>,
    holdout_loss_history: Vec<f64>,
    test_accuracy: f64,
}

fn save_training(
    out: &Path,
    corpus: &CorpusDir,
    context: usize,
    seed: u64,
    outcome: &crate::softnet::TrainOutcome,
) -> Result<TrainSummary> {
    io::write_bytes(&out.join("model.ssnn"), &io::encode_model(&outcome.model))?;
    let summary = TrainSummary {
        seed,
        train_frames: outcome.train_frames,
        holdout_frames: outcome.holdout_frames,
        loss_history: outcome.loss_history.clone(),
        holdout_loss_history: outcome.holdout_loss_history.clone(),
        test_accuracy: frame_accuracy(
            &outcome.model,
            &corpus.stacked("test", context)?,
            corpus.labels("test")?,
        )?,
    };
    write_text(
        &out.join("train.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn layer_sizes(cfg: &PipelineConfig, input: usize, classes: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(classes);
    sizes
}

fn parse_pool(name: &str) -> Result<Pool> {
    match name {
        "icsi-like" => Ok(Pool::IcsiLike),
        "lib-like" => Ok(Pool::LibLike),
        other => invalid(format!(
            "unknown pool {other:?}; expected icsi-like or lib-like"
        )),
    }
}

/// Runs one parsed command. Human-readable summaries go to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if g.decimals == 0 {
        return invalid("--decimals must be at least 1");
    }
    if !(g.eps > 0.0) {
        return invalid("--eps must be positive");
    }
    match cli.command {
        Command::Gen { config } => {
            let mut cfg: CorpusConfig = match config {
                Some(p) => read_json(&p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let corpus = generate(&cfg)?;
            write_corpus(&corpus, &g.out)?;
            println!(
                "corpus with {} classes written to {} (oracle accuracy {:.4})",
                cfg.classes,
                g.out.display(),
                oracle_bayes_accuracy(&corpus)?
            );
        }
        Command::TrainHard { corpus, config } => {
            let cfg = pipeline_config(config.as_deref(), g.seed)?;
            let c = CorpusDir::open(&corpus)?;
            let x = c.stacked("train", cfg.context)?;
            let seed = cfg.system_seed(0);
            let init = init_mlp(&layer_sizes(&cfg, x[0].len(), c.config.classes), seed)?;
            let tcfg = crate::softnet::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let outcome = train_hard(&init, &x, c.labels("train")?, &tcfg)?;
            let s = save_training(&g.out, &c, cfg.context, seed, &outcome)?;
            println!("test frame accuracy {:.4}", s.test_accuracy);
        }
        Command::DumpPosteriors {
            model,
            corpus,
            split,
        } => {
            let m = io::read_model(&model)?;
            let c = CorpusDir::open(&corpus)?;
            let x = c.stacked(&split, c.context_for(&m)?)?;
            let post = posteriors(&m, &x)?;
            let rows: Vec<Vec<f64>> = post.into_iter().map(PosteriorVector::into_vec).collect();
            io::write_bytes(&g.out, &io::encode_matrix(&Matrix::from_rows(&rows)?))?;
            println!("{} posteriors written to {}", rows.len(), g.out.display());
        }
        Command::Enhance {
            posteriors,
            corpus,
            method,
            sigma,
            lambda,
        } => {
            let c = CorpusDir::open(&corpus)?;
            let m = io::read_matrix(&posteriors)?;
            let post = (0..m.rows())
                .map(|t| PosteriorVector::new(m.row(t).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let method = match method {
                Enhancement::None => EnhanceMethod::None,
                Enhancement::Pca => EnhanceMethod::Pca {
                    sigma: sigma / 100.0,
                },
                Enhancement::Sparse => EnhanceMethod::Sparse { lambda },
            };
            let opts = EnhanceOptions {
                decimals: g.decimals,
                eps: g.eps,
                seed: g.seed.unwrap_or(0),
                ..EnhanceOptions::default()
            };
            let (enhanced, models) =
                supervised_enhance_with_models(&post, c.labels("train")?, method, &opts)?;
            io::write_bytes(
                &g.out.join("targets.sstt"),
                &io::encode_targets(&enhanced.targets, c.config.classes)?,
            )?;
            for b in &models.bases {
                io::write_bytes(
                    &g.out.join(format!("class-{:04}.sseb", b.class_id)),
                    &io::encode_basis(b),
                )?;
            }
            for d in &models.dictionaries {
                io::write_bytes(
                    &g.out.join(format!("class-{:04}.ssdc", d.class_id)),
                    &io::encode_dictionary(d),
                )?;
            }
            let summary = serde_json::json!({
                "method": format!("{method:?}"),
                "decimals": g.decimals,
                "eps": g.eps,
                "class_ranks": enhanced.ranks,
                "warnings": enhanced.warnings,
            });
            write_text(
                &g.out.join("enhance.json"),
                &serde_json::to_string_pretty(&summary)?,
            )?;
            for w in &enhanced.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} targets written to {}",
                enhanced.targets.len(),
                g.out.display()
            );
        }
        Command::TrainSoft {
            corpus,
            targets,
            pool_targets,
            config,
        } => {
            let cfg = pipeline_config(config.as_deref(), g.seed)?;
            let c = CorpusDir::open(&corpus)?;
            let mut x = Vec::new();
            let mut t = Vec::new();
            if let Some(p) = targets {
                let tt = io::read_targets(&p)?;
                let xx = c.stacked("train", cfg.context)?;
                if tt.len() != xx.len() {
                    return invalid(format!(
                        "{} targets for {} train frames",
                        tt.len(),
                        xx.len()
                    ));
                }
                x.extend(xx);
                t.extend(tt);
            }
            for item in &pool_targets {
                let (pool, file) = item.split_once('=').ok_or_else(|| {
                    Error::InvalidInput(format!("--pool-targets {item:?}: expected POOL=FILE"))
                })?;
                let pool = parse_pool(pool)?;
                let tt = io::read_targets(Path::new(file))?;
                let xx = c.stacked(pool_split(pool), cfg.context)?;
                if tt.len() != xx.len() {
                    return invalid(format!(
                        "{} targets for {} {} frames",
                        tt.len(),
                        xx.len(),
                        pool.name()
                    ));
                }
                x.extend(xx);
                t.extend(tt);
            }
            if x.is_empty() {
                return invalid("train-soft needs --targets or --pool-targets");
            }
            let seed = cfg.master_seed;
            let init = init_mlp(&layer_sizes(&cfg, x[0].len(), c.config.classes), seed)?;
            let tcfg = crate::softnet::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let outcome = train(&init, &x, &t, &tcfg)?;
            let s = save_training(&g.out, &c, cfg.context, seed, &outcome)?;
            println!("test frame accuracy {:.4}", s.test_accuracy);
        }
        Command::FpTargets {
            model,
            corpus,
            pool,
        } => {
            let m = io::read_model(&model)?;
            let c = CorpusDir::open(&corpus)?;
            let pool = parse_pool(&pool)?;
            let x = c.stacked(pool_split(pool), c.context_for(&m)?)?;
            let t = forward_pass_targets(&m, &x, g.decimals)?;
            io::write_bytes(&g.out, &io::encode_targets(&t, m.output_dim())?)?;
            println!("{} targets written to {}", t.len(), g.out.display());
        }
        Command::Ladder { spec } => {
            let mut ladder: LadderSpec = match spec {
                Some(p) => read_json(&p)?,
                None => LadderSpec::default(),
            };
            if let Some(s) = g.seed {
                ladder.corpus.seed = s;
                ladder.pipeline.master_seed = s;
            }
            ladder.pipeline.decimals = g.decimals;
            ladder.pipeline.eps = g.eps;
            let corpus = generate(&ladder.corpus)?;
            let report = run_ladder(&corpus, &ladder.systems, &ladder.pipeline)?;
            write_text(&g.out.join("report.json"), &report.to_json()?)?;
            let table = report.table();
            write_text(&g.out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Report { report } => {
            let r: RunReport = read_json(&report)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}
