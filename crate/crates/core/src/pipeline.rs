//! The system ladder: a hard-target baseline, classifiers retrained on
//! enhanced soft targets, and augmentation with unlabeled pools through
//! forward passes of earlier systems.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigenposterior::{
    compute_basis, log_domain_rank, low_rank_enhance, DEFAULT_SIGMA, RANK_FRACTION,
};
use crate::error::{invalid, Error, Result};
use crate::posterior::{
    group_by_class, quantize_store, Alignment, PosteriorVector, SenoneMatrix, DEFAULT_CLASS_CAP,
    DEFAULT_DECIMALS, DEFAULT_EPS,
};
use crate::softnet::{
    forward, frame_accuracy, init_mlp, stack_context, train, train_hard, FeatureVector, MlpModel,
    TrainConfig, TrainOutcome,
};
use crate::sparse::{
    learn_dictionary, sparse_code, sparse_reconstruct, DictionaryConfig, DEFAULT_LAMBDA,
};
use crate::synth::{oracle_bayes_accuracy, Corpus, CorpusConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enhancement {
    None,
    Pca,
    Sparse,
}

impl Enhancement {
    pub fn name(self) -> &'static str {
        match self {
            Enhancement::None => "none",
            Enhancement::Pca => "pca",
            Enhancement::Sparse => "sparse",
        }
    }
}

impl std::str::FromStr for Enhancement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Enhancement::None),
            "pca" => Ok(Enhancement::Pca),
            "sparse" => Ok(Enhancement::Sparse),
            other => invalid(format!("unknown enhancement method {other:?}")),
        }
    }
}

/// Unlabeled pools: `icsi-like` shares the training domain, `lib-like` is
/// offset by the corpus domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    #[serde(rename = "icsi-like")]
    IcsiLike,
    #[serde(rename = "lib-like")]
    LibLike,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::IcsiLike => "icsi-like",
            Pool::LibLike => "lib-like",
        }
    }

    fn table_name(self) -> &'static str {
        match self {
            Pool::IcsiLike => "ICSI-like",
            Pool::LibLike => "LIB-like",
        }
    }
}

/// Where a system's training targets come from. `from` names an earlier
/// system by its key (see [`SystemSpec::key`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Outputs of `from` on the labeled train split, enhanced with the
    /// system's own method.
    AmiLike { from: String },
    /// Quantized outputs of `from` on an unlabeled pool.
    PoolForwardPass { pool: Pool, from: String },
}

impl DataSource {
    fn from_key(&self) -> &str {
        match self {
            DataSource::AmiLike { from } | DataSource::PoolForwardPass { from, .. } => from,
        }
    }
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: u32,
    pub enhancement: Enhancement,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub data_sources: Vec<DataSource>,
}

impl SystemSpec {
    pub fn baseline() -> Self {
        Self {
            id: 0,
            enhancement: Enhancement::None,
            sigma: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            data_sources: Vec::new(),
        }
    }

    pub fn new(id: u32, enhancement: Enhancement, data_sources: Vec<DataSource>) -> Self {
        Self {
            id,
            enhancement,
            data_sources,
            ..Self::baseline()
        }
    }

    /// `"0"` for the baseline, otherwise `"<id>-<method>"`.
    pub fn key(&self) -> String {
        if self.id == 0 {
            "0".into()
        } else {
            format!("{}-{}", self.id, self.enhancement.name())
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id > 5 {
            return invalid(format!("system id {} outside 0..=5", self.id));
        }
        if self.id == 0 {
            if self.enhancement != Enhancement::None || !self.data_sources.is_empty() {
                return invalid("system 0 trains on hard targets only");
            }
            return Ok(());
        }
        if self.data_sources.is_empty() {
            return invalid(format!("system {} has no data sources", self.key()));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return invalid(format!("system {}: sigma must be in (0, 1]", self.key()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return invalid(format!("system {}: lambda must be positive", self.key()));
        }
        Ok(())
    }
}

fn ami(from: &str) -> DataSource {
    DataSource::AmiLike { from: from.into() }
}

fn fp(pool: Pool, from: String) -> DataSource {
    DataSource::PoolForwardPass { pool, from }
}

/// Systems 1-5 for one enhancement method, all enhancing system 0's outputs.
pub fn method_ladder(method: Enhancement) -> Vec<SystemSpec> {
    let k = |id: u32| format!("{id}-{}", method.name());
    vec![
        SystemSpec::new(1, method, vec![ami("0")]),
        SystemSpec::new(2, method, vec![fp(Pool::IcsiLike, k(1)), ami("0")]),
        SystemSpec::new(3, method, vec![fp(Pool::LibLike, k(1)), ami("0")]),
        SystemSpec::new(4, method, vec![fp(Pool::LibLike, k(2)), ami("0")]),
        SystemSpec::new(
            5,
            method,
            vec![fp(Pool::LibLike, k(2)), fp(Pool::IcsiLike, k(2)), ami("0")],
        ),
    ]
}

/// Baseline plus systems 1-5 for each of the given methods.
pub fn full_ladder(methods: &[Enhancement]) -> Vec<SystemSpec> {
    let mut specs = vec![SystemSpec::baseline()];
    for m in methods {
        specs.extend(method_ladder(*m));
    }
    specs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub hidden_layers: Vec<usize>,
    /// Frames per stacked input window (odd).
    pub context: usize,
    pub train: TrainConfig,
    pub decimals: u32,
    pub eps: f64,
    pub class_cap: usize,
    pub dictionary_epochs: usize,
    pub dictionary_batch: usize,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64],
            context: 3,
            train: TrainConfig::default(),
            decimals: DEFAULT_DECIMALS,
            eps: DEFAULT_EPS,
            class_cap: DEFAULT_CLASS_CAP,
            dictionary_epochs: 10,
            dictionary_batch: 64,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Seed for system `id`: the master seed xor the id.
    pub fn system_seed(&self, id: u32) -> u64 {
        self.master_seed ^ u64::from(id)
    }

    fn train_config(&self, id: u32) -> TrainConfig {
        TrainConfig {
            seed: self.system_seed(id),
            ..self.train.clone()
        }
    }

    fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden_layers);
        sizes.push(classes);
        sizes
    }
}

/// Context-stacked features of every split.
#[derive(Debug, Clone)]
pub struct StackedCorpus {
    pub class_count: usize,
    pub train: Vec<FeatureVector>,
    pub train_labels: Alignment,
    pub dev: Vec<FeatureVector>,
    pub dev_labels: Alignment,
    pub test: Vec<FeatureVector>,
    pub test_labels: Alignment,
    pub pool_same: Vec<FeatureVector>,
    pub pool_shifted: Vec<FeatureVector>,
}

impl StackedCorpus {
    pub fn new(corpus: &Corpus, context: usize) -> Result<Self> {
        Ok(Self {
            class_count: corpus.config.classes,
            train: stack_context(&corpus.train.features, context)?,
            train_labels: corpus.train.labels()?.clone(),
            dev: stack_context(&corpus.dev.features, context)?,
            dev_labels: corpus.dev.labels()?.clone(),
            test: stack_context(&corpus.test.features, context)?,
            test_labels: corpus.test.labels()?.clone(),
            pool_same: stack_context(&corpus.pool_same.features, context)?,
            pool_shifted: stack_context(&corpus.pool_shifted.features, context)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, FeatureVector::len)
    }

    pub fn pool(&self, pool: Pool) -> &[FeatureVector] {
        match pool {
            Pool::IcsiLike => &self.pool_same,
            Pool::LibLike => &self.pool_shifted,
        }
    }
}

/// Forward pass over many frames.
pub fn posteriors(model: &MlpModel, features: &[FeatureVector]) -> Result<Vec<PosteriorVector>> {
    features.par_iter().map(|x| forward(model, x)).collect()
}

/// Trains the hard-target baseline and returns it with its outputs on the
/// train split.
pub fn run_system0(
    data: &StackedCorpus,
    cfg: &PipelineConfig,
) -> Result<(TrainOutcome, Vec<PosteriorVector>)> {
    let sizes = cfg.layer_sizes(data.input_dim(), data.class_count);
    let init = init_mlp(&sizes, cfg.system_seed(0))?;
    let outcome = train_hard(&init, &data.train, &data.train_labels, &cfg.train_config(0))?;
    let post = posteriors(&outcome.model, &data.train)?;
    Ok((outcome, post))
}

/// Enhancement method with its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnhanceMethod {
    None,
    Pca { sigma: f64 },
    Sparse { lambda: f64 },
}

impl EnhanceMethod {
    pub fn of(spec: &SystemSpec) -> Self {
        match spec.enhancement {
            Enhancement::None => EnhanceMethod::None,
            Enhancement::Pca => EnhanceMethod::Pca { sigma: spec.sigma },
            Enhancement::Sparse => EnhanceMethod::Sparse {
                lambda: spec.lambda,
            },
        }
    }

    fn label(&self) -> String {
        match self {
            EnhanceMethod::None => "none".into(),
            EnhanceMethod::Pca { sigma } => format!("pca:{sigma}"),
            EnhanceMethod::Sparse { lambda } => format!("sparse:{lambda}"),
        }
    }
}

/// Effective ranks (95% spectral mass) of one class's centered-log
/// posterior matrix before and after enhancement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRank {
    pub class: usize,
    pub frames: usize,
    pub rank_before: usize,
    pub rank_after: usize,
    /// Retained eigenposteriors, for PCA enhancement.
    pub kept: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EnhancedTargets {
    pub targets: Vec<PosteriorVector>,
    /// Enhanced posteriors before quantization, in frame order.
    pub enhanced: Vec<PosteriorVector>,
    pub ranks: Vec<ClassRank>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EnhanceOptions {
    pub decimals: u32,
    pub eps: f64,
    pub class_cap: usize,
    pub seed: u64,
    pub dictionary_epochs: usize,
    pub dictionary_batch: usize,
}

impl EnhanceOptions {
    pub fn from_pipeline(cfg: &PipelineConfig, seed: u64) -> Self {
        Self {
            decimals: cfg.decimals,
            eps: cfg.eps,
            class_cap: cfg.class_cap,
            seed,
            dictionary_epochs: cfg.dictionary_epochs,
            dictionary_batch: cfg.dictionary_batch,
        }
    }
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self::from_pipeline(&PipelineConfig::default(), 0)
    }
}

/// Per-class models produced during enhancement, for persistence.
#[derive(Debug, Clone, Default)]
pub struct ClassModels {
    pub bases: Vec<crate::eigenposterior::EigenposteriorBasis>,
    pub dictionaries: Vec<crate::sparse::SparseDictionary>,
}

struct ClassResult {
    frames: Vec<usize>,
    enhanced: Vec<PosteriorVector>,
    rank: Option<ClassRank>,
    warnings: Vec<String>,
    basis: Option<crate::eigenposterior::EigenposteriorBasis>,
    dictionary: Option<crate::sparse::SparseDictionary>,
}

fn enhance_class(
    m: &SenoneMatrix,
    fit: &SenoneMatrix,
    method: EnhanceMethod,
    opts: &EnhanceOptions,
) -> Result<ClassResult> {
    let class = m.class_id;
    let cols = m.posteriors();
    let mut res = ClassResult {
        frames: m.frame_indices.clone(),
        enhanced: cols.clone(),
        rank: None,
        warnings: Vec::new(),
        basis: None,
        dictionary: None,
    };
    if method == EnhanceMethod::None {
        return Ok(res);
    }
    if m.len() < 2 {
        res.warnings.push(format!(
            "class {class}: {} frame(s), passed through unenhanced",
            m.len()
        ));
        return Ok(res);
    }
    let rank_before = log_domain_rank(m, opts.eps, RANK_FRACTION)?;
    let mut kept = None;
    match method {
        EnhanceMethod::None => unreachable!(),
        EnhanceMethod::Pca { sigma } => {
            let basis = compute_basis(fit, sigma, opts.eps)?;
            kept = Some(basis.rank());
            res.enhanced = cols
                .iter()
                .map(|z| low_rank_enhance(z, &basis, opts.eps))
                .collect::<Result<_>>()?;
            res.basis = Some(basis);
        }
        EnhanceMethod::Sparse { lambda } => {
            let dcfg = DictionaryConfig {
                lambda,
                epochs: opts.dictionary_epochs,
                batch: opts.dictionary_batch,
                ..DictionaryConfig::for_classes(m.class_count(), opts.seed ^ class as u64)
            };
            let dict = learn_dictionary(fit, &dcfg)?.dictionary;
            let mut fallbacks = 0usize;
            for (j, z) in cols.iter().enumerate() {
                let code = sparse_code(
                    z.probs(),
                    &dict,
                    lambda,
                    dcfg.lasso_tol,
                    dcfg.lasso_max_iter,
                )?;
                match sparse_reconstruct(&code, &dict) {
                    Ok(p) => res.enhanced[j] = p,
                    Err(Error::DegenerateReconstruction(_)) => fallbacks += 1,
                    Err(e) => return Err(e),
                }
            }
            if fallbacks > 0 {
                res.warnings.push(format!(
                    "class {class}: {fallbacks} frame(s) had degenerate sparse reconstructions, kept raw"
                ));
            }
            res.dictionary = Some(dict);
        }
    }
    let after = SenoneMatrix::from_posteriors(class, &res.enhanced, res.frames.clone())?;
    res.rank = Some(ClassRank {
        class,
        frames: m.len(),
        rank_before,
        rank_after: log_domain_rank(&after, opts.eps, RANK_FRACTION)?,
        kept,
    });
    Ok(res)
}

/// Supervised enhancement with per-class models, plus the fitted models.
pub fn supervised_enhance_with_models(
    posteriors: &[PosteriorVector],
    labels: &Alignment,
    method: EnhanceMethod,
    opts: &EnhanceOptions,
) -> Result<(EnhancedTargets, ClassModels)> {
    // models are fitted on at most `class_cap` frames; every frame is enhanced
    let groups = group_by_class(posteriors, labels, usize::MAX, opts.seed)?;
    let fitted = group_by_class(posteriors, labels, opts.class_cap, opts.seed)?;
    let results: Vec<ClassResult> = groups
        .par_iter()
        .map(|(c, m)| enhance_class(m, &fitted[c], method, opts))
        .collect::<Result<_>>()?;
    let mut enhanced: Vec<Option<PosteriorVector>> = vec![None; posteriors.len()];
    let mut ranks = Vec::new();
    let mut warnings = Vec::new();
    let mut models = ClassModels::default();
    for r in results {
        for (t, p) in r.frames.iter().zip(r.enhanced) {
            enhanced[*t] = Some(p);
        }
        ranks.extend(r.rank);
        warnings.extend(r.warnings);
        models.bases.extend(r.basis);
        models.dictionaries.extend(r.dictionary);
    }
    let enhanced: Vec<PosteriorVector> = enhanced
        .into_iter()
        .map(|p| p.expect("grouping covers every frame"))
        .collect();
    let targets = enhanced
        .iter()
        .map(|p| quantize_store(p, opts.decimals))
        .collect::<Result<_>>()?;
    Ok((
        EnhancedTargets {
            targets,
            enhanced,
            ranks,
            warnings,
        },
        models,
    ))
}

/// Groups posteriors by label, enhances each class with its own model and
/// quantizes. Method `None` returns the quantized inputs.
pub fn supervised_enhance(
    posteriors: &[PosteriorVector],
    labels: &Alignment,
    method: EnhanceMethod,
    opts: &EnhanceOptions,
) -> Result<EnhancedTargets> {
    supervised_enhance_with_models(posteriors, labels, method, opts).map(|(t, _)| t)
}

/// Quantized forward-pass outputs on unlabeled frames.
pub fn forward_pass_targets(
    model: &MlpModel,
    features: &[FeatureVector],
    decimals: u32,
) -> Result<Vec<PosteriorVector>> {
    if let Some(x) = features.iter().find(|x| x.len() != model.input_dim()) {
        return invalid(format!(
            "forward_pass_targets: feature dim {} vs model input {}",
            x.len(),
            model.input_dim()
        ));
    }
    features
        .par_iter()
        .map(|x| quantize_store(&forward(model, x)?, decimals))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub source: DataSource,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub key: String,
    pub spec: SystemSpec,
    pub seed: u64,
    pub sources: Vec<SourceReport>,
    pub train_frames: usize,
    pub holdout_frames: usize,
    pub test_accuracy: f64,
    pub dev_accuracy: f64,
    pub final_train_loss: Option<f64>,
    pub final_holdout_loss: Option<f64>,
    /// Per-class ranks of this system's supervised-enhancement source.
    pub class_ranks: Vec<ClassRank>,
    pub mean_rank_before: Option<f64>,
    pub mean_rank_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementDefaults {
    pub sigma: f64,
    pub lambda: f64,
    pub decimals: u32,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub system_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub defaults: EnhancementDefaults,
    pub master_seed: u64,
    pub oracle_accuracy: f64,
    pub systems: Vec<SystemReport>,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl RunReport {
    pub fn system(&self, key: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.key == key)
    }

    /// Pretty JSON of everything but the wall times.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table: one row per system id, one column per method,
    /// test frame accuracy in percent.
    pub fn table(&self) -> String {
        let mut rows: BTreeMap<u32, (String, BTreeMap<Enhancement, f64>)> = BTreeMap::new();
        for s in &self.systems {
            let entry = rows
                .entry(s.spec.id)
                .or_insert_with(|| (describe_sources(&s.spec), BTreeMap::new()));
            entry.1.insert(s.spec.enhancement, s.test_accuracy);
        }
        let data_w = rows
            .values()
            .map(|(d, _)| d.len())
            .max()
            .unwrap_or(0)
            .max(13);
        let pca_head = format!("PCA(σ={})", self.defaults.sigma * 100.0);
        let sp_head = format!("Sparsity(λ={})", self.defaults.lambda);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} | {:<data_w$} | {:>12} | {:>14} | {:>12} | {:>12}",
            "System #", "Training Data", pca_head, sp_head, "Non-Enhanced", "Hard Targets"
        );
        let _ = writeln!(out, "{}", "-".repeat(8 + data_w + 12 + 14 + 12 + 12 + 15));
        let cell = |v: Option<&f64>| v.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        for (id, (data, acc)) in &rows {
            let hard = if *id == 0 {
                acc.get(&Enhancement::None)
            } else {
                None
            };
            let none = if *id == 0 {
                None
            } else {
                acc.get(&Enhancement::None)
            };
            let _ = writeln!(
                out,
                "{:<8} | {:<data_w$} | {:>12} | {:>14} | {:>12} | {:>12}",
                id,
                data,
                cell(acc.get(&Enhancement::Pca)),
                cell(acc.get(&Enhancement::Sparse)),
                cell(none),
                cell(hard)
            );
        }
        let _ = writeln!(
            out,
            "frame accuracy (%) on the test split; generative oracle {:.2}",
            100.0 * self.oracle_accuracy
        );
        out
    }
}

fn system_number(key: &str) -> &str {
    key.split('-').next().unwrap_or(key)
}

fn describe_sources(spec: &SystemSpec) -> String {
    if spec.id == 0 {
        return "AMI-like(hard)".into();
    }
    spec.data_sources
        .iter()
        .map(|s| match s {
            DataSource::AmiLike { from } => format!("AMI-like(SE-{})", system_number(from)),
            DataSource::PoolForwardPass { pool, from } => {
                format!("{}(FP-{})", pool.table_name(), system_number(from))
            }
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

struct Executed {
    id: u32,
    model: MlpModel,
    train_posteriors: Option<Vec<PosteriorVector>>,
}

/// Runs the systems in order. Each trains from a fresh initialization on the
/// concatenation of its sources' targets.
pub fn run_ladder(
    corpus: &Corpus,
    specs: &[SystemSpec],
    cfg: &PipelineConfig,
) -> Result<RunReport> {
    let started = Instant::now();
    if specs.is_empty() {
        return invalid("run_ladder: no systems");
    }
    // validate the whole ladder before any training
    let mut seen: BTreeMap<String, u32> = BTreeMap::new();
    for s in specs {
        s.validate()?;
        for src in &s.data_sources {
            match seen.get(src.from_key()) {
                None => {
                    return invalid(format!(
                        "system {} references {:?}, which has not run before it",
                        s.key(),
                        src.from_key()
                    ))
                }
                Some(id) if *id >= s.id => {
                    return invalid(format!(
                        "system {} references {:?}, which is not lower-numbered",
                        s.key(),
                        src.from_key()
                    ))
                }
                _ => {}
            }
        }
        if seen.insert(s.key(), s.id).is_some() {
            return invalid(format!("system {} appears twice", s.key()));
        }
    }

    let data = StackedCorpus::new(corpus, cfg.context)?;
    let mut executed: BTreeMap<String, Executed> = BTreeMap::new();
    let mut se_cache: BTreeMap<(String, String), EnhancedTargets> = BTreeMap::new();
    let mut fp_cache: BTreeMap<(Pool, String), Vec<PosteriorVector>> = BTreeMap::new();
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    let mut system_seconds = BTreeMap::new();

    for spec in specs {
        let t0 = Instant::now();
        let key = spec.key();
        let seed = cfg.system_seed(spec.id);
        let sizes = cfg.layer_sizes(data.input_dim(), data.class_count);
        let init = init_mlp(&sizes, seed)?;

        let mut class_ranks = Vec::new();
        let mut sources = Vec::new();
        let outcome = if spec.id == 0 {
            sources.push(SourceReport {
                source: DataSource::AmiLike {
                    from: "labels".into(),
                },
                frames: data.train.len(),
            });
            train_hard(&init, &data.train, &data.train_labels, &cfg.train_config(0))?
        } else {
            let mut feats: Vec<FeatureVector> = Vec::new();
            let mut targets: Vec<PosteriorVector> = Vec::new();
            for src in &spec.data_sources {
                match src {
                    DataSource::AmiLike { from } => {
                        let method = EnhanceMethod::of(spec);
                        let cache_key = (from.clone(), method.label());
                        if !se_cache.contains_key(&cache_key) {
                            let teacher = executed.get_mut(from).expect("validated reference");
                            if teacher.train_posteriors.is_none() {
                                teacher.train_posteriors =
                                    Some(posteriors(&teacher.model, &data.train)?);
                            }
                            let post = teacher.train_posteriors.as_ref().expect("just filled");
                            let opts =
                                EnhanceOptions::from_pipeline(cfg, cfg.system_seed(teacher.id));
                            let enhanced =
                                supervised_enhance(post, &data.train_labels, method, &opts)?;
                            warnings.extend(
                                enhanced
                                    .warnings
                                    .iter()
                                    .map(|w| format!("SE of {from} ({}): {w}", method.label())),
                            );
                            se_cache.insert(cache_key.clone(), enhanced);
                        }
                        let enhanced = &se_cache[&cache_key];
                        if class_ranks.is_empty() {
                            class_ranks = enhanced.ranks.clone();
                        }
                        feats.extend_from_slice(&data.train);
                        targets.extend_from_slice(&enhanced.targets);
                        sources.push(SourceReport {
                            source: src.clone(),
                            frames: data.train.len(),
                        });
                    }
                    DataSource::PoolForwardPass { pool, from } => {
                        let cache_key = (*pool, from.clone());
                        if !fp_cache.contains_key(&cache_key) {
                            let teacher = &executed[from];
                            let t = forward_pass_targets(
                                &teacher.model,
                                data.pool(*pool),
                                cfg.decimals,
                            )?;
                            fp_cache.insert(cache_key.clone(), t);
                        }
                        let pool_targets = &fp_cache[&cache_key];
                        feats.extend_from_slice(data.pool(*pool));
                        targets.extend_from_slice(pool_targets);
                        sources.push(SourceReport {
                            source: src.clone(),
                            frames: pool_targets.len(),
                        });
                    }
                }
            }
            train(&init, &feats, &targets, &cfg.train_config(spec.id))?
        };

        let mean = |f: fn(&ClassRank) -> usize| -> Option<f64> {
            if class_ranks.is_empty() {
                None
            } else {
                Some(
                    class_ranks.iter().map(|r| f(r) as f64).sum::<f64>() / class_ranks.len() as f64,
                )
            }
        };
        reports.push(SystemReport {
            key: key.clone(),
            spec: spec.clone(),
            seed,
            sources,
            train_frames: outcome.train_frames,
            holdout_frames: outcome.holdout_frames,
            test_accuracy: frame_accuracy(&outcome.model, &data.test, &data.test_labels)?,
            dev_accuracy: if data.dev.is_empty() {
                0.0
            } else {
                frame_accuracy(&outcome.model, &data.dev, &data.dev_labels)?
            },
            final_train_loss: outcome.loss_history.last().copied(),
            final_holdout_loss: outcome.holdout_loss_history.last().copied(),
            mean_rank_before: mean(|r| r.rank_before),
            mean_rank_after: mean(|r| r.rank_after),
            class_ranks,
        });
        executed.insert(
            key.clone(),
            Executed {
                id: spec.id,
                model: outcome.model,
                train_posteriors: None,
            },
        );
        system_seconds.insert(key, t0.elapsed().as_secs_f64());
    }

    Ok(RunReport {
        corpus: corpus.config.clone(),
        pipeline: cfg.clone(),
        defaults: EnhancementDefaults {
            sigma: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            decimals: cfg.decimals,
            eps: cfg.eps,
        },
        master_seed: cfg.master_seed,
        oracle_accuracy: oracle_bayes_accuracy(corpus)?,
        systems: reports,
        warnings,
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            system_seconds,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenposterior::softmax;
    use crate::posterior::SUM_TOLERANCE;
    use crate::rng::seeded;
    use crate::synth::generate;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_corpus(seed: u64, noise: f64) -> Corpus {
        generate(&CorpusConfig {
            classes: 5,
            feature_dim: 6,
            subspace_dim: 1,
            noise_level: noise,
            frames_train: 600,
            frames_dev: 100,
            frames_test: 300,
            frames_untranscribed: 200,
            centroid_spread: 1.5,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn small_cfg(seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            hidden_layers: vec![16],
            master_seed: seed,
            dictionary_epochs: 3,
            ..PipelineConfig::default()
        };
        cfg.train.epochs = 8;
        cfg
    }

    fn assert_valid(ps: &[PosteriorVector]) {
        for p in ps {
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
            assert!(p.probs().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn system0_nears_oracle_without_noise() {
        let corpus = small_corpus(1, 0.0);
        let data = StackedCorpus::new(&corpus, 3).unwrap();
        let cfg = small_cfg(4);
        let (outcome, post) = run_system0(&data, &cfg).unwrap();
        assert_eq!(post.len(), corpus.train.len());
        let acc = frame_accuracy(&outcome.model, &data.test, &data.test_labels).unwrap();
        let oracle = oracle_bayes_accuracy(&corpus).unwrap();
        assert!(acc >= 0.95 * oracle, "accuracy {acc} vs oracle {oracle}");
        let (again, post2) = run_system0(&data, &cfg).unwrap();
        assert_eq!(again.model, outcome.model);
        assert_eq!(post, post2);
    }

    #[test]
    fn no_enhancement_is_quantization() {
        let corpus = small_corpus(2, 1.0);
        let data = StackedCorpus::new(&corpus, 3).unwrap();
        let (_, post) = run_system0(&data, &small_cfg(2)).unwrap();
        let out = supervised_enhance(
            &post,
            &data.train_labels,
            EnhanceMethod::None,
            &EnhanceOptions::default(),
        )
        .unwrap();
        for (t, p) in out.targets.iter().zip(&post) {
            assert_eq!(t, &quantize_store(p, DEFAULT_DECIMALS).unwrap());
        }
        assert!(out.ranks.is_empty());
        for method in [
            EnhanceMethod::Pca { sigma: 0.8 },
            EnhanceMethod::Sparse { lambda: 0.1 },
        ] {
            let out = supervised_enhance(
                &post,
                &data.train_labels,
                method,
                &EnhanceOptions::default(),
            )
            .unwrap();
            assert_eq!(out.targets.len(), post.len());
            assert_valid(&out.targets);
            assert_valid(&out.enhanced);
            assert_eq!(out.ranks.len(), 5);
        }
    }

    #[test]
    fn rank_one_class_keeps_one_eigenposterior() {
        let k = 6;
        let mut rng = seeded(8, 0);
        let base: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let dir: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let post: Vec<PosteriorVector> = (0..40)
            .map(|_| {
                let t: f64 = rng.sample(StandardNormal);
                softmax(
                    &base
                        .iter()
                        .zip(&dir)
                        .map(|(b, d)| b + t * d)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let labels = Alignment::new(vec![2; 40], k).unwrap();
        let out = supervised_enhance(
            &post,
            &labels,
            EnhanceMethod::Pca { sigma: 0.8 },
            &EnhanceOptions::default(),
        )
        .unwrap();
        assert_eq!(out.ranks.len(), 1);
        assert_eq!(out.ranks[0].kept, Some(1));
        assert_eq!(out.ranks[0].rank_before, 1);
    }

    #[test]
    fn singleton_class_passes_through_with_warning() {
        let post = vec![
            PosteriorVector::new(vec![0.7, 0.2, 0.1]).unwrap(),
            PosteriorVector::new(vec![0.6, 0.3, 0.1]).unwrap(),
            PosteriorVector::new(vec![0.5, 0.1, 0.4]).unwrap(),
            PosteriorVector::new(vec![0.123, 0.456, 0.421]).unwrap(),
        ];
        let labels = Alignment::new(vec![0, 0, 0, 1], 3).unwrap();
        for method in [
            EnhanceMethod::Pca { sigma: 0.8 },
            EnhanceMethod::Sparse { lambda: 0.1 },
        ] {
            let out =
                supervised_enhance(&post, &labels, method, &EnhanceOptions::default()).unwrap();
            assert_eq!(out.targets[3], quantize_store(&post[3], 2).unwrap());
            assert_eq!(out.warnings.len(), 1, "{:?}", out.warnings);
            assert!(out.warnings[0].contains("class 1"));
        }
    }

    #[test]
    fn forward_pass_targets_compose_forward_and_quantize() {
        let corpus = small_corpus(3, 1.0);
        let data = StackedCorpus::new(&corpus, 3).unwrap();
        let model = init_mlp(&[data.input_dim(), 7, 5], 11).unwrap();
        let t = forward_pass_targets(&model, &data.pool_shifted, 2).unwrap();
        assert_eq!(t.len(), data.pool_shifted.len());
        assert_eq!(
            t,
            forward_pass_targets(&model, &data.pool_shifted, 2).unwrap()
        );
        for (x, got) in data.pool_shifted.iter().zip(&t) {
            assert_eq!(
                got,
                &quantize_store(&forward(&model, x).unwrap(), 2).unwrap()
            );
        }
        let wrong = vec![FeatureVector::new(vec![0.0; 4]).unwrap()];
        assert!(matches!(
            forward_pass_targets(&model, &wrong, 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn baseline_only_ladder_has_one_entry() {
        let corpus = small_corpus(4, 1.0);
        let r = run_ladder(&corpus, &[SystemSpec::baseline()], &small_cfg(1)).unwrap();
        assert_eq!(r.systems.len(), 1);
        assert_eq!(r.systems[0].key, "0");
        assert_eq!((r.defaults.sigma, r.defaults.lambda), (0.8, 0.1));
        assert!(r.table().contains("AMI-like(hard)"));
    }

    #[test]
    fn ladder_rejects_bad_references() {
        let corpus = small_corpus(4, 1.0);
        let cfg = small_cfg(1);
        let forward_ref = vec![
            SystemSpec::baseline(),
            SystemSpec::new(1, Enhancement::Pca, vec![ami("2-pca")]),
        ];
        assert!(matches!(
            run_ladder(&corpus, &forward_ref, &cfg),
            Err(Error::InvalidInput(_))
        ));
        let same_level = vec![
            SystemSpec::baseline(),
            SystemSpec::new(1, Enhancement::Pca, vec![ami("0")]),
            SystemSpec::new(
                1,
                Enhancement::Sparse,
                vec![fp(Pool::IcsiLike, "1-pca".into())],
            ),
        ];
        assert!(matches!(
            run_ladder(&corpus, &same_level, &cfg),
            Err(Error::InvalidInput(_))
        ));
        let hard_with_sources = vec![SystemSpec {
            data_sources: vec![ami("0")],
            ..SystemSpec::baseline()
        }];
        assert!(run_ladder(&corpus, &hard_with_sources, &cfg).is_err());
        assert!(run_ladder(&corpus, &[], &cfg).is_err());
    }

    #[test]
    fn ladder_accounts_frames_and_reproduces() {
        let corpus = small_corpus(5, 1.0);
        let cfg = small_cfg(9);
        let specs = vec![
            SystemSpec::baseline(),
            SystemSpec::new(1, Enhancement::Pca, vec![ami("0")]),
            SystemSpec::new(
                2,
                Enhancement::Pca,
                vec![fp(Pool::LibLike, "1-pca".into()), ami("0")],
            ),
        ];
        let a = run_ladder(&corpus, &specs, &cfg).unwrap();
        let b = run_ladder(&corpus, &specs, &cfg).unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
        for s in &a.systems {
            let total: usize = s.sources.iter().map(|src| src.frames).sum();
            assert_eq!(s.train_frames + s.holdout_frames, total);
            assert_eq!(s.holdout_frames, cfg.train.holdout_size(total));
        }
        assert_eq!(a.system("2-pca").unwrap().sources[0].frames, 200);
        let s1 = a.system("1-pca").unwrap();
        assert_eq!(s1.seed, 9 ^ 1);
        assert!(s1
            .class_ranks
            .iter()
            .all(|r| r.rank_after <= r.kept.unwrap()));
        assert!(a.timing.system_seconds.contains_key("2-pca"));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let specs = full_ladder(&[Enhancement::Pca, Enhancement::Sparse]);
        let json = serde_json::to_string(&specs).unwrap();
        assert!(json.contains(r#""kind":"pool_forward_pass","pool":"icsi-like","from":"1-pca""#));
        let back: Vec<SystemSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, specs);
        let minimal: SystemSpec =
            serde_json::from_str(r#"{"id": 1, "enhancement": "sparse", "data_sources": [{"kind": "ami_like", "from": "0"}]}"#)
                .unwrap();
        assert_eq!((minimal.sigma, minimal.lambda), (0.8, 0.1));
    }
}
