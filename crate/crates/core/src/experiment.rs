//! Config-driven pipeline: load data, select or distill a reduced set,
//! synthesize privileged channels, train with them and evaluate.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coreset::{
    ipc_counts, select_forgetting, select_herding, select_kcenter, select_random, ProxyConfig,
};
use crate::data::{load_idx, make_blobs, per_class_budget, BlobSpec, LabeledDataset, ReducedDataset};
use crate::distill::{run_synthesis, Backend, BiLevelConfig};
use crate::error::{Error, Result};
use crate::hash::stable_hash;
use crate::lupi::{evaluate, gradient_alignment, train_lupi, train_plain, TrainConfig};
use crate::nn::{Family, ModelSpec, ModelState};
use crate::privileged::{
    feature_metrics, init_features, pool_attention, soft_labels, AttentionKind,
    AttentionLabels, DrupiLossConfig, FeatureInit, DEFAULT_TEMPERATURE,
    REPLICA_JITTER_STD,
};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
        /// Test examples per class, drawn from an independent noise stream.
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Random,
    Herding,
    Kcenter,
    Forgetting,
    Dc,
    Dm,
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Random => "random",
            InitMethod::Herding => "herding",
            InitMethod::Kcenter => "kcenter",
            InitMethod::Forgetting => "forgetting",
            InitMethod::Dc => "dc",
            InitMethod::Dm => "dm",
        }
    }

    fn is_distillation(self) -> bool {
        matches!(self, InitMethod::Dc | InitMethod::Dm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub init: InitMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
}

/// Where initial feature labels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Features of the fully trained teacher.
    Assign,
    /// Features of a model trained for one epoch.
    WeakModel,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivilegedConfig {
    #[serde(default = "one")]
    pub n_feat: usize,
    /// Block whose features are supervised; defaults to the last block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionKind>,
    #[serde(default = "default_source")]
    pub feature_init: FeatureSource,
    /// Refine the privileged channel by matching.
    #[serde(default = "yes")]
    pub synthesize: bool,
    #[serde(default)]
    pub soft_labels: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_jitter")]
    pub jitter: f32,
    /// Model whose gradients are compared in the alignment diagnostic.
    #[serde(default)]
    pub probe: Probe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Probe {
    /// The one-epoch model that also seeds the feature labels.
    #[default]
    Weak,
    Teacher,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_source() -> FeatureSource {
    FeatureSource::WeakModel
}

fn default_temperature() -> f32 {
    DEFAULT_TEMPERATURE
}

fn default_jitter() -> f32 {
    REPLICA_JITTER_STD
}

impl Default for PrivilegedConfig {
    fn default() -> Self {
        PrivilegedConfig {
            n_feat: 1,
            tap: None,
            attention: None,
            feature_init: default_source(),
            synthesize: true,
            soft_labels: false,
            temperature: DEFAULT_TEMPERATURE,
            jitter: REPLICA_JITTER_STD,
            probe: Probe::Weak,
        }
    }
}

/// Recipe for the teacher (full-data model) and the weak one-epoch model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 10,
            lr: 0.05,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub reduction: ReductionConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub privileged: PrivilegedConfig,
    #[serde(default)]
    pub loss: DrupiLossConfig,
    #[serde(default)]
    pub synthesis: BiLevelConfig,
    /// Whether synthesis also refines the images; defaults to true.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_images: Option<bool>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub proxy: ProxyConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        match (self.reduction.ipc, self.reduction.fraction) {
            (Some(0), _) => return Err(Error::config("reduction.ipc", "must be >= 1")),
            (Some(_), None) => {}
            (None, Some(f)) if f > 0.0 && f <= 1.0 => {}
            (None, Some(f)) => {
                return Err(Error::config("reduction.fraction", format!("{f} outside (0, 1]")))
            }
            _ => {
                return Err(Error::config(
                    "reduction",
                    "exactly one of `ipc` and `fraction` must be set",
                ))
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.privileged.n_feat == 0 {
            return Err(Error::config("privileged.n_feat", "must be >= 1"));
        }
        if !(self.privileged.temperature > 0.0) {
            return Err(Error::config("privileged.temperature", "must be > 0"));
        }
        if !(self.privileged.jitter >= 0.0) {
            return Err(Error::config("privileged.jitter", "must be >= 0"));
        }
        if self.teacher.epochs == 0 || !(self.teacher.lr > 0.0) {
            return Err(Error::config("teacher", "epochs and lr must be positive"));
        }
        self.loss.validate()?;
        self.synthesis.validate()?;
        if !(self.train.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        let spec = self.spec(self.input_hint(), self.classes_hint())?;
        let tap = self.tap();
        spec.feature_shape(tap)
            .map_err(|e| Error::config("privileged.tap", e.to_string()))?;
        if self.privileged.attention.is_some() && spec.family == Family::Mlp {
            return Err(Error::config("privileged.attention", "needs a convolutional model"));
        }
        if let DatasetConfig::Blobs { spec, test_per_class, .. } = &self.dataset {
            spec.validate().map_err(|e| Error::config("dataset", e.to_string()))?;
            if *test_per_class == 0 {
                return Err(Error::config("dataset.test_per_class", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// Resolved supervised block.
    pub fn tap(&self) -> usize {
        self.privileged.tap.unwrap_or(self.model.depth)
    }

    fn input_hint(&self) -> [usize; 3] {
        match &self.dataset {
            DatasetConfig::Blobs { spec, .. } => [spec.channels, spec.size, spec.size],
            // checked against the files once loaded
            DatasetConfig::Idx { .. } => [1, 1 << self.model.depth, 1 << self.model.depth],
        }
    }

    fn classes_hint(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { spec, .. } => spec.classes,
            DatasetConfig::Idx { .. } => 2,
        }
    }

    pub fn spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        let s = ModelSpec {
            family: self.model.family,
            depth: self.model.depth,
            width: self.model.width,
            input,
            classes,
        };
        s.validate().map_err(|e| Error::config("model", e.to_string()))?;
        Ok(s)
    }

    pub fn update_images(&self) -> bool {
        self.update_images.unwrap_or(true)
    }

    /// Digest of the logical config; the output directory is excluded.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        stable_hash(&c)
    }
}

/// Seed-independent inputs shared by all runs of a config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub spec: ModelSpec,
    pub teacher: ModelState,
    pub weak: ModelState,
}

pub fn load_data(cfg: &DatasetConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg {
        DatasetConfig::Blobs { spec, test_per_class, seed } => {
            let train = make_blobs(spec, *seed)?;
            let test_spec = BlobSpec { per_class: *test_per_class, ..spec.clone() };
            let test = make_blobs(&test_spec, rng::derive_seed(*seed, "test-split", 0))?;
            Ok((train, test))
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.exists() {
                    return Err(Error::config("dataset", format!("{} does not exist", p.display())));
                }
            }
            let train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            test.classes = train.classes.max(test.classes);
            let mut train = train;
            train.classes = test.classes;
            Ok((train, test))
        }
    }
}

fn train_epochs(ds: &LabeledDataset, spec: &ModelSpec, t: &TeacherConfig, epochs: usize) -> Result<ModelState> {
    let cfg = TrainConfig { epochs, lr: t.lr, batch: t.batch, allow_aligner: false };
    train_plain(ds, spec, &cfg, rng::derive_seed(t.seed, "teacher", 0))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.dataset)?;
    train.validate_training()?;
    let spec = cfg.spec(train.input_shape(), train.classes)?;
    let teacher = train_epochs(&train, &spec, &cfg.teacher, cfg.teacher.epochs)?;
    let weak = train_epochs(&train, &spec, &cfg.teacher, 1)?;
    Ok(Prepared { train, test, spec, teacher, weak })
}

fn embeddings(model: &ModelState, ds: &LabeledDataset) -> Result<crate::tensor::Tensor> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(512) {
        let (f, _) = model.forward_split(&ds.images.select_axis0(chunk)?, model.spec.depth)?;
        parts.extend(f.data().iter().copied());
    }
    let d = parts.len() / ds.len();
    crate::tensor::Tensor::new(vec![ds.len(), d], parts)
}

/// Selected (or distilled) images and labels, before privileged channels.
pub fn initial_subset(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<ReducedDataset> {
    let train = &prep.train;
    let counts = match (cfg.reduction.ipc, cfg.reduction.fraction) {
        (Some(ipc), _) => ipc_counts(ipc, train.classes),
        (None, Some(f)) => per_class_budget(f, train.len(), train.classes)?,
        _ => unreachable!("validated"),
    };
    let idx = match cfg.reduction.init {
        InitMethod::Random | InitMethod::Dc | InitMethod::Dm => select_random(&train.labels, &counts, seed)?,
        InitMethod::Herding => select_herding(&embeddings(&prep.teacher, train)?, &train.labels, &counts)?,
        InitMethod::Kcenter => select_kcenter(&embeddings(&prep.teacher, train)?, &train.labels, &counts)?,
        InitMethod::Forgetting => select_forgetting(train, &counts, &cfg.proxy, seed)?,
    };
    let mut ds = ReducedDataset::from_labeled(&train.subset(&idx)?);
    if cfg.reduction.init.is_distillation() {
        let backend = if cfg.reduction.init == InitMethod::Dm { Backend::Dm } else { Backend::Dc };
        let bl = BiLevelConfig { backend, update_images: true, ..cfg.synthesis.clone() };
        let images_seed = rng::derive_seed(seed, "image-distillation", 0);
        ds = run_synthesis(train, &ds, &prep.spec, prep.spec.depth, &DrupiLossConfig::none(), &bl, images_seed)?
            .dataset;
    }
    Ok(ds)
}

/// Full reduced dataset with the configured privileged channels.
pub fn build_reduced(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<ReducedDataset> {
    let mut ds = initial_subset(cfg, prep, seed)?;
    let p = &cfg.privileged;
    let tap = cfg.tap();
    let loss = cfg.loss.for_tap(tap, prep.spec.depth);
    if p.soft_labels {
        ds.soft_labels = Some(soft_labels(&ds, &prep.teacher, p.temperature)?);
    }
    if loss.uses_features() {
        let fshape = prep.spec.feature_shape(tap)?;
        let init_seed = rng::derive_seed(seed, rng::stream::INIT, 1);
        let set = match p.feature_init {
            FeatureSource::Assign => init_features(
                &ds,
                FeatureInit::WeakModel(&prep.teacher),
                &fshape,
                p.n_feat,
                if p.n_feat > 1 { p.jitter } else { 0.0 },
                loss.aggregation,
                init_seed,
            )?,
            FeatureSource::WeakModel => init_features(
                &ds,
                FeatureInit::WeakModel(&prep.weak),
                &fshape,
                p.n_feat,
                if p.n_feat > 1 { p.jitter } else { 0.0 },
                loss.aggregation,
                init_seed,
            )?,
            FeatureSource::Noise => init_features(
                &ds,
                FeatureInit::Noise,
                &fshape,
                p.n_feat,
                0.0,
                loss.aggregation,
                init_seed,
            )?,
        };
        match p.attention {
            None => ds.features = Some(set),
            Some(kind) => {
                ds.attention = Some(AttentionLabels { kind, labels: pool_attention(&set.mean_labels(), kind)? });
            }
        }
        if p.synthesize {
            let bl = BiLevelConfig { update_images: cfg.update_images(), ..cfg.synthesis.clone() };
            let syn_seed = rng::derive_seed(seed, "feature-synthesis", 0);
            ds = run_synthesis(&prep.train, &ds, &prep.spec, tap, &loss, &bl, syn_seed)?.dataset;
        }
    }
    ds.provenance.backend = cfg.synthesis.backend.name().into();
    ds.provenance.config_hash = cfg.config_hash()?;
    ds.provenance.seed = seed;
    Ok(ds)
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub grad_cosine: f64,
    pub grad_cosine_without: f64,
    pub diversity: f64,
    pub discriminability: f64,
    pub dataset: ReducedDataset,
    pub trace: Vec<crate::privileged::LossComponents>,
}

/// Feature rows used by the diversity/discriminability metrics.
pub fn privileged_rows(ds: &ReducedDataset) -> Option<crate::tensor::Tensor> {
    match (&ds.features, &ds.attention) {
        (Some(f), _) => Some(f.mean_labels()),
        (None, Some(a)) => Some(a.labels.clone()),
        _ => None,
    }
}

pub fn run_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<SeedResult> {
    let ds = build_reduced(cfg, prep, seed)?;
    evaluate_reduced(cfg, prep, ds, seed)
}

/// Trains on an already built reduced set and collects every metric.
pub fn evaluate_reduced(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    ds: ReducedDataset,
    seed: u64,
) -> Result<SeedResult> {
    let tap = cfg.tap();
    let probe = match cfg.privileged.probe {
        Probe::Weak => &prep.weak,
        Probe::Teacher => &prep.teacher,
    };
    let eval_seed = rng::derive_seed(seed, "evaluation", 0);
    let trained = train_lupi(&ds, &prep.spec, tap, &cfg.loss, &cfg.train, eval_seed)?;
    let accuracy = evaluate(&trained.model, &prep.test)?;
    let (grad_cosine, grad_cosine_without) = if cfg.loss.uses_features() || cfg.loss.lambda_soft > 0.0 {
        let a = gradient_alignment(&ds, &prep.train, probe, tap, &cfg.loss)?;
        (a.with_pi, a.without_pi)
    } else {
        let a = gradient_alignment(&ds, &prep.train, probe, tap, &DrupiLossConfig::none())?;
        (a.without_pi, a.without_pi)
    };
    let (diversity, discriminability) = match privileged_rows(&ds) {
        Some(rows) if has_metric_support(&ds.labels, ds.classes) => {
            let m = feature_metrics(&rows, &ds.labels, ds.classes, seed)?;
            (m.diversity, m.discriminability)
        }
        _ => (f64::NAN, f64::NAN),
    };
    Ok(SeedResult {
        seed,
        accuracy,
        grad_cosine,
        grad_cosine_without,
        diversity,
        discriminability,
        trace: trained.trace,
        dataset: ds,
    })
}

fn has_metric_support(labels: &[usize], classes: usize) -> bool {
    let mut c = vec![0usize; classes];
    labels.iter().for_each(|&y| c[y] += 1);
    classes >= 2 && c.iter().all(|&n| n >= 2)
}

/// Applies `f` to every seed, concurrently when the `parallel` feature is on.
pub fn for_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}
