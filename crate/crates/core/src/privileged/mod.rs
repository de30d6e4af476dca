//! Privileged channels for a reduced dataset: feature labels, attention
//! labels and soft labels, plus the combined training loss that consumes them.

mod loss;
mod metrics;

pub use loss::{
    constant_target, drupi_loss, AlignFn, DrupiLossConfig, LossComponents, LossInputs, LossTerms,
    PoolingRecord, RegTarget,
};
pub use metrics::{
    diversity_discriminability, feature_metrics, kmeans, linear_probe_accuracy, mutual_information,
    FeatureMetrics,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ReducedDataset;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// How a set of several feature labels for one example is consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Regress onto the mean of the set.
    #[default]
    Average,
    /// Regress onto one uniformly drawn member per example per step.
    RandomPick,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Aggregation::Average),
            "random-pick" | "random" => Ok(Aggregation::RandomPick),
            other => Err(Error::invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// `n_feat` feature labels per example, stored as `[M, n_feat, ...shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLabelSet {
    pub labels: Tensor,
    pub mode: Aggregation,
}

impl FeatureLabelSet {
    /// Builds a set from `[M, ...shape]` features with `n_feat = 1`.
    pub fn single(features: Tensor, mode: Aggregation) -> Result<Self> {
        let mut shape = features.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("feature batch needs a leading example axis"));
        }
        shape.insert(1, 1);
        Ok(FeatureLabelSet {
            labels: features.reshape(&shape)?,
            mode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.labels.shape();
        if s.len() < 3 {
            return Err(Error::Dataset(format!(
                "feature labels must be [M, n_feat, ...], got {s:?}"
            )));
        }
        if !self.labels.is_finite() {
            return Err(Error::Dataset("non-finite feature label".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_feat(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Shape of one feature label.
    pub fn feature_shape(&self) -> &[usize] {
        &self.labels.shape()[2..]
    }

    /// Mean over the set, `[M, ...shape]`.
    pub fn mean_labels(&self) -> Tensor {
        let (m, k) = (self.len(), self.n_feat());
        let d: usize = self.feature_shape().iter().product();
        let mut out = vec![0f32; m * d];
        for i in 0..m {
            for j in 0..k {
                let src = &self.labels.data()[(i * k + j) * d..(i * k + j + 1) * d];
                for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f32);
        let mut shape = vec![m];
        shape.extend_from_slice(self.feature_shape());
        Tensor::new(shape, out).expect("shape from valid set")
    }

    /// Member-selection weights `[M, n_feat]` for one step.
    pub fn aggregation_weights(&self, rng: &mut rng::Rng) -> Tensor {
        aggregation_weights(self.len(), self.n_feat(), self.mode, rng)
    }
}

pub fn aggregation_weights(m: usize, k: usize, mode: Aggregation, rng: &mut rng::Rng) -> Tensor {
    use rand::Rng as _;
    let mut w = vec![0f32; m * k];
    for i in 0..m {
        match mode {
            Aggregation::Average => w[i * k..(i + 1) * k].fill(1.0 / k as f32),
            Aggregation::RandomPick => w[i * k + rng.random_range(0..k)] = 1.0,
        }
    }
    Tensor::new(vec![m, k], w).expect("m, k positive")
}

/// Collapses `[M, n_feat, ...]` to `[M, ...]` with per-member weights `[M, n_feat]`.
pub fn aggregate_on_tape(g: &mut Graph, set: Var, weights: &Tensor) -> Result<Var> {
    let s = g.shape(set).to_vec();
    let (m, k) = (s[0], s[1]);
    if weights.shape() != [m, k] {
        return Err(Error::shape(set.id(), "aggregation weights shape"));
    }
    if k == 1 {
        let mut out = vec![m];
        out.extend_from_slice(&s[2..]);
        return g.reshape(set, &out);
    }
    let mut wshape = vec![m, k];
    wshape.extend(std::iter::repeat_n(1, s.len() - 2));
    let w = g.constant(weights.reshape(&wshape)?);
    let weighted = g.mul(set, w)?;
    let mut target = s.clone();
    target[1] = 1;
    let summed = g.sum_to(weighted, &target)?;
    let mut out = vec![m];
    out.extend_from_slice(&s[2..]);
    g.reshape(summed, &out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Mean over channels: `1 x H x W`.
    Spatial,
    /// Mean over positions: `Ch x 1 x 1`.
    Channel,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(AttentionKind::Spatial),
            "channel" => Ok(AttentionKind::Channel),
            other => Err(Error::invalid(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Pooled feature labels `[M, 1, H, W]` or `[M, Ch, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLabels {
    pub kind: AttentionKind,
    pub labels: Tensor,
}

impl AttentionLabels {
    pub fn validate(&self) -> Result<()> {
        let s = self.labels.shape();
        let ok = s.len() == 4
            && match self.kind {
                AttentionKind::Spatial => s[1] == 1,
                AttentionKind::Channel => s[2] == 1 && s[3] == 1,
            };
        if !ok {
            return Err(Error::Dataset(format!(
                "{:?} attention labels with shape {s:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Average-pools `[..., Ch, H, W]` along channels (spatial) or positions (channel).
pub fn pool_attention(f: &Tensor, kind: AttentionKind) -> Result<Tensor> {
    let s = f.shape();
    if s.len() < 3 {
        return Err(Error::invalid(format!(
            "attention pooling needs a [Ch, H, W] feature map, got {s:?}"
        )));
    }
    let r = s.len();
    let (ch, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
    let lead: usize = s[..r - 3].iter().product();
    let mut shape = s.to_vec();
    let mut out;
    match kind {
        AttentionKind::Spatial => {
            shape[r - 3] = 1;
            out = vec![0f64; lead * h * w];
            for n in 0..lead {
                for c in 0..ch {
                    let plane = &f.data()[(n * ch + c) * h * w..(n * ch + c + 1) * h * w];
                    for (o, &v) in out[n * h * w..(n + 1) * h * w].iter_mut().zip(plane) {
                        *o += v as f64;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= ch as f64);
        }
        AttentionKind::Channel => {
            shape[r - 2] = 1;
            shape[r - 1] = 1;
            out = f
                .data()
                .chunks(h * w)
                .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
                .collect();
        }
    }
    Tensor::new(shape, out.into_iter().map(|v| v as f32).collect())
}

/// Tape version of [`pool_attention`] for a batch `[N, Ch, H, W]`.
pub fn pool_attention_on_tape(g: &mut Graph, f: Var, kind: AttentionKind) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(
            f.id(),
            format!("attention pooling needs [N, Ch, H, W], got {s:?}"),
        ));
    }
    let (target, count) = match kind {
        AttentionKind::Spatial => (vec![s[0], 1, s[2], s[3]], s[1]),
        AttentionKind::Channel => (vec![s[0], s[1], 1, 1], s[2] * s[3]),
    };
    let summed = g.sum_to(f, &target)?;
    g.scale(summed, 1.0 / count as f32)
}

/// Direct assignment: `f_i = features of x_i` under `extractor` at `tap`.
pub fn assign_features(
    ds: &ReducedDataset,
    extractor: &ModelState,
    tap: usize,
) -> Result<FeatureLabelSet> {
    let (f, _) = extractor.forward_split(&ds.images, tap)?;
    FeatureLabelSet::single(f, Aggregation::Average)
}

/// Feature-label initialization strategy.
#[derive(Clone, Copy, Debug)]
pub enum FeatureInit<'a> {
    /// `N(0, 0.1^2)` entries.
    Noise,
    /// Features of a weakly trained model.
    WeakModel(&'a ModelState),
}

pub const NOISE_INIT_STD: f32 = 0.1;
pub const REPLICA_JITTER_STD: f32 = 0.01;

/// Initializes `n_feat` labels per example. Weak-model copies get independent
/// `N(0, jitter^2)` perturbations; pass `jitter = 0` for exact copies.
pub fn init_features(
    ds: &ReducedDataset,
    init: FeatureInit<'_>,
    feature_shape: &[usize],
    n_feat: usize,
    jitter: f32,
    mode: Aggregation,
    seed: u64,
) -> Result<FeatureLabelSet> {
    if n_feat == 0 {
        return Err(Error::invalid("n_feat must be at least 1"));
    }
    let m = ds.len();
    let d: usize = feature_shape.iter().product();
    let mut rng = rng::derive(seed, rng::stream::NOISE, 1);
    let mut data = Vec::with_capacity(m * n_feat * d);
    match init {
        FeatureInit::Noise => {
            let normal = Normal::new(0.0f32, NOISE_INIT_STD).expect("valid std");
            data.extend((0..m * n_feat * d).map(|_| normal.sample(&mut rng)));
        }
        FeatureInit::WeakModel(model) => {
            let tap = (1..=model.spec.depth)
                .find(|&t| model.spec.feature_shape(t).ok().as_deref() == Some(feature_shape))
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "weak model has no block with feature shape {feature_shape:?}"
                    ))
                })?;
            let (f, _) = model.forward_split(&ds.images, tap)?;
            let jitter_dist = (jitter > 0.0)
                .then(|| Normal::new(0.0f32, jitter).map_err(|e| Error::invalid(e.to_string())))
                .transpose()?;
            for i in 0..m {
                let base = &f.data()[i * d..(i + 1) * d];
                for _ in 0..n_feat {
                    match &jitter_dist {
                        Some(n) => data.extend(base.iter().map(|&v| v + n.sample(&mut rng))),
                        None => data.extend_from_slice(base),
                    }
                }
            }
        }
    }
    let mut shape = vec![m, n_feat];
    shape.extend_from_slice(feature_shape);
    Ok(FeatureLabelSet {
        labels: Tensor::new(shape, data)?,
        mode,
    })
}

pub const DEFAULT_TEMPERATURE: f32 = 4.0;

/// Row `i` is `softmax(teacher_logits(x_i) / temperature)`.
pub fn soft_labels(ds: &ReducedDataset, teacher: &ModelState, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let z = teacher.logits(&ds.images)?;
    let mut g = Graph::new();
    let zv = g.constant(z);
    let scaled = g.scale(zv, 1.0 / temperature)?;
    let p = g.softmax(scaled)?;
    Ok(g.value(p).clone())
}
