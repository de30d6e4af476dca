//! Synthesis of a reduced dataset's images and privileged channels.
//!
//! Two matching backends are provided. Gradient matching (`Dc`) compares the
//! parameter gradient of the reduced set under the combined loss with the
//! cross-entropy gradient of real data, per class, and descends the distance
//! through a second-order backward pass. Distribution matching (`Dm`)
//! compares mean embeddings under a randomly initialized network and needs
//! first-order gradients only.

use serde::{Deserialize, Serialize};

use crate::data::{class_batch, LabeledDataset, Provenance, ReducedDataset};
use crate::error::{Error, Result};
use crate::hash::stable_hash;
use crate::nn::{init_model, named_grads, sgd_step, ModelSpec, ModelState, Params};
use crate::privileged::{
    aggregate_on_tape, aggregation_weights, drupi_loss, pool_attention_on_tape, DrupiLossConfig,
    LossInputs, RegTarget,
};
use crate::rng::{self, Rng};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Dc,
    Dm,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Dc => "dc",
            Backend::Dm => "dm",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc" => Ok(Backend::Dc),
            "dm" => Ok(Backend::Dm),
            other => Err(Error::invalid(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiLevelConfig {
    /// Outer iterations `K`, each with a freshly initialized network.
    pub outer_steps: usize,
    /// Matching steps per outer iteration (DC only).
    pub match_rounds: usize,
    /// Network SGD steps `T` after each matching step (DC only).
    pub inner_steps: usize,
    pub model_lr: f32,
    /// Step size for the privileged channel.
    pub data_lr: f32,
    /// Step size for images. Pixel gradients are far larger than channel
    /// gradients, so they get their own rate.
    #[serde(default = "default_image_lr")]
    pub image_lr: f32,
    /// Real examples per class per matching step.
    pub batch_real: usize,
    /// Reduced examples per class per matching step; 0 takes the whole class.
    pub batch_syn: usize,
    pub backend: Backend,
    pub update_images: bool,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        BiLevelConfig {
            outer_steps: 20,
            match_rounds: 1,
            inner_steps: 10,
            model_lr: 0.01,
            data_lr: 0.1,
            image_lr: default_image_lr(),
            batch_real: 64,
            batch_syn: 0,
            backend: Backend::Dc,
            update_images: false,
        }
    }
}

fn default_image_lr() -> f32 {
    0.01
}

impl BiLevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be >= 1"));
        }
        if self.match_rounds == 0 {
            return Err(Error::config("match_rounds", "must be >= 1"));
        }
        if self.batch_real == 0 {
            return Err(Error::config("batch_real", "must be >= 1"));
        }
        for (name, lr) in [
            ("model_lr", self.model_lr),
            ("data_lr", self.data_lr),
            ("image_lr", self.image_lr),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(name, format!("must be > 0, got {lr}")));
            }
        }
        Ok(())
    }
}

// ----- gradient distance -----

const COS_EPS: f64 = 1e-6;
const NORM_FLOOR: f32 = 1e-20;

/// Layerwise distance between two gradient sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradDistance {
    pub distance: f64,
    /// Rows where either side had zero norm; each contributes 1.
    pub zero_rows: usize,
}

/// `(rows, cols, transpose)` for a parameter gradient, or `None` for biases.
/// Linear weights are stored `[in, out]` and compared per output unit.
fn row_layout(shape: &[usize]) -> Option<(usize, usize, bool)> {
    match shape.len() {
        0 | 1 => None,
        2 => Some((shape[1], shape[0], true)),
        _ => Some((shape[0], shape[1..].iter().product(), false)),
    }
}

fn as_rows(t: &Tensor) -> Option<(usize, usize, Vec<f64>)> {
    let (r, c, tr) = row_layout(t.shape())?;
    let d = t.data();
    let v = if tr {
        (0..r)
            .flat_map(|o| (0..c).map(move |i| d[i * r + o] as f64))
            .collect()
    } else {
        d.iter().map(|&x| x as f64).collect()
    };
    Some((r, c, v))
}

/// Sum over weight tensors and output rows of `1 - cos(a_row, b_row)`.
/// Bias gradients are skipped.
pub fn grad_distance(a: &Params, b: &Params) -> Result<GradDistance> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::invalid("gradient sets have different parameters"));
    }
    let mut out = GradDistance::default();
    for ((name, ta), tb) in a.iter().zip(b.values()) {
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "`{name}`: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (Some((r, c, va)), Some((_, _, vb))) = (as_rows(ta), as_rows(tb)) else {
            continue;
        };
        for o in 0..r {
            let (ra, rb) = (&va[o * c..(o + 1) * c], &vb[o * c..(o + 1) * c]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|x| x * x).sum();
            let nb: f64 = rb.iter().map(|x| x * x).sum();
            if na == 0.0 || nb == 0.0 {
                out.zero_rows += 1;
            }
            let den = (na + NORM_FLOOR as f64).sqrt() * (nb + NORM_FLOOR as f64).sqrt() + COS_EPS;
            out.distance += 1.0 - dot / den;
        }
    }
    Ok(out)
}

/// Differentiable form of [`grad_distance`] over `(a, b)` pairs of equal shape.
pub fn grad_distance_on_tape(g: &mut Graph, pairs: &[(Var, Var)]) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut zero_rows = 0;
    for &(a, b) in pairs {
        let s = g.shape(a).to_vec();
        if g.shape(b) != s.as_slice() {
            return Err(Error::shape(b.id(), "gradient pair shapes differ"));
        }
        let Some((r, c, tr)) = row_layout(&s) else {
            continue;
        };
        let view = |g: &mut Graph, v: Var| -> Result<Var> {
            if tr {
                g.transpose(v)
            } else {
                g.reshape(v, &[r, c])
            }
        };
        let (a, b) = (view(g, a)?, view(g, b)?);
        let ab = g.mul(a, b)?;
        let dot = g.row_sum(ab)?;
        let mut norm = |g: &mut Graph, v: Var| -> Result<Var> {
            let sq = g.square(v)?;
            let n = g.row_sum(sq)?;
            zero_rows += g.value(n).data().iter().filter(|&&x| x == 0.0).count();
            let n = g.shift(n, NORM_FLOOR)?;
            g.powf(n, 0.5)
        };
        let (na, nb) = (norm(g, a)?, norm(g, b)?);
        let den = g.mul(na, nb)?;
        let den = g.shift(den, COS_EPS as f32)?;
        let cos = g.div(dot, den)?;
        let s = g.sum(cos)?;
        let s = g.neg(s)?;
        let d = g.shift(s, r as f32)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok((total, zero_rows))
}

// ----- batches and channels -----

/// Indices drawn for one class in one matching step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassBatch {
    pub class: usize,
    pub real: Vec<usize>,
    pub syn: Vec<usize>,
}

/// Class-stratified batches: real indices first, then reduced indices.
/// Classes with no reduced examples are skipped.
pub fn sample_class_batches(
    dt: &LabeledDataset,
    ds: &ReducedDataset,
    cfg: &BiLevelConfig,
    rng: &mut Rng,
) -> Result<Vec<ClassBatch>> {
    let mut out = Vec::new();
    for c in 0..ds.classes {
        let syn_pool = ds.class_indices(c);
        if syn_pool.is_empty() {
            continue;
        }
        let pool = dt.class_indices(c);
        if pool.is_empty() {
            return Err(Error::Dataset(format!("no real examples of class {c}")));
        }
        let real = class_batch(&pool, cfg.batch_real, rng);
        let syn = if cfg.batch_syn > 0 {
            class_batch(&syn_pool, cfg.batch_syn, rng)
        } else {
            syn_pool
        };
        out.push(ClassBatch { class: c, real, syn });
    }
    Ok(out)
}

/// Which stored tensor carries the learnable privileged channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    None,
    Features,
    Attention,
}

fn channel(ds: &ReducedDataset, loss: &DrupiLossConfig, spec: &ModelSpec, tap: usize) -> Result<Channel> {
    if !loss.uses_features() {
        return Ok(Channel::None);
    }
    let want = spec.feature_shape(tap)?;
    if let Some(f) = &ds.features {
        if f.feature_shape() != want.as_slice() {
            return Err(Error::invalid(format!(
                "feature labels {:?} do not match block-{tap} features {want:?}",
                f.feature_shape()
            )));
        }
        return Ok(Channel::Features);
    }
    if ds.attention.is_some() {
        return Ok(Channel::Attention);
    }
    Err(Error::invalid(
        "privileged weights are nonzero but the reduced set has no feature labels",
    ))
}

fn real_grads(model: &ModelState, dt: &LabeledDataset, idx: &[usize]) -> Result<Params> {
    let mut g = Graph::new();
    let m = model.bind(&mut g, true);
    let x = g.constant(dt.images.select_axis0(idx)?);
    let y: Vec<usize> = idx.iter().map(|&i| dt.labels[i]).collect();
    let (_, z) = m.forward_split(&mut g, x, model.spec.depth)?;
    let loss = g.cross_entropy(z, &y)?;
    let grads = g.backward(loss, &m.param_vars())?;
    named_grads(&m, &grads)
}

/// Places the reduced batch `idx` on `g`; returns the image var, the
/// channel leaf (if any) and the regression target.
fn place_batch(
    g: &mut Graph,
    ds: &ReducedDataset,
    idx: &[usize],
    ch: Channel,
    loss: &DrupiLossConfig,
    learn_images: bool,
    learn_channel: bool,
    rng: &mut Rng,
) -> Result<(Var, Option<Var>, RegTarget, Option<Var>)> {
    let x = ds.images.select_axis0(idx)?;
    let xv = if learn_images { g.leaf(x) } else { g.constant(x) };
    let put = |g: &mut Graph, t: Tensor| if learn_channel { g.leaf(t) } else { g.constant(t) };
    let (leaf, target) = match ch {
        Channel::None => (None, RegTarget::None),
        Channel::Features => {
            let set = ds.features.as_ref().expect("checked by channel()");
            let v = put(g, set.labels.select_axis0(idx)?);
            let w = aggregation_weights(idx.len(), set.n_feat(), loss.aggregation, rng);
            let agg = aggregate_on_tape(g, v, &w)?;
            (Some(v), RegTarget::Features(agg))
        }
        Channel::Attention => {
            let a = ds.attention.as_ref().expect("checked by channel()");
            let v = put(g, a.labels.select_axis0(idx)?);
            (Some(v), RegTarget::Attention { kind: a.kind, labels: v })
        }
    };
    let soft = match (&ds.soft_labels, loss.lambda_soft > 0.0) {
        (Some(s), true) => Some(g.constant(s.select_axis0(idx)?)),
        _ => None,
    };
    Ok((xv, leaf, target, soft))
}

/// Matching objective of one step and its gradient with respect to the
/// learnable parts of the reduced set (zero rows outside the batches).
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub objective: f64,
    pub zero_rows: usize,
    pub d_images: Option<Tensor>,
    pub d_channel: Option<Tensor>,
    channel: Channel,
}

fn channel_tensor(ds: &ReducedDataset, ch: Channel) -> Option<&Tensor> {
    match ch {
        Channel::None => None,
        Channel::Features => ds.features.as_ref().map(|f| &f.labels),
        Channel::Attention => ds.attention.as_ref().map(|a| &a.labels),
    }
}

fn channel_tensor_mut(ds: &mut ReducedDataset, ch: Channel) -> Option<&mut Tensor> {
    match ch {
        Channel::None => None,
        Channel::Features => ds.features.as_mut().map(|f| &mut f.labels),
        Channel::Attention => ds.attention.as_mut().map(|a| &mut a.labels),
    }
}

/// Gradient-matching distance summed over class batches, with gradients.
#[allow(clippy::too_many_arguments)]
pub fn dc_match(
    dt: &LabeledDataset,
    ds: &ReducedDataset,
    model: &ModelState,
    batches: &[ClassBatch],
    loss: &DrupiLossConfig,
    tap: usize,
    update_images: bool,
    rng: &mut Rng,
) -> Result<MatchResult> {
    let ch = channel(ds, loss, &model.spec, tap)?;
    let mut res = MatchResult {
        objective: 0.0,
        zero_rows: 0,
        d_images: update_images.then(|| Tensor::zeros(ds.images.shape())),
        d_channel: channel_tensor(ds, ch).map(|t| Tensor::zeros(t.shape())),
        channel: ch,
    };
    for b in batches {
        let real = real_grads(model, dt, &b.real)?;
        let mut g = Graph::new();
        let m = model.bind(&mut g, true);
        let (xv, leaf, target, soft) =
            place_batch(&mut g, ds, &b.syn, ch, loss, update_images, true, rng)?;
        let labels: Vec<usize> = b.syn.iter().map(|&i| ds.labels[i]).collect();
        let inp = LossInputs { x: xv, labels: &labels, target, soft };
        let terms = drupi_loss(&mut g, &m, &inp, loss, tap, None)?;
        let params = m.param_vars();
        let syn_grads = g.grad(terms.total, &params)?;
        let pairs = m
            .names()
            .iter()
            .zip(syn_grads)
            .map(|(name, sv)| (sv, g.constant(real[name].clone())))
            .collect::<Vec<_>>();
        let (dist, zero) = grad_distance_on_tape(&mut g, &pairs)?;
        res.objective += g.value(dist).data()[0] as f64;
        res.zero_rows += zero;
        let mut wrt = Vec::new();
        if update_images {
            wrt.push(xv);
        }
        wrt.extend(leaf);
        let grads = g.backward(dist, &wrt)?;
        if let Some(d) = res.d_images.as_mut() {
            d.set_rows(&b.syn, grads.get(xv).expect("requested"))?;
        }
        if let (Some(d), Some(l)) = (res.d_channel.as_mut(), leaf) {
            d.set_rows(&b.syn, grads.get(l).expect("requested"))?;
        }
    }
    Ok(res)
}

/// Distribution-matching objective summed over class batches, with gradients:
/// `||mean psi(x_syn) - mean psi(x_real)||^2 + lambda_reg ||mean f - mean psi(x_real)||^2`.
#[allow(clippy::too_many_arguments)]
pub fn dm_match(
    dt: &LabeledDataset,
    ds: &ReducedDataset,
    embedder: &ModelState,
    batches: &[ClassBatch],
    loss: &DrupiLossConfig,
    tap: usize,
    update_images: bool,
    rng: &mut Rng,
) -> Result<MatchResult> {
    let ch = if loss.lambda_reg > 0.0 {
        channel(ds, loss, &embedder.spec, tap)?
    } else {
        Channel::None
    };
    let mut res = MatchResult {
        objective: 0.0,
        zero_rows: 0,
        d_images: update_images.then(|| Tensor::zeros(ds.images.shape())),
        d_channel: channel_tensor(ds, ch).map(|t| Tensor::zeros(t.shape())),
        channel: ch,
    };
    let batch_mean = |g: &mut Graph, v: Var| -> Result<Var> {
        let mut s = g.shape(v).to_vec();
        let n = s[0];
        s[0] = 1;
        let m = g.sum_to(v, &s)?;
        g.scale(m, 1.0 / n as f32)
    };
    for b in batches {
        let mut g = Graph::new();
        let m = embedder.bind(&mut g, false);
        let xr = g.constant(dt.images.select_axis0(&b.real)?);
        let (fr, _) = m.features(&mut g, xr, tap)?;
        let mr = batch_mean(&mut g, fr)?;
        let (xv, leaf, target, _) =
            place_batch(&mut g, ds, &b.syn, ch, loss, update_images, true, rng)?;
        let (fs, _) = m.features(&mut g, xv, tap)?;
        let ms = batch_mean(&mut g, fs)?;
        let diff = g.sub(ms, mr)?;
        let sq = g.square(diff)?;
        let mut obj = g.sum(sq)?;
        let chan_term = match target {
            RegTarget::None => None,
            RegTarget::Features(f) => Some((f, mr)),
            RegTarget::Attention { kind, labels } => {
                let pooled = pool_attention_on_tape(&mut g, fr, kind)?;
                Some((labels, batch_mean(&mut g, pooled)?))
            }
        };
        if let Some((f, reference)) = chan_term {
            let mf = batch_mean(&mut g, f)?;
            let d = g.sub(mf, reference)?;
            let sq = g.square(d)?;
            let s = g.sum(sq)?;
            let s = g.scale(s, loss.lambda_reg)?;
            obj = g.add(obj, s)?;
        }
        res.objective += g.value(obj).data()[0] as f64;
        let mut wrt = Vec::new();
        if update_images {
            wrt.push(xv);
        }
        wrt.extend(leaf);
        if wrt.is_empty() {
            continue;
        }
        let grads = g.backward(obj, &wrt)?;
        if let Some(d) = res.d_images.as_mut() {
            d.set_rows(&b.syn, grads.get(xv).expect("requested"))?;
        }
        if let (Some(d), Some(l)) = (res.d_channel.as_mut(), leaf) {
            d.set_rows(&b.syn, grads.get(l).expect("requested"))?;
        }
    }
    Ok(res)
}

/// One gradient-descent step on the learnable parts of `ds`.
pub fn apply_match(ds: &ReducedDataset, m: &MatchResult, cfg: &BiLevelConfig) -> Result<ReducedDataset> {
    let mut out = ds.clone();
    if let Some(d) = &m.d_images {
        out.images.axpy(-cfg.image_lr, d)?;
    }
    if let Some(d) = &m.d_channel {
        channel_tensor_mut(&mut out, m.channel)
            .ok_or_else(|| Error::invalid("match gradient for a missing channel"))?
            .axpy(-cfg.data_lr, d)?;
    }
    Ok(out)
}

/// `T` full-batch SGD steps of the network on the reduced set.
pub fn inner_train(
    ds: &ReducedDataset,
    model: &ModelState,
    loss: &DrupiLossConfig,
    tap: usize,
    cfg: &BiLevelConfig,
    rng: &mut Rng,
) -> Result<ModelState> {
    let ch = channel(ds, loss, &model.spec, tap)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut model = model.clone();
    for _ in 0..cfg.inner_steps {
        let mut g = Graph::new();
        let m = model.bind(&mut g, true);
        let (xv, _, target, soft) = place_batch(&mut g, ds, &all, ch, loss, false, false, rng)?;
        let inp = LossInputs { x: xv, labels: &ds.labels, target, soft };
        let terms = drupi_loss(&mut g, &m, &inp, loss, tap, None)?;
        let grads = g.backward(terms.total, &m.param_vars())?;
        model = sgd_step(&model, &named_grads(&m, &grads)?, cfg.model_lr)?;
    }
    Ok(model)
}

/// Matching step on every class, then `T` inner network steps.
#[allow(clippy::too_many_arguments)]
pub fn dc_outer_step(
    dt: &LabeledDataset,
    ds: &ReducedDataset,
    model: &ModelState,
    loss: &DrupiLossConfig,
    tap: usize,
    cfg: &BiLevelConfig,
    rng: &mut Rng,
) -> Result<(ReducedDataset, ModelState, MatchResult)> {
    let batches = sample_class_batches(dt, ds, cfg, rng)?;
    let m = dc_match(dt, ds, model, &batches, loss, tap, cfg.update_images, rng)?;
    let next = apply_match(ds, &m, cfg)?;
    let model = inner_train(&next, model, loss, tap, cfg, rng)?;
    Ok((next, model, m))
}

/// Classic gradient matching on images with cross-entropy only.
pub fn dc_plain_outer_step(
    dt: &LabeledDataset,
    images: &Tensor,
    labels: &[usize],
    model: &ModelState,
    cfg: &BiLevelConfig,
    rng: &mut Rng,
) -> Result<(Tensor, ModelState)> {
    let classes = model.spec.classes;
    let mut next = images.clone();
    for c in 0..classes {
        let syn_pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if syn_pool.is_empty() {
            continue;
        }
        let pool = dt.class_indices(c);
        if pool.is_empty() {
            return Err(Error::Dataset(format!("no real examples of class {c}")));
        }
        let real_idx = class_batch(&pool, cfg.batch_real, rng);
        let syn = if cfg.batch_syn > 0 {
            class_batch(&syn_pool, cfg.batch_syn, rng)
        } else {
            syn_pool
        };
        let real = real_grads(model, dt, &real_idx)?;
        let mut g = Graph::new();
        let m = model.bind(&mut g, true);
        let xs = g.leaf(images.select_axis0(&syn)?);
        let ys: Vec<usize> = syn.iter().map(|&i| labels[i]).collect();
        let (_, z) = m.forward_split(&mut g, xs, model.spec.depth)?;
        let ce = g.cross_entropy(z, &ys)?;
        let gs = g.grad(ce, &m.param_vars())?;
        let pairs: Vec<(Var, Var)> = m
            .names()
            .iter()
            .zip(gs)
            .map(|(n, v)| (v, g.constant(real[n].clone())))
            .collect();
        let (dist, _) = grad_distance_on_tape(&mut g, &pairs)?;
        let dx = g.backward(dist, &[xs])?;
        let mut rows = images.select_axis0(&syn)?;
        rows.axpy(-cfg.image_lr, dx.get(xs).expect("requested"))?;
        next.set_rows(&syn, &rows)?;
    }
    let mut model = model.clone();
    for _ in 0..cfg.inner_steps {
        let mut g = Graph::new();
        let m = model.bind(&mut g, true);
        let x = g.constant(next.clone());
        let (_, z) = m.forward_split(&mut g, x, model.spec.depth)?;
        let ce = g.cross_entropy(z, labels)?;
        let grads = g.backward(ce, &m.param_vars())?;
        model = sgd_step(&model, &named_grads(&m, &grads)?, cfg.model_lr)?;
    }
    Ok((next, model))
}

/// Mean-embedding matching step under `embedder`.
#[allow(clippy::too_many_arguments)]
pub fn dm_outer_step(
    dt: &LabeledDataset,
    ds: &ReducedDataset,
    embedder: &ModelState,
    loss: &DrupiLossConfig,
    tap: usize,
    cfg: &BiLevelConfig,
    rng: &mut Rng,
) -> Result<(ReducedDataset, MatchResult)> {
    let batches = sample_class_batches(dt, ds, cfg, rng)?;
    let m = dm_match(dt, ds, embedder, &batches, loss, tap, cfg.update_images, rng)?;
    Ok((apply_match(ds, &m, cfg)?, m))
}

/// Per-outer-iteration record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    /// Fingerprint of the freshly initialized network.
    pub init_fingerprint: String,
    /// Matching objective of the first matching step, before the update.
    pub objective: f64,
    pub zero_rows: usize,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub dataset: ReducedDataset,
    pub trace: Vec<OuterRecord>,
}

#[derive(Serialize)]
struct HashedSetup<'a> {
    spec: &'a ModelSpec,
    tap: usize,
    loss: &'a DrupiLossConfig,
    cfg: &'a BiLevelConfig,
}

/// Runs `K` outer iterations from `ds_init`, each with a fresh network.
/// The task term is dropped when `tap` is not the final block.
pub fn run_synthesis(
    dt: &LabeledDataset,
    ds_init: &ReducedDataset,
    spec: &ModelSpec,
    tap: usize,
    loss: &DrupiLossConfig,
    cfg: &BiLevelConfig,
    seed: u64,
) -> Result<Synthesis> {
    cfg.validate()?;
    loss.validate()?;
    dt.validate_training()?;
    ds_init.validate()?;
    spec.feature_shape(tap)?;
    if dt.input_shape() != spec.input || ds_init.as_labeled().input_shape() != spec.input {
        return Err(Error::invalid("dataset images do not match the model input"));
    }
    let loss = loss.for_tap(tap, spec.depth);
    let mut ds = ds_init.clone();
    let mut trace = Vec::with_capacity(cfg.outer_steps);
    for k in 0..cfg.outer_steps {
        let mut rng = rng::derive(seed, rng::stream::BATCHING, k as u64);
        let model = init_model(spec, rng::derive_seed(seed, rng::stream::MODEL_INIT, k as u64))?;
        let fingerprint = model.fingerprint();
        let mut first = None;
        match cfg.backend {
            Backend::Dc => {
                let mut model = model;
                for _ in 0..cfg.match_rounds {
                    let (next, m2, stats) = dc_outer_step(dt, &ds, &model, &loss, tap, cfg, &mut rng)?;
                    first.get_or_insert((stats.objective, stats.zero_rows));
                    ds = next;
                    model = m2;
                }
            }
            Backend::Dm => {
                let (next, stats) = dm_outer_step(dt, &ds, &model, &loss, tap, cfg, &mut rng)?;
                first = Some((stats.objective, stats.zero_rows));
                ds = next;
            }
        }
        let (objective, zero_rows) = first.expect("at least one matching step");
        if !objective.is_finite() {
            return Err(Error::NonFinite { node: 0 });
        }
        trace.push(OuterRecord {
            iteration: k,
            init_fingerprint: fingerprint,
            objective,
            zero_rows,
        });
    }
    ds.provenance = Provenance {
        backend: cfg.backend.name().into(),
        config_hash: stable_hash(&HashedSetup { spec, tap, loss: &loss, cfg })?,
        seed,
    };
    Ok(Synthesis { dataset: ds, trace })
}
