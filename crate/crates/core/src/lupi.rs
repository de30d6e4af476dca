//! Training with privileged channels, evaluation and gradient diagnostics.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledDataset, ReducedDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ce_step, init_model, named_grads, sgd_step, ModelSpec, ModelState};
use crate::privileged::{
    aggregate_on_tape, aggregation_weights, drupi_loss, DrupiLossConfig, LossComponents,
    LossInputs, PoolingRecord, RegTarget,
};
use crate::rng::{self, Rng};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Fully connected map from stored feature labels to model features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aligner {
    /// `[in_dim, out_dim]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub out_shape: Vec<usize>,
}

impl Aligner {
    pub fn new(in_shape: &[usize], out_shape: &[usize], seed: u64) -> Result<Self> {
        let (din, dout) = (in_shape.iter().product::<usize>(), out_shape.iter().product::<usize>());
        let bound = (6.0 / (din + dout) as f32).sqrt();
        let dist = Uniform::new(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let mut r = rng::derive(seed, rng::stream::MODEL_INIT, 1);
        Ok(Aligner {
            weight: Tensor::new(vec![din, dout], (0..din * dout).map(|_| dist.sample(&mut r)).collect())?,
            bias: Tensor::zeros(&[dout]),
            out_shape: out_shape.to_vec(),
        })
    }

    fn bind(&self, g: &mut Graph) -> BoundAligner {
        BoundAligner {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
            out_shape: self.out_shape.clone(),
        }
    }
}

struct BoundAligner {
    weight: Var,
    bias: Var,
    out_shape: Vec<usize>,
}

impl BoundAligner {
    fn apply(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let n = g.shape(f)[0];
        let flat = g.flatten(f)?;
        let y = g.linear(flat, self.weight, Some(self.bias))?;
        let mut shape = vec![n];
        shape.extend_from_slice(&self.out_shape);
        g.reshape(y, &shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Minibatch size; 0 trains full-batch.
    pub batch: usize,
    /// Insert an aligner when stored feature labels do not match the model.
    pub allow_aligner: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.01,
            batch: 0,
            allow_aligner: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ModelState,
    pub aligner: Option<Aligner>,
    /// Mean loss components per epoch.
    pub trace: Vec<LossComponents>,
    /// Pooling applied to model features under attention supervision.
    pub pooling: Option<PoolingRecord>,
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    if batch == 0 || batch >= n {
        vec![(0..n).collect()]
    } else {
        minibatches(n, batch, rng)
    }
}

/// Trains a fresh `spec` network on `ds` with the combined loss at `tap`.
/// The task term is dropped when `tap` is not the final block.
pub fn train_lupi(
    ds: &ReducedDataset,
    spec: &ModelSpec,
    tap: usize,
    loss: &DrupiLossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::config("lr", format!("must be > 0, got {}", cfg.lr)));
    }
    ds.validate()?;
    loss.validate()?;
    let want = spec.feature_shape(tap)?;
    let loss = loss.for_tap(tap, spec.depth);
    let mut model = init_model(spec, rng::derive_seed(seed, rng::stream::MODEL_INIT, 0))?;
    let mut rng = rng::derive(seed, rng::stream::BATCHING, 0);

    let use_features = loss.uses_features() && ds.features.is_some();
    let use_attention = loss.uses_features() && !use_features && ds.attention.is_some();
    if loss.uses_features() && !use_features && !use_attention {
        return Err(Error::invalid("privileged weights are nonzero but no labels are stored"));
    }
    if loss.lambda_soft > 0.0 && ds.soft_labels.is_none() {
        return Err(Error::invalid("lambda_soft > 0 but no soft labels are stored"));
    }
    let mut aligner = None;
    if use_features {
        let stored = ds.features.as_ref().expect("checked").feature_shape();
        if stored != want.as_slice() {
            if !cfg.allow_aligner {
                return Err(Error::invalid(format!(
                    "feature labels {stored:?} vs block-{tap} features {want:?} and the aligner is disabled"
                )));
            }
            aligner = Some(Aligner::new(stored, &want, rng::derive_seed(seed, rng::stream::MODEL_INIT, 1))?);
        }
    }

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut pooling = None;
    for _ in 0..cfg.epochs {
        let mut sum = LossComponents::default();
        let parts = batches(ds.len(), cfg.batch, &mut rng);
        let count = parts.len() as f64;
        for idx in parts {
            let mut g = Graph::new();
            let m = model.bind(&mut g, true);
            let bound_aligner = aligner.as_ref().map(|a: &Aligner| a.bind(&mut g));
            let xv = g.constant(ds.images.select_axis0(&idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let target = if use_features {
                let set = ds.features.as_ref().expect("checked");
                let v = g.constant(set.labels.select_axis0(&idx)?);
                let w = aggregation_weights(idx.len(), set.n_feat(), loss.aggregation, &mut rng);
                RegTarget::Features(aggregate_on_tape(&mut g, v, &w)?)
            } else if use_attention {
                let a = ds.attention.as_ref().expect("checked");
                let v = g.constant(a.labels.select_axis0(&idx)?);
                RegTarget::Attention { kind: a.kind, labels: v }
            } else {
                RegTarget::None
            };
            let soft = match (&ds.soft_labels, loss.lambda_soft > 0.0) {
                (Some(s), true) => Some(g.constant(s.select_axis0(&idx)?)),
                _ => None,
            };
            let inp = LossInputs { x: xv, labels: &labels, target, soft };
            let align_fn = bound_aligner
                .as_ref()
                .map(|b| move |g: &mut Graph, v: Var| b.apply(g, v));
            let terms = drupi_loss(
                &mut g,
                &m,
                &inp,
                &loss,
                tap,
                align_fn.as_ref().map(|f| f as &dyn Fn(&mut Graph, Var) -> Result<Var>),
            )?;
            if terms.pooling.is_some() {
                pooling = terms.pooling.clone();
            }
            let c = terms.components(&g);
            sum.total += c.total;
            sum.cls += c.cls;
            sum.reg += c.reg;
            sum.task += c.task;
            sum.soft += c.soft;
            sum.nce += c.nce;
            let mut wrt = m.param_vars();
            if let Some(b) = &bound_aligner {
                wrt.push(b.weight);
                wrt.push(b.bias);
            }
            let grads = g.backward(terms.total, &wrt)?;
            model = sgd_step(&model, &named_grads(&m, &grads)?, cfg.lr)?;
            if let (Some(a), Some(b)) = (aligner.as_mut(), &bound_aligner) {
                a.weight.axpy(-cfg.lr, grads.get(b.weight).expect("requested"))?;
                a.bias.axpy(-cfg.lr, grads.get(b.bias).expect("requested"))?;
            }
        }
        for v in [&mut sum.total, &mut sum.cls, &mut sum.reg, &mut sum.task, &mut sum.soft, &mut sum.nce] {
            *v /= count;
        }
        if !sum.total.is_finite() {
            return Err(Error::NonFinite { node: 0 });
        }
        trace.push(sum);
    }
    Ok(TrainedModel { model, aligner, trace, pooling })
}

/// Plain cross-entropy training with the same initialization and batching
/// streams as [`train_lupi`].
pub fn train_plain(ds: &LabeledDataset, spec: &ModelSpec, cfg: &TrainConfig, seed: u64) -> Result<ModelState> {
    let mut model = init_model(spec, rng::derive_seed(seed, rng::stream::MODEL_INIT, 0))?;
    let mut rng = rng::derive(seed, rng::stream::BATCHING, 0);
    for _ in 0..cfg.epochs {
        for idx in batches(ds.len(), cfg.batch, &mut rng) {
            let x = ds.images.select_axis0(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            model = ce_step(&model, &x, &y, cfg.lr)?.0;
        }
    }
    Ok(model)
}

const EVAL_CHUNK: usize = 512;

/// Fraction of test examples whose argmax prediction equals the label.
pub fn evaluate(model: &ModelState, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if test.input_shape() != model.spec.input {
        return Err(Error::invalid("test images do not match the model input"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let z = model.logits(&test.images.select_axis0(chunk)?)?;
        correct += argmax_rows(&z)
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == test.labels[i])
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy summary over evaluation seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    pub traces: Vec<Vec<LossComponents>>,
    pub grad_cosine: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_runs(seeds: Vec<u64>, per_seed: Vec<f64>, traces: Vec<Vec<LossComponents>>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        EvalReport { mean, std, per_seed, seeds, traces, grad_cosine: Vec::new() }
    }
}

/// Trains one model per seed and evaluates it on `test`.
pub fn evaluate_seeds(
    ds: &ReducedDataset,
    spec: &ModelSpec,
    tap: usize,
    loss: &DrupiLossConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    test: &LabeledDataset,
) -> Result<EvalReport> {
    let run = |&s: &u64| -> Result<(f64, Vec<LossComponents>)> {
        let t = train_lupi(ds, spec, tap, loss, cfg, s)?;
        Ok((evaluate(&t.model, test)?, t.trace))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        seeds.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = seeds.iter().map(run).collect::<Result<_>>()?;
    let (acc, traces) = results.into_iter().unzip();
    Ok(EvalReport::from_runs(seeds.to_vec(), acc, traces))
}

/// Cosines between the flattened probe gradient on the reduced set and on
/// the full set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub with_pi: f64,
    pub without_pi: f64,
    /// Set when a gradient had zero norm; its cosine is reported as 0.
    pub flagged: bool,
}

fn flat_grad(grads: &crate::tape::GradMap, vars: &[Var]) -> Vec<f64> {
    vars.iter()
        .flat_map(|v| grads.get(*v).expect("requested").data().iter().map(|&x| x as f64))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Gradient of `loss` on `ds` under `probe`, flattened over all parameters.
pub fn probe_gradient(
    ds: &ReducedDataset,
    probe: &ModelState,
    tap: usize,
    loss: &DrupiLossConfig,
) -> Result<Vec<f64>> {
    let loss = loss.for_tap(tap, probe.spec.depth);
    let mut g = Graph::new();
    let m = probe.bind(&mut g, true);
    let xv = g.constant(ds.images.clone());
    let target = if loss.uses_features() {
        match (&ds.features, &ds.attention) {
            (Some(f), _) => RegTarget::Features(g.constant(f.mean_labels())),
            (None, Some(a)) => RegTarget::Attention { kind: a.kind, labels: g.constant(a.labels.clone()) },
            (None, None) => return Err(Error::invalid("no privileged labels for the probe gradient")),
        }
    } else {
        RegTarget::None
    };
    let soft = match (&ds.soft_labels, loss.lambda_soft > 0.0) {
        (Some(s), true) => Some(g.constant(s.clone())),
        _ => None,
    };
    let inp = LossInputs { x: xv, labels: &ds.labels, target, soft };
    let terms = drupi_loss(&mut g, &m, &inp, &loss, tap, None)?;
    let vars = m.param_vars();
    let grads = g.backward(terms.total, &vars)?;
    Ok(flat_grad(&grads, &vars))
}

/// Mean cross-entropy gradient over all of `dt`, accumulated in chunks.
pub fn full_gradient(dt: &LabeledDataset, probe: &ModelState) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..dt.len()).collect();
    let mut acc: Option<Vec<f64>> = None;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let sub = ReducedDataset::from_labeled(&dt.subset(chunk)?);
        let g = probe_gradient(&sub, probe, probe.spec.depth, &DrupiLossConfig::none())?;
        let w = chunk.len() as f64 / dt.len() as f64;
        match acc.as_mut() {
            None => acc = Some(g.into_iter().map(|v| v * w).collect()),
            Some(a) => a.iter_mut().zip(g).for_each(|(a, v)| *a += v * w),
        }
    }
    acc.ok_or_else(|| Error::invalid("empty dataset"))
}

/// Cosine between probe gradients on `ds` (with and without privileged
/// terms) and on `dt`.
pub fn gradient_alignment(
    ds: &ReducedDataset,
    dt: &LabeledDataset,
    probe: &ModelState,
    tap: usize,
    loss: &DrupiLossConfig,
) -> Result<Alignment> {
    let real = full_gradient(dt, probe)?;
    let with = probe_gradient(ds, probe, tap, loss)?;
    let without = probe_gradient(ds, probe, tap, &DrupiLossConfig::none())?;
    let (a, b) = (cosine(&with, &real), cosine(&without, &real));
    Ok(Alignment {
        with_pi: a.unwrap_or(0.0),
        without_pi: b.unwrap_or(0.0),
        flagged: a.is_none() || b.is_none(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossArchCell {
    pub spec: ModelSpec,
    pub aligned: bool,
    pub report: EvalReport,
}

/// Trains and evaluates every spec at its final block, inserting an aligner
/// wherever the stored feature labels do not fit.
pub fn cross_arch_matrix(
    ds: &ReducedDataset,
    specs: &[ModelSpec],
    loss: &DrupiLossConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    test: &LabeledDataset,
) -> Result<Vec<CrossArchCell>> {
    if specs.is_empty() {
        return Err(Error::invalid("no architectures"));
    }
    specs
        .iter()
        .map(|spec| {
            let aligned = ds
                .features
                .as_ref()
                .is_some_and(|f| spec.feature_shape(spec.depth).ok().as_deref() != Some(f.feature_shape()));
            Ok(CrossArchCell {
                spec: spec.clone(),
                aligned,
                report: evaluate_seeds(ds, spec, spec.depth, loss, cfg, seeds, test)?,
            })
        })
        .collect()
}
