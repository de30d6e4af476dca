//! Coreset selection: random, herding, k-center and forgetting.
//!
//! Every selector takes per-class counts and returns dataset indices grouped
//! by class (class 0 first), each group in selection order. Ties resolve to
//! the lowest dataset index.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{ce_step, init_model, ModelSpec, ModelState};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    Herding,
    Kcenter,
    Forgetting,
}

/// Per-example score used to rank candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionScore {
    pub method: Method,
    pub scores: Vec<f64>,
}

/// `ipc` examples for each of `classes` classes.
pub fn ipc_counts(ipc: usize, classes: usize) -> Vec<usize> {
    vec![ipc; classes]
}

fn check_counts(labels: &[usize], counts: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); counts.len()];
    for (i, &y) in labels.iter().enumerate() {
        pools
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} outside {} classes", counts.len())))?
            .push(i);
    }
    for (c, (pool, &k)) in pools.iter().zip(counts).enumerate() {
        if pool.is_empty() {
            return Err(Error::invalid(format!("class {c} is empty")));
        }
        if pool.len() < k {
            return Err(Error::invalid(format!(
                "class {c} has {} examples, {k} requested",
                pool.len()
            )));
        }
    }
    Ok(pools)
}

/// Uniform per-class sample without replacement.
pub fn select_random(labels: &[usize], counts: &[usize], seed: u64) -> Result<Vec<usize>> {
    let pools = check_counts(labels, counts)?;
    let mut out = Vec::new();
    for (c, (pool, &k)) in pools.iter().zip(counts).enumerate() {
        let mut r = rng::derive(seed, rng::stream::INIT, c as u64);
        out.extend(sample(&mut r, pool.len(), k).into_iter().map(|j| pool[j]));
    }
    Ok(out)
}

fn rows(features: &Tensor, n: usize) -> Result<(Vec<f64>, usize)> {
    if features.rank() < 2 || features.shape()[0] != n {
        return Err(Error::invalid(format!(
            "features {:?} for {n} labels",
            features.shape()
        )));
    }
    let d = features.numel() / n;
    Ok((features.data().iter().map(|&v| v as f64).collect(), d))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn class_sum(x: &[f64], d: usize, pool: &[usize]) -> Vec<f64> {
    let mut sum = vec![0f64; d];
    for &i in pool {
        for (m, v) in sum.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    sum
}

/// Index of the strictly smallest key; earlier entries win ties.
fn argmin_by(cands: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in cands {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy herding: step `k` adds the unchosen `x` minimizing
/// `||mu_c - (sum of chosen + phi(x)) / k||`.
///
/// Keys are scaled by `n * k` (`||k * S - n * (acc + phi)||`, `S` the class
/// sum) so integer-valued features compare exactly and ties stay ties.
pub fn select_herding(features: &Tensor, labels: &[usize], counts: &[usize]) -> Result<Vec<usize>> {
    let pools = check_counts(labels, counts)?;
    let (x, d) = rows(features, labels.len())?;
    if d == 0 {
        return Err(Error::invalid("features have zero width"));
    }
    let mut out = Vec::new();
    for (pool, &k) in pools.iter().zip(counts) {
        let n = pool.len() as f64;
        let sum = class_sum(&x, d, pool);
        let mut acc = vec![0f64; d];
        let mut taken = vec![false; pool.len()];
        for step in 1..=k {
            let target: Vec<f64> = sum.iter().map(|s| step as f64 * s).collect();
            let pick = argmin_by(pool.iter().enumerate().filter(|(j, _)| !taken[*j]).map(|(j, &i)| {
                let cand: Vec<f64> = acc
                    .iter()
                    .zip(&x[i * d..(i + 1) * d])
                    .map(|(a, v)| n * (a + v))
                    .collect();
                (j, sq_dist(&target, &cand))
            }))
            .expect("class has unchosen examples");
            taken[pick] = true;
            let i = pool[pick];
            for (a, v) in acc.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *a += v;
            }
            out.push(i);
        }
    }
    Ok(out)
}

/// Farthest-point traversal seeded at the example nearest the class mean.
pub fn select_kcenter(features: &Tensor, labels: &[usize], counts: &[usize]) -> Result<Vec<usize>> {
    let pools = check_counts(labels, counts)?;
    let (x, d) = rows(features, labels.len())?;
    if d == 0 {
        return Err(Error::invalid("features have zero width"));
    }
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut out = Vec::new();
    for (pool, &k) in pools.iter().zip(counts) {
        if k == 0 {
            continue;
        }
        // nearest to the mean, compared as ||n * x - S|| to keep ties exact
        let n = pool.len() as f64;
        let sum = class_sum(&x, d, pool);
        let first = argmin_by(pool.iter().enumerate().map(|(j, &i)| {
            let scaled: Vec<f64> = row(i).iter().map(|v| n * v).collect();
            (j, sq_dist(&scaled, &sum))
        }))
            .expect("nonempty class");
        let mut taken = vec![false; pool.len()];
        taken[first] = true;
        out.push(pool[first]);
        let mut mind: Vec<f64> = pool.iter().map(|&i| sq_dist(row(i), row(pool[first]))).collect();
        for _ in 1..k {
            let pick = argmin_by(
                (0..pool.len())
                    .filter(|&j| !taken[j])
                    .map(|j| (j, -mind[j])),
            )
            .expect("class has unchosen examples");
            taken[pick] = true;
            out.push(pool[pick]);
            for (j, m) in mind.iter_mut().enumerate() {
                *m = m.min(sq_dist(row(pool[j]), row(pool[pick])));
            }
        }
    }
    Ok(out)
}

/// Largest distance from any class member to its nearest selected member.
pub fn covering_radius(features: &Tensor, labels: &[usize], selected: &[usize]) -> Result<f64> {
    let (x, d) = rows(features, labels.len())?;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut worst = 0f64;
    for (i, &y) in labels.iter().enumerate() {
        let near = selected
            .iter()
            .filter(|&&s| labels[s] == y)
            .map(|&s| sq_dist(row(i), row(s)))
            .fold(f64::INFINITY, f64::min);
        if near.is_finite() {
            worst = worst.max(near.sqrt());
        }
    }
    Ok(worst)
}

/// Correct-to-incorrect transitions per example; `history[e][i]` is whether
/// example `i` was classified correctly after epoch `e`.
pub fn forgetting_events(history: &[Vec<bool>]) -> Vec<usize> {
    let n = history.first().map_or(0, Vec::len);
    let mut events = vec![0; n];
    for pair in history.windows(2) {
        for (i, e) in events.iter_mut().enumerate() {
            if pair[0][i] && !pair[1][i] {
                *e += 1;
            }
        }
    }
    events
}

/// Keeps the `counts[c]` examples with the most events per class.
pub fn select_by_score(labels: &[usize], counts: &[usize], scores: &[f64]) -> Result<Vec<usize>> {
    let pools = check_counts(labels, counts)?;
    let mut out = Vec::new();
    for (pool, &k) in pools.iter().zip(counts) {
        let mut p = pool.clone();
        // stable sort keeps ascending index among equal scores
        p.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
        out.extend_from_slice(&p[..k]);
    }
    Ok(out)
}

/// Proxy training recipe for forgetting scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub width: usize,
    pub depth: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            epochs: 10,
            batch: 32,
            lr: 0.05,
            width: 16,
            depth: 2,
        }
    }
}

/// Trains a small ConvNet and scores each example by its forgetting events.
pub fn forgetting_scores(ds: &LabeledDataset, cfg: &ProxyConfig, seed: u64) -> Result<SelectionScore> {
    if cfg.epochs < 2 {
        return Err(Error::invalid("forgetting needs at least two epochs"));
    }
    let spec = ModelSpec::convnet(cfg.depth, cfg.width, ds.input_shape(), ds.classes);
    let mut model: ModelState = init_model(&spec, rng::derive_seed(seed, rng::stream::MODEL_INIT, 0))?;
    let mut batches = rng::derive(seed, rng::stream::BATCHING, 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for idx in minibatches(ds.len(), cfg.batch, &mut batches) {
            let x = ds.images.select_axis0(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            model = ce_step(&model, &x, &y, cfg.lr)?.0;
        }
        let pred = model.predict(&ds.images)?;
        history.push(pred.iter().zip(&ds.labels).map(|(p, y)| p == y).collect());
    }
    Ok(SelectionScore {
        method: Method::Forgetting,
        scores: forgetting_events(&history).into_iter().map(|e| e as f64).collect(),
    })
}

pub fn select_forgetting(
    ds: &LabeledDataset,
    counts: &[usize],
    cfg: &ProxyConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    check_counts(&ds.labels, counts)?;
    let s = forgetting_scores(ds, cfg, seed)?;
    select_by_score(&ds.labels, counts, &s.scores)
}
