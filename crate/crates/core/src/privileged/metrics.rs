//! Diversity and discriminability of a feature-label set.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FeatureLabelSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const KMEANS_ITERS: usize = 50;
pub const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    /// `-I(Q; Y)` in nats.
    pub diversity: f64,
    /// Held-in linear probe accuracy.
    pub discriminability: f64,
    /// Set when every feature label is identical.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding on `n x d` row-major points.
/// Returns cluster assignments.
pub fn kmeans(points: &[f64], d: usize, k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    if d == 0 || points.is_empty() || points.len() % d != 0 || k == 0 {
        return Err(Error::invalid("kmeans needs n x d points with d, k > 0"));
    }
    let n = points.len() / d;
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut r = rng::derive(seed, "kmeans", 0);
    let mut centers: Vec<Vec<f64>> = vec![row(r.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            // fewer distinct points than clusters
            break;
        }
        let mut u = r.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        centers.push(row(pick).to_vec());
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(row(i), centers.last().expect("pushed")));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..centers.len())
                .min_by(|&p, &q| {
                    sq_dist(row(i), &centers[p])
                        .partial_cmp(&sq_dist(row(i), &centers[q]))
                        .expect("finite")
                })
                .expect("k >= 1");
            changed |= *a != best;
            *a = best;
        }
        let mut sums = vec![vec![0f64; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for (c, (s, &cnt)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if cnt > 0 {
                *c = s.iter().map(|v| v / cnt as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}

/// Plug-in mutual information of two discrete labelings, in nats.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0f64; ka * kb];
    let (mut pa, mut pb) = (vec![0f64; ka], vec![0f64; kb]);
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let j = joint[x * kb + y];
            if j > 0.0 {
                mi += j / n * (j * n / (pa[x] * pb[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Held-in accuracy of multinomial logistic regression trained by full-batch
/// gradient descent on z-scored `n x d` features.
pub fn linear_probe_accuracy(
    points: &[f64],
    d: usize,
    labels: &[usize],
    classes: usize,
    steps: usize,
) -> Result<f64> {
    let n = labels.len();
    if d == 0 || points.len() != n * d || n == 0 {
        return Err(Error::invalid("probe needs n x d features"));
    }
    let mut x = points.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            x[i * d + j] = if sd > 1e-12 { (x[i * d + j] - mean) / sd } else { 0.0 };
        }
    }
    let mut w = vec![0f64; d * classes];
    let mut b = vec![0f64; classes];
    let logits = |w: &[f64], b: &[f64], i: usize| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + (0..d).map(|j| x[i * d + j] * w[j * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..steps {
        let mut gw = vec![0f64; d * classes];
        let mut gb = vec![0f64; classes];
        for i in 0..n {
            let z = logits(&w, &b, i);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let r = e[c] / s - f64::from(u8::from(c == labels[i]));
                gb[c] += r;
                for j in 0..d {
                    gw[j * classes + c] += r * x[i * d + j];
                }
            }
        }
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= PROBE_LR * gv / n as f64;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= PROBE_LR * gv / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let z = logits(&w, &b, i);
            let pred = (0..classes)
                .max_by(|&p, &q| z[p].partial_cmp(&z[q]).expect("finite").then(q.cmp(&p)))
                .expect("classes >= 1");
            pred == labels[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Metrics over per-example feature rows `[M, ...]`.
pub fn feature_metrics(
    rows: &Tensor,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<FeatureMetrics> {
    let m = rows.shape()[0];
    if m != labels.len() {
        return Err(Error::invalid(format!("{m} feature rows vs {} labels", labels.len())));
    }
    if classes < 2 {
        return Err(Error::invalid("metrics need at least two classes"));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::invalid(format!("label {y} >= {classes}")))? += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::invalid("metrics need at least two examples per class"));
    }
    let d = rows.numel() / m;
    let points: Vec<f64> = rows.data().iter().map(|&v| v as f64).collect();
    let degenerate = (1..m).all(|i| points[i * d..(i + 1) * d] == points[..d]);
    let diversity = if degenerate {
        0.0
    } else {
        let q = kmeans(&points, d, classes, KMEANS_ITERS, seed)?;
        -mutual_information(&q, labels)
    };
    Ok(FeatureMetrics {
        diversity,
        discriminability: linear_probe_accuracy(&points, d, labels, classes, PROBE_STEPS)?,
        degenerate,
    })
}

/// Diversity (`-MI` of k-means clusters vs labels) and discriminability
/// (linear probe accuracy) of the mean feature labels.
pub fn diversity_discriminability(
    set: &FeatureLabelSet,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<FeatureMetrics> {
    feature_metrics(&set.mean_labels(), labels, classes, seed)
}
