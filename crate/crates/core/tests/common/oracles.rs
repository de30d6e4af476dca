//! Brute-force selection rules in exact integer arithmetic.

use drupi_core::coreset::{forgetting_events, select_herding, select_kcenter};
use drupi_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer points of one instance plus class labels.
#[derive(Clone, Debug)]
pub struct Instance {
    pub points: Vec<Vec<i64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Instance {
    fn pool(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn tensor(&self) -> Tensor {
        let d = self.points[0].len();
        Tensor::new(
            vec![self.points.len(), d],
            self.points.iter().flatten().map(|&v| v as f32).collect(),
        )
        .unwrap()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes).map(|c| self.pool(c).len()).collect()
    }
}

fn sq(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Step `k` picks the unchosen point whose inclusion puts the running mean
/// closest to the class mean; compared as `||k*S - n*(A + x)||^2`.
pub fn herding_oracle(inst: &Instance, counts: &[usize]) -> Vec<usize> {
    let d = inst.points[0].len();
    let mut out = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        let pool = inst.pool(c);
        let n = pool.len() as i64;
        let s: Vec<i64> = (0..d).map(|j| pool.iter().map(|&i| inst.points[i][j]).sum()).collect();
        let mut acc = vec![0i64; d];
        let mut chosen: Vec<usize> = Vec::new();
        for step in 1..=k as i64 {
            let target: Vec<i64> = s.iter().map(|v| step * v).collect();
            let mut best: Option<(usize, i64)> = None;
            for &i in &pool {
                if chosen.contains(&i) {
                    continue;
                }
                let cand: Vec<i64> = (0..d).map(|j| n * (acc[j] + inst.points[i][j])).collect();
                let key = sq(&target, &cand);
                if best.is_none_or(|(_, b)| key < b) {
                    best = Some((i, key));
                }
            }
            let (i, _) = best.unwrap();
            for j in 0..d {
                acc[j] += inst.points[i][j];
            }
            chosen.push(i);
        }
        out.extend(chosen);
    }
    out
}

/// Seed at the point nearest the class mean, then farthest-point traversal.
pub fn kcenter_oracle(inst: &Instance, counts: &[usize]) -> Vec<usize> {
    let d = inst.points[0].len();
    let mut out = Vec::new();
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let pool = inst.pool(c);
        let n = pool.len() as i64;
        let s: Vec<i64> = (0..d).map(|j| pool.iter().map(|&i| inst.points[i][j]).sum()).collect();
        let mut chosen = vec![*pool
            .iter()
            .min_by_key(|&&i| {
                let scaled: Vec<i64> = inst.points[i].iter().map(|v| n * v).collect();
                (sq(&scaled, &s), i)
            })
            .unwrap()];
        while chosen.len() < k {
            let next = *pool
                .iter()
                .filter(|i| !chosen.contains(i))
                .max_by_key(|&&i| {
                    let m = chosen.iter().map(|&s| sq(&inst.points[i], &inst.points[s])).min().unwrap();
                    // larger distance wins; among equals the lower index
                    (m, std::cmp::Reverse(i))
                })
                .unwrap();
            chosen.push(next);
        }
        out.extend(chosen);
    }
    out
}

fn sequences(values: &[Vec<i64>], len: usize) -> Vec<Vec<Vec<i64>>> {
    (0..len).fold(vec![Vec::new()], |acc, _| {
        acc.iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect()
    })
}

/// Every 1-D instance of up to 6 points over {0,1,2,3}, every 2-D instance
/// of up to 4 points over {0,1,2}^2, and random 2-D instances of 5 or 6
/// points (some split across two classes).
pub fn small_instances() -> Vec<Instance> {
    let mut out = Vec::new();
    let one_d: Vec<Vec<i64>> = (0..4).map(|v| vec![v]).collect();
    for n in 1..=6 {
        for pts in sequences(&one_d, n) {
            out.push(Instance { labels: vec![0; n], points: pts, classes: 1 });
        }
    }
    let two_d: Vec<Vec<i64>> = (0..3).flat_map(|x| (0..3).map(move |y| vec![x, y])).collect();
    for n in 1..=4 {
        for pts in sequences(&two_d, n) {
            out.push(Instance { labels: vec![0; n], points: pts, classes: 1 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for t in 0..2000 {
        let n = rng.random_range(5..=6);
        let points: Vec<Vec<i64>> =
            (0..n).map(|_| vec![rng.random_range(-3..=3), rng.random_range(-3..=3)]).collect();
        let (labels, classes) = if t % 2 == 0 {
            (vec![0; n], 1)
        } else {
            // both classes nonempty
            let mut l: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            l[0] = 0;
            l[1] = 1;
            (l, 2)
        };
        out.push(Instance { points, labels, classes });
    }
    out
}

/// Runs both selectors against the oracles on every instance and every
/// per-class count vector from all-ones to full. Returns (checked, mismatches).
pub fn selection_mismatches() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for inst in small_instances() {
        let sizes = inst.class_sizes();
        let feats = inst.tensor();
        let max = *sizes.iter().max().unwrap();
        for ipc in 1..=max {
            let counts: Vec<usize> = sizes.iter().map(|&s| s.min(ipc)).collect();
            let h = select_herding(&feats, &inst.labels, &counts).unwrap();
            let k = select_kcenter(&feats, &inst.labels, &counts).unwrap();
            checked += 2;
            if h != herding_oracle(&inst, &counts) {
                bad.push(format!("herding {:?} {:?} counts {counts:?}", inst.points, inst.labels));
            }
            if k != kcenter_oracle(&inst, &counts) {
                bad.push(format!("kcenter {:?} {:?} counts {counts:?}", inst.points, inst.labels));
            }
        }
    }
    (checked, bad)
}

/// Direct count of correct-to-wrong transitions for one example.
pub fn count_forgets(seq: &[bool]) -> usize {
    let mut n = 0;
    for i in 1..seq.len() {
        if seq[i - 1] && !seq[i] {
            n += 1;
        }
    }
    n
}

/// Scripted sequences with hand-counted answers, then random ones against
/// the direct count. Returns (checked, mismatches).
pub fn forgetting_mismatches() -> (usize, Vec<String>) {
    let t = true;
    let f = false;
    let scripted: Vec<(Vec<bool>, usize)> = vec![
        (vec![t, t, t, t], 0),
        (vec![f, f, f], 0),
        (vec![t, f, t, f], 2),
        (vec![f, t, f], 1),
        (vec![t, t, f, f, t], 1),
        (vec![f, t, t, f, t, f], 2),
        (vec![t, f], 1),
    ];
    let mut checked = 0;
    let mut bad = Vec::new();
    // one example per column
    let epochs = scripted.iter().map(|(s, _)| s.len()).max().unwrap();
    for (seq, want) in &scripted {
        let history: Vec<Vec<bool>> = seq.iter().map(|&b| vec![b]).collect();
        let got = forgetting_events(&history)[0];
        checked += 1;
        if got != *want {
            bad.push(format!("{seq:?}: got {got}, want {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let e = rng.random_range(2..=epochs + 3);
        let history: Vec<Vec<bool>> = (0..e).map(|_| (0..n).map(|_| rng.random_bool(0.6)).collect()).collect();
        let got = forgetting_events(&history);
        for i in 0..n {
            let col: Vec<bool> = history.iter().map(|h| h[i]).collect();
            checked += 1;
            if got[i] != count_forgets(&col) {
                bad.push(format!("{col:?}: got {}", got[i]));
            }
        }
    }
    (checked, bad)
}
