//! One PASS/FAIL line per acceptance criterion.
//!
//! Exits nonzero only when a deterministic criterion (1-4, 10, 12) fails.
//! The desk-scale experiments (5-9, 11) report FAIL without failing the run:
//! their outcome is an empirical finding, not a correctness property.

mod common;

use common::datasets::{bit_identical, random_reduced};
use common::gradcheck::{check_model, check_primitive, model_cases, primitive_cases, CASES, TOLERANCE};
use common::oracles::{forgetting_mismatches, selection_mismatches};
use drupi_core::data::{decode, encode, make_blobs, BlobSpec, ReducedDataset};
use drupi_core::distill::{dc_outer_step, dc_plain_outer_step, BiLevelConfig};
use drupi_core::experiment::{for_seeds, prepare, run_seed, ExperimentConfig, Prepared, SeedResult};
use drupi_core::lupi::{train_lupi, TrainConfig};
use drupi_core::privileged::{
    constant_target, drupi_loss, pool_attention, Aggregation, AttentionKind, AttentionLabels,
    DrupiLossConfig, LossComponents, LossInputs,
};
use drupi_core::{init_model, rng, Error, Graph, ModelSpec, ModelState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs one check; a panic counts as a failure.
fn report(n: usize, check: impl FnOnce() -> Outcome) -> bool {
    let out = catch_unwind(AssertUnwindSafe(check))
        .unwrap_or_else(|e| Err(format!("panicked: {}", panic_text(&e))));
    match &out {
        Ok(d) => println!("PASS criterion {n}: {d}"),
        Err(d) => println!("FAIL criterion {n}: {d}"),
    }
    out.is_ok()
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn autodiff() -> Outcome {
    let t = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for case in primitive_cases() {
        for seed in 0..CASES {
            let (first, second) = check_primitive(&case, seed);
            checked += 1;
            for e in [first, second] {
                if !(e <= worst.0) {
                    worst = (e, format!("{} seed {seed}", case.name));
                }
            }
        }
    }
    for case in model_cases() {
        for seed in 0..CASES {
            let e = check_model(&case, seed);
            checked += 1;
            if !(e <= worst.0) {
                worst = (e, format!("{} seed {seed}", case.name));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst.0 < TOLERANCE && secs < 60.0,
        format!("{checked} cases, worst rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn dc_degeneracy() -> Outcome {
    let t = Instant::now();
    let spec = BlobSpec { classes: 3, per_class: 20, size: 16, sigma: 0.05, ..BlobSpec::default() };
    let dt = make_blobs(&spec, 1).unwrap();
    let idx: Vec<usize> = (0..3).flat_map(|c| dt.class_indices(c)[..2].to_vec()).collect();
    let ds = ReducedDataset::from_labeled(&dt.subset(&idx).unwrap());
    let model = init_model(&ModelSpec::convnet(2, 8, [1, 16, 16], 3), 5).unwrap();
    let cfg = BiLevelConfig { outer_steps: 2, inner_steps: 3, batch_real: 16, update_images: true, ..BiLevelConfig::default() };
    let mut r1 = rng::derive(3, rng::stream::BATCHING, 0);
    let mut r2 = rng::derive(3, rng::stream::BATCHING, 0);
    let (next, m1, _) = dc_outer_step(&dt, &ds, &model, &DrupiLossConfig::none(), 2, &cfg, &mut r1).unwrap();
    let (images, m2) = dc_plain_outer_step(&dt, &ds.images, &ds.labels, &model, &cfg, &mut r2).unwrap();
    let moved = bits(&next.images) != bits(&ds.images);
    let same_images = bits(&next.images) == bits(&images);
    let same_model = m1.params.iter().all(|(k, p)| bits(p) == bits(&m2.params[k]));
    ensure(
        moved && same_images && same_model,
        format!(
            "images identical {same_images}, inner model identical {same_model}, step moved images {moved}, {:.2}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.shape()[1];
    let mut d = Vec::with_capacity(t.numel());
    for row in t.data().chunks(c) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f32 = e.iter().sum();
        d.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

fn components(model: &ModelState, x: &Tensor, labels: &[usize], fstar: &Tensor, soft: &Tensor, cfg: &DrupiLossConfig) -> LossComponents {
    let mut g = Graph::new();
    let m = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let target = constant_target(&mut g, fstar);
    let soft = Some(g.constant(soft.clone()));
    let inp = LossInputs { x: xv, labels, target, soft };
    drupi_loss(&mut g, &m, &inp, cfg, model.spec.depth, None).unwrap().components(&g)
}

fn loss_algebra() -> Outcome {
    let spec = ModelSpec::mlp(2, 6, [1, 3, 3], 3);
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model = init_model(&spec, seed).unwrap();
        let x = random_tensor(&[4, 1, 3, 3], &mut r, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let fstar = random_tensor(&[4, 6], &mut r, 1.0);
        let p = softmax_rows(&random_tensor(&[4, 3], &mut r, 2.0));
        let cfg = DrupiLossConfig {
            lambda_reg: r.random_range(0.0..3.0),
            lambda_task: r.random_range(0.0..3.0),
            lambda_soft: r.random_range(0.0..3.0),
            lambda_nce: r.random_range(0.0..1.0),
            ..DrupiLossConfig::none()
        };
        let c = components(&model, &x, &labels, &fstar, &p, &cfg);
        worst = worst.max((c.total - c.sum_of_parts()).abs() / c.total.abs().max(1.0));
    }

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let model = init_model(&spec, 4).unwrap();
    let x = random_tensor(&[5, 1, 3, 3], &mut r, 1.0);
    let labels = [0, 1, 2, 1, 0];
    let p = softmax_rows(&random_tensor(&[5, 3], &mut r, 2.0));
    let (psi, _) = model.forward_split(&x, 2).unwrap();
    let reg_cfg = DrupiLossConfig { lambda_reg: 2.0, ..DrupiLossConfig::none() };
    let own = components(&model, &x, &labels, &psi, &p, &reg_cfg).reg;

    let fstar = random_tensor(&[5, 6], &mut r, 1.0);
    let zero = components(&model, &x, &labels, &fstar, &p, &DrupiLossConfig::none());
    let mut g = Graph::new();
    let m = model.bind(&mut g, true);
    let xv = g.constant(x);
    let (_, z) = m.forward_split(&mut g, xv, 2).unwrap();
    let ce = g.cross_entropy(z, &labels).unwrap();
    let plain = g.value(ce).data()[0] as f64;
    let reduces = zero.total == plain && (zero.reg, zero.task, zero.soft, zero.nce) == (0.0, 0.0, 0.0, 0.0);
    ensure(
        worst < 1e-6 && own == 0.0 && reduces,
        format!("200 random weightings, worst |total - parts| {worst:.1e}; L_reg at own features {own}; zero weights equal CE {reduces}"),
    )
}

fn selection_oracles() -> Outcome {
    let (sel, sel_bad) = selection_mismatches();
    let (fg, fg_bad) = forgetting_mismatches();
    let first = sel_bad.first().or(fg_bad.first()).cloned().unwrap_or_default();
    ensure(
        sel_bad.is_empty() && fg_bad.is_empty(),
        format!(
            "{sel} selections and {fg} forgetting counts checked, {} mismatches {first}",
            sel_bad.len() + fg_bad.len()
        ),
    )
}

fn attention_shapes() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let f = random_tensor(&[128, 16, 16], &mut r, 1.0);
    let channel = pool_attention(&f, AttentionKind::Channel).unwrap().shape().to_vec();
    let spatial = pool_attention(&f, AttentionKind::Spatial).unwrap().shape().to_vec();
    let mut ok = channel == [128, 1, 1] && spatial == [1, 16, 16];
    let mut seen = Vec::new();

    let spec = ModelSpec::convnet(2, 8, [1, 8, 8], 3);
    let dt = make_blobs(&BlobSpec { per_class: 2, size: 8, ..BlobSpec::default() }, 0).unwrap();
    let extractor = init_model(&spec, 1).unwrap();
    for kind in [AttentionKind::Spatial, AttentionKind::Channel] {
        let mut ds = ReducedDataset::from_labeled(&dt);
        let (feat, _) = extractor.forward_split(&ds.images, 2).unwrap();
        let labels = pool_attention(&feat, kind).unwrap();
        ds.attention = Some(AttentionLabels { kind, labels: labels.clone() });
        let cfg = DrupiLossConfig { lambda_reg: 0.5, ..DrupiLossConfig::none() };
        let t = train_lupi(&ds, &spec, 2, &cfg, &TrainConfig { epochs: 3, ..TrainConfig::default() }, 0).unwrap();
        match t.pooling {
            Some(rec) => {
                ok &= rec.kind == kind && rec.pooled_shape == labels.shape() && rec.label_shape == labels.shape();
                seen.push(format!("{kind:?} {:?}->{:?}", rec.model_shape, rec.pooled_shape));
            }
            None => {
                ok = false;
                seen.push(format!("{kind:?} unrecorded"));
            }
        }
    }
    ensure(
        ok,
        format!("128x16x16 pools to {channel:?} (channel) and {spatial:?} (spatial); training pooled {}", seen.join(", ")),
    )
}

fn serialization() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let (mut exact, mut rejected) = (0, 0);
    for _ in 0..1000 {
        let ds = random_reduced(&mut r);
        let mut bytes = encode(&ds).unwrap();
        if decode(&bytes).is_ok_and(|back| bit_identical(&ds, &back)) {
            exact += 1;
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let start = 10 + hlen;
        let at = r.random_range(start..bytes.len() - 4);
        bytes[at] ^= 1 << r.random_range(0..8);
        if matches!(decode(&bytes), Err(Error::Checksum { .. })) {
            rejected += 1;
        }
    }
    ensure(
        exact == 1000 && rejected == 1000,
        format!("{exact}/1000 round trips bit-exact, {rejected}/1000 payload corruptions rejected by CRC"),
    )
}

// ---- desk-scale experiments ----

struct Point {
    accs: Vec<f64>,
    results: Vec<SeedResult>,
    elapsed: Duration,
}

impl Point {
    fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len() as f64
    }

    fn sd(&self) -> f64 {
        let m = self.mean();
        let n = self.accs.len() as f64;
        (self.accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    fn metric(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        self.results.iter().map(f).sum::<f64>() / self.results.len() as f64
    }
}

fn run(cfg: &ExperimentConfig, prep: &Prepared) -> Point {
    let t = Instant::now();
    let results: Vec<SeedResult> = for_seeds(&cfg.seeds, |s| run_seed(cfg, prep, s).unwrap());
    Point { accs: results.iter().map(|r| r.accuracy).collect(), results, elapsed: t.elapsed() }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// `a` is no worse than `b` up to one standard error of the difference.
fn within_noise(a: &Point, b: &Point) -> (bool, f64) {
    let n = a.accs.len() as f64;
    let se = (a.sd().powi(2) / n + b.sd().powi(2) / n).sqrt();
    (a.mean() >= b.mean() - se, se)
}

/// Fails on more than one adjacent pair going the wrong way.
fn monotone(xs: &[f64], increasing: bool) -> bool {
    xs.windows(2).filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] }).count() <= 1
}

fn experiments() -> bool {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/blobs.toml");
    let base = ExperimentConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let t = Instant::now();
    let prep = prepare(&base).unwrap();
    let prep_time = t.elapsed();

    let learned = run(&base, &prep);
    let no_pi = run(&with(&|c| c.loss = DrupiLossConfig::none()), &prep);
    let assign = run(
        &with(&|c| {
            c.privileged.feature_init = drupi_core::experiment::FeatureSource::Assign;
            c.privileged.synthesize = false;
        }),
        &prep,
    );
    let mut all_pass = true;
    all_pass &= report(5, || {
        let secs = (prep_time + learned.elapsed + no_pi.elapsed + assign.elapsed).as_secs_f64();
        let (ga, gb) = (learned.mean() - no_pi.mean(), learned.mean() - assign.mean());
        ensure(
            ga >= 0.02 && gb >= 0.02 && secs < 600.0,
            format!(
                "learned {} vs no-PI {} (+{}) and assign {} (+{}), {secs:.0}s",
                pct(learned.mean()),
                pct(no_pi.mean()),
                pct(ga),
                pct(assign.mean()),
                pct(gb)
            ),
        )
    });
    all_pass &= report(6, || {
        let wins = learned.results.iter().filter(|r| r.grad_cosine >= r.grad_cosine_without).count();
        ensure(
            wins >= 4,
            format!(
                "{wins}/5 seeds, mean cosine {:.4} with PI vs {:.4} without",
                learned.metric(|r| r.grad_cosine),
                learned.metric(|r| r.grad_cosine_without)
            ),
        )
    });

    let grid = [0.0f32, 0.001, 0.1, 10.0];
    let task: Vec<Point> = grid
        .iter()
        .map(|&l| {
            run(
                &with(&|c| {
                    c.reduction.ipc = Some(2);
                    c.loss.lambda_task = l;
                }),
                &prep,
            )
        })
        .collect();
    all_pass &= report(7, || {
        let means: Vec<f64> = task.iter().map(Point::mean).collect();
        let disc: Vec<f64> = task.iter().map(|p| p.metric(|r| r.discriminability)).collect();
        let div: Vec<f64> = task.iter().map(|p| p.metric(|r| r.diversity)).collect();
        let interior = means[1].max(means[2]);
        let ends = means[0].max(means[3]);
        ensure(
            interior > ends && monotone(&disc, true) && monotone(&div, false),
            format!(
                "ipc 2, accuracy {:?} over lambda_task {grid:?}; discriminability {:?}; diversity {:?}",
                means.iter().map(|&m| pct(m)).collect::<Vec<_>>(),
                disc.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                div.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
            ),
        )
    });

    let tap1 = run(&with(&|c| c.privileged.tap = Some(1)), &prep);
    all_pass &= report(8, || {
        ensure(
            learned.mean() >= tap1.mean(),
            format!("final block {} vs first block {}", pct(learned.mean()), pct(tap1.mean())),
        )
    });

    let avg3 = run(&with(&|c| c.privileged.n_feat = 3), &prep);
    let pick3 = run(
        &with(&|c| {
            c.privileged.n_feat = 3;
            c.loss.aggregation = Aggregation::RandomPick;
        }),
        &prep,
    );
    all_pass &= report(9, || {
        let (a, se_a) = within_noise(&avg3, &learned);
        let (b, se_b) = within_noise(&avg3, &pick3);
        ensure(
            a && b,
            format!(
                "n_feat 3 average {} vs n_feat 1 {} (se {}), vs random-pick {} (se {})",
                pct(avg3.mean()),
                pct(learned.mean()),
                pct(se_a),
                pct(pick3.mean()),
                pct(se_b)
            ),
        )
    });

    let low = run(&with(&|c| c.loss.lambda_reg = 0.05), &prep);
    let high = run(&with(&|c| c.loss.lambda_reg = 5.0), &prep);
    all_pass &= report(11, || {
        let means = [low.mean(), learned.mean(), high.mean()];
        let range = means.iter().copied().fold(f64::MIN, f64::max) - means.iter().copied().fold(f64::MAX, f64::min);
        ensure(
            range < 0.05,
            format!(
                "accuracy {} / {} / {} at lambda_reg 0.05 / 0.5 / 5, range {} points",
                pct(means[0]),
                pct(means[1]),
                pct(means[2]),
                pct(range)
            ),
        )
    });
    all_pass
}

fn main() {
    let t = Instant::now();
    let mut hard = true;
    hard &= report(1, autodiff);
    hard &= report(2, dc_degeneracy);
    hard &= report(3, loss_algebra);
    hard &= report(4, selection_oracles);
    hard &= report(10, attention_shapes);
    hard &= report(12, serialization);
    let empirical = experiments();
    println!(
        "deterministic criteria {}, desk-scale experiments {}, {:.0}s",
        if hard { "all pass" } else { "FAILED" },
        if empirical { "all pass" } else { "not all pass" },
        t.elapsed().as_secs_f64()
    );
    if !hard {
        std::process::exit(1);
    }
}
