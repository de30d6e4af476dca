//! Experiment runner behind the `drupi` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use drupi_core::data::{load_reduced, read_header, save_reduced};
use drupi_core::experiment::{
    evaluate_reduced, for_seeds, prepare, privileged_rows, build_reduced, ExperimentConfig,
    Prepared, SeedResult,
};
use drupi_core::lupi::{mean_std, EvalReport};
use drupi_core::privileged::feature_metrics;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const AGGREGATE: &str = "aggregate";

/// Parameters a sweep may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    LambdaTask,
    LambdaReg,
    NFeat,
    Tap,
}

impl FromStr for Knob {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lambda_task" => Knob::LambdaTask,
            "lambda_reg" => Knob::LambdaReg,
            "n_feat" => Knob::NFeat,
            "tap" => Knob::Tap,
            _ => bail!("unknown sweep parameter `{s}` (expected lambda_task, lambda_reg, n_feat or tap)"),
        })
    }
}

/// One swept parameter with its values, written `name=v1,v2,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub knob: Knob,
    pub values: Vec<f64>,
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, vals) = s
            .split_once('=')
            .with_context(|| format!("grid axis `{s}` must look like name=v1,v2"))?;
        let knob: Knob = name.trim().parse()?;
        let values = vals
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad value `{v}` for {name}"))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            bail!("grid axis `{name}` has no values");
        }
        if matches!(knob, Knob::NFeat | Knob::Tap)
            && values.iter().any(|v| v.fract() != 0.0 || *v < 0.0)
        {
            bail!("{name} takes non-negative integers");
        }
        Ok(Axis { knob, values })
    }
}

/// Cartesian product of the axes, first axis slowest.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<(Knob, f64)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.knob, v));
                    q
                })
            })
            .collect()
    })
}

pub fn apply_point(base: &ExperimentConfig, point: &[(Knob, f64)]) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    for &(knob, v) in point {
        match knob {
            Knob::LambdaTask => cfg.loss.lambda_task = v as f32,
            Knob::LambdaReg => cfg.loss.lambda_reg = v as f32,
            Knob::NFeat => cfg.privileged.n_feat = v as usize,
            Knob::Tap => cfg.privileged.tap = Some(v as usize),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

/// Applies command-line overrides on top of the file.
pub fn resolve(mut cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A row of the summary CSV.
#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub config_hash: String,
    pub seed: String,
    pub init: String,
    pub backend: String,
    pub lambda_reg: f32,
    pub lambda_task: f32,
    pub n_feat: usize,
    pub tap: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub grad_cosine: f64,
    pub grad_cosine_without: f64,
    pub diversity: f64,
    pub discriminability: f64,
    pub status: String,
    /// Wall-clock time; the only column allowed to differ between reruns.
    pub wall_ms: u128,
}

impl Row {
    fn base(cfg: &ExperimentConfig, hash: &str, seed: String) -> Row {
        Row {
            config_hash: hash.to_string(),
            seed,
            init: cfg.reduction.init.name().to_string(),
            backend: cfg.synthesis.backend.name().to_string(),
            lambda_reg: cfg.loss.lambda_reg,
            lambda_task: cfg.loss.lambda_task,
            n_feat: cfg.privileged.n_feat,
            tap: cfg.tap(),
            accuracy: f64::NAN,
            accuracy_std: f64::NAN,
            grad_cosine: f64::NAN,
            grad_cosine_without: f64::NAN,
            diversity: f64::NAN,
            discriminability: f64::NAN,
            status: "ok".into(),
            wall_ms: 0,
        }
    }
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Outcome of one configuration over all its seeds.
pub struct PointOutcome {
    pub rows: Vec<Row>,
    pub failed: usize,
}

/// Runs every seed of `cfg`, writes its artifacts into `dir` and returns
/// the per-seed rows followed by the aggregate row.
pub fn run_point(cfg: &ExperimentConfig, prep: &Prepared, dir: &Path) -> Result<PointOutcome> {
    let hash = cfg.config_hash()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let started = Instant::now();
    let results = for_seeds(&cfg.seeds, |seed| {
        let t = Instant::now();
        let r = build_reduced(cfg, prep, seed).and_then(|ds| evaluate_reduced(cfg, prep, ds, seed));
        (seed, r, t.elapsed().as_millis())
    });
    let mut rows = Vec::with_capacity(results.len() + 1);
    let mut ok: Vec<&SeedResult> = Vec::new();
    let mut failed = 0;
    for (seed, r, ms) in &results {
        let mut row = Row::base(cfg, &hash, seed.to_string());
        row.wall_ms = *ms;
        match r {
            Ok(res) => {
                write_seed_artifacts(dir, res)?;
                row.accuracy = res.accuracy;
                row.accuracy_std = 0.0;
                row.grad_cosine = res.grad_cosine;
                row.grad_cosine_without = res.grad_cosine_without;
                row.diversity = res.diversity;
                row.discriminability = res.discriminability;
                ok.push(res);
            }
            Err(e) => {
                failed += 1;
                row.status = format!("error: {e}");
            }
        }
        rows.push(row);
    }
    let mut agg = Row::base(cfg, &hash, AGGREGATE.into());
    let accs: Vec<f64> = ok.iter().map(|r| r.accuracy).collect();
    (agg.accuracy, agg.accuracy_std) = mean_std(&accs);
    agg.grad_cosine = nan_mean(ok.iter().map(|r| r.grad_cosine));
    agg.grad_cosine_without = nan_mean(ok.iter().map(|r| r.grad_cosine_without));
    agg.diversity = nan_mean(ok.iter().map(|r| r.diversity));
    agg.discriminability = nan_mean(ok.iter().map(|r| r.discriminability));
    agg.wall_ms = started.elapsed().as_millis();
    if failed > 0 {
        agg.status = format!("{failed} of {} seeds failed", results.len());
    }
    let mut report = EvalReport::from_runs(
        ok.iter().map(|r| r.seed).collect(),
        accs,
        ok.iter().map(|r| r.trace.clone()).collect(),
    );
    report.grad_cosine = ok.iter().map(|r| r.grad_cosine).collect();
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    rows.push(agg);
    Ok(PointOutcome { rows, failed })
}

fn write_seed_artifacts(dir: &Path, res: &SeedResult) -> Result<()> {
    save_reduced(&res.dataset, &dir.join(format!("seed-{}.drupi", res.seed)))?;
    let mut report = EvalReport::from_runs(vec![res.seed], vec![res.accuracy], vec![res.trace.clone()]);
    report.grad_cosine = vec![res.grad_cosine];
    fs::write(
        dir.join(format!("seed-{}.report.json", res.seed)),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `run`: one configuration. Returns the number of failed seeds.
pub fn run(cfg: &ExperimentConfig) -> Result<usize> {
    let prep = prepare(cfg)?;
    let out = run_point(cfg, &prep, &cfg.out)?;
    write_summary(&cfg.out.join(SUMMARY_FILE), &out.rows)?;
    Ok(out.failed)
}

/// `sweep`: every grid point shares the prepared data and the seeds.
/// Returns the number of failed seeds over all points.
pub fn sweep(base: &ExperimentConfig, axes: &[Axis]) -> Result<usize> {
    let points = grid_points(axes);
    if axes.is_empty() || points.is_empty() {
        bail!("sweep grid is empty");
    }
    let configs = points
        .iter()
        .map(|p| apply_point(base, p))
        .collect::<Result<Vec<_>>>()?;
    let prep = prepare(base)?;
    let outcomes: Vec<Result<PointOutcome>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| run_point(cfg, &prep, &base.out.join(format!("point-{i}"))))
        .collect();
    // single writer: rows are emitted in grid order once every point is done
    let mut rows = Vec::new();
    let mut failed = 0;
    for (cfg, o) in configs.iter().zip(outcomes) {
        match o {
            Ok(o) => {
                failed += o.failed;
                rows.extend(o.rows);
            }
            Err(e) => {
                failed += cfg.seeds.len();
                let mut r = Row::base(cfg, &cfg.config_hash()?, AGGREGATE.into());
                r.status = format!("error: {e}");
                rows.push(r);
            }
        }
    }
    write_summary(&base.out.join(SUMMARY_FILE), &rows)?;
    Ok(failed)
}

pub fn inspect(path: &Path) -> Result<String> {
    Ok(serde_json::to_string_pretty(&read_header(path)?)?)
}

#[derive(Debug, Serialize)]
pub struct MetricsOut {
    pub diversity: f64,
    pub discriminability: f64,
    pub degenerate: bool,
}

pub fn metrics(path: &Path, seed: u64) -> Result<MetricsOut> {
    let ds = load_reduced(path)?;
    let rows = privileged_rows(&ds).context("container has no feature or attention labels")?;
    let m = feature_metrics(&rows, &ds.labels, ds.classes, seed)?;
    Ok(MetricsOut { diversity: m.diversity, discriminability: m.discriminability, degenerate: m.degenerate })
}
