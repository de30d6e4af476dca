use serde::{Deserialize, Serialize};

use super::{pool_attention_on_tape, Aggregation, AttentionKind};
use crate::error::{Error, Result};
use crate::nn::BoundModel;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Weights of the combined loss. Every weight must be finite and `>= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrupiLossConfig {
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f32,
    #[serde(default = "default_lambda_task")]
    pub lambda_task: f32,
    #[serde(default)]
    pub lambda_soft: f32,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Optional contrastive term between model features and feature labels.
    #[serde(default)]
    pub lambda_nce: f32,
    #[serde(default = "default_nce_temperature")]
    pub nce_temperature: f32,
}

fn default_lambda_reg() -> f32 {
    0.5
}

fn default_lambda_task() -> f32 {
    0.1
}

fn default_nce_temperature() -> f32 {
    0.1
}

impl Default for DrupiLossConfig {
    fn default() -> Self {
        DrupiLossConfig {
            lambda_reg: default_lambda_reg(),
            lambda_task: default_lambda_task(),
            lambda_soft: 0.0,
            aggregation: Aggregation::Average,
            lambda_nce: 0.0,
            nce_temperature: default_nce_temperature(),
        }
    }
}

impl DrupiLossConfig {
    /// Plain cross-entropy.
    pub fn none() -> Self {
        DrupiLossConfig {
            lambda_reg: 0.0,
            lambda_task: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_task", self.lambda_task),
            ("lambda_soft", self.lambda_soft),
            ("lambda_nce", self.lambda_nce),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {w}")));
            }
        }
        if !(self.nce_temperature > 0.0) {
            return Err(Error::config("nce_temperature", "must be > 0"));
        }
        Ok(())
    }

    /// Whether any term needs feature or attention labels.
    pub fn uses_features(&self) -> bool {
        self.lambda_reg > 0.0 || self.lambda_task > 0.0 || self.lambda_nce > 0.0
    }

    /// The task term reads feature labels through the classifier head, which
    /// only accepts final-block features; it is dropped for other taps.
    pub fn for_tap(&self, tap: usize, depth: usize) -> Self {
        let mut c = self.clone();
        if tap != depth {
            c.lambda_task = 0.0;
        }
        c
    }
}

/// Regression target for the privileged terms of one batch.
#[derive(Clone, Copy, Debug)]
pub enum RegTarget {
    None,
    /// Aggregated feature labels `[B, ...]`.
    Features(Var),
    /// Pooled labels `[B, 1, H, W]` or `[B, Ch, 1, 1]`.
    Attention { kind: AttentionKind, labels: Var },
}

pub struct LossInputs<'a> {
    pub x: Var,
    pub labels: &'a [usize],
    pub target: RegTarget,
    /// Teacher distributions `[B, C]`.
    pub soft: Option<Var>,
}

/// Record of the pooling applied to model features under attention supervision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolingRecord {
    pub kind: AttentionKind,
    pub model_shape: Vec<usize>,
    pub pooled_shape: Vec<usize>,
    pub label_shape: Vec<usize>,
}

/// Loss nodes. Optional terms are already multiplied by their weight.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub reg: Option<Var>,
    pub task: Option<Var>,
    pub soft: Option<Var>,
    pub nce: Option<Var>,
    /// Model features at the tap.
    pub features: Var,
    pub logits: Var,
    pub pooling: Option<PoolingRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub task: f64,
    pub soft: f64,
    pub nce: f64,
}

impl LossComponents {
    pub fn sum_of_parts(&self) -> f64 {
        self.cls + self.reg + self.task + self.soft + self.nce
    }
}

impl LossTerms {
    pub fn components(&self, g: &Graph) -> LossComponents {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0] as f64);
        LossComponents {
            total: v(Some(self.total)),
            cls: v(Some(self.cls)),
            reg: v(self.reg),
            task: v(self.task),
            soft: v(self.soft),
            nce: v(self.nce),
        }
    }
}

/// Maps stored feature labels into the model's feature space.
pub type AlignFn<'a> = &'a dyn Fn(&mut Graph, Var) -> Result<Var>;

/// `L_cls + lambda_reg * mse(f, psi(x)) + lambda_task * ce(kappa(f), y)
/// + lambda_soft * KL(soft || softmax(logits)) [+ lambda_nce * InfoNCE]`.
///
/// Terms with weight zero are not built, so an all-zero config yields the
/// same graph as plain cross-entropy.
pub fn drupi_loss(
    g: &mut Graph,
    model: &BoundModel,
    inp: &LossInputs<'_>,
    cfg: &DrupiLossConfig,
    tap: usize,
    align: Option<AlignFn<'_>>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let (f, z) = model.forward_split(g, inp.x, tap)?;
    let cls = g.cross_entropy(z, inp.labels)?;
    let mut total = cls;
    let mut out = LossTerms {
        total,
        cls,
        reg: None,
        task: None,
        soft: None,
        nce: None,
        features: f,
        logits: z,
        pooling: None,
    };

    if cfg.uses_features() {
        match inp.target {
            RegTarget::None => {
                return Err(Error::invalid(
                    "nonzero lambda_reg/lambda_task/lambda_nce without feature labels",
                ))
            }
            RegTarget::Features(t) => {
                let t = match align {
                    Some(a) => a(g, t)?,
                    None => t,
                };
                if g.shape(t) != g.shape(f) {
                    return Err(Error::shape(
                        t.id(),
                        format!(
                            "feature labels {:?} vs model features {:?}; an aligner is required",
                            g.shape(t),
                            g.shape(f)
                        ),
                    ));
                }
                if cfg.lambda_reg > 0.0 {
                    let r = g.mse(t, f)?;
                    out.reg = Some(g.scale(r, cfg.lambda_reg)?);
                }
                if cfg.lambda_task > 0.0 {
                    let zt = model.classify(g, t, tap)?;
                    let c = g.cross_entropy(zt, inp.labels)?;
                    out.task = Some(g.scale(c, cfg.lambda_task)?);
                }
                if cfg.lambda_nce > 0.0 {
                    let c = info_nce(g, f, t, cfg.nce_temperature)?;
                    out.nce = Some(g.scale(c, cfg.lambda_nce)?);
                }
            }
            RegTarget::Attention { kind, labels } => {
                if cfg.lambda_task > 0.0 || cfg.lambda_nce > 0.0 {
                    return Err(Error::invalid(
                        "attention labels support only the regression term",
                    ));
                }
                let pooled = pool_attention_on_tape(g, f, kind)?;
                out.pooling = Some(PoolingRecord {
                    kind,
                    model_shape: g.shape(f).to_vec(),
                    pooled_shape: g.shape(pooled).to_vec(),
                    label_shape: g.shape(labels).to_vec(),
                });
                let r = g.mse(labels, pooled)?;
                out.reg = Some(g.scale(r, cfg.lambda_reg)?);
            }
        }
    }

    if cfg.lambda_soft > 0.0 {
        let p = inp
            .soft
            .ok_or_else(|| Error::invalid("nonzero lambda_soft without soft labels"))?;
        let ce = g.soft_cross_entropy(z, p)?;
        // KL = CE - H(p); H(p) is constant in the model
        let pv = g.value(p);
        let n = pv.shape()[0] as f64;
        let h: f64 = -pv
            .data()
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q as f64 * (q as f64).ln())
            .sum::<f64>()
            / n;
        let kl = g.shift(ce, -(h as f32))?;
        out.soft = Some(g.scale(kl, cfg.lambda_soft)?);
    }

    for term in [out.reg, out.task, out.soft, out.nce].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    out.total = total;
    Ok(out)
}

fn row_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let n = g.row_sum(sq)?;
    let n = g.shift(n, 1e-8)?;
    let inv = g.powf(n, -0.5)?;
    g.mul(x, inv)
}

/// InfoNCE with the matching feature label as the positive for each row.
fn info_nce(g: &mut Graph, f: Var, t: Var, temperature: f32) -> Result<Var> {
    let b = g.shape(f)[0];
    let ff = g.flatten(f)?;
    let tf = g.flatten(t)?;
    let a = row_normalize(g, ff)?;
    let c = row_normalize(g, tf)?;
    let ct = g.transpose(c)?;
    let sim = g.matmul(a, ct)?;
    let sim = g.scale(sim, 1.0 / temperature)?;
    let diag: Vec<usize> = (0..b).collect();
    g.cross_entropy(sim, &diag)
}

/// Convenience for callers that hold feature labels as a plain tensor.
pub fn constant_target(g: &mut Graph, t: &Tensor) -> RegTarget {
    RegTarget::Features(g.constant(t.clone()))
}
