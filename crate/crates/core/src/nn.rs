//! Model zoo with an explicit feature-extractor / classifier split.
//!
//! Every model is `logits = classifier(features_depth(x))`. Intermediate
//! feature maps can be tapped at any block `1..=depth`.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{GradMap, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter (or parameter-gradient) tensors.
pub type Params = BTreeMap<String, Tensor>;

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// conv3x3 -> instance-norm -> relu -> avg-pool 2x2, per block.
    Convnet,
    /// dense -> relu, per block.
    Mlp,
    /// conv5x5 -> relu -> max-pool 2x2, per block.
    LenetLike,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" => Ok(Family::Convnet),
            "mlp" => Ok(Family::Mlp),
            "lenet-like" | "lenet" => Ok(Family::LenetLike),
            other => Err(Error::Spec(format!("unknown model family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    /// Channels per conv block, or hidden units per dense block.
    pub width: usize,
    /// `[channels, height, width]` of one input example.
    pub input: [usize; 3],
    pub classes: usize,
}

impl ModelSpec {
    pub fn convnet(depth: usize, width: usize, input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            family: Family::Convnet,
            depth,
            width,
            input,
            classes,
        }
    }

    pub fn mlp(depth: usize, width: usize, input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            family: Family::Mlp,
            depth,
            width,
            input,
            classes,
        }
    }

    pub fn lenet(depth: usize, width: usize, input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            family: Family::LenetLike,
            depth,
            width,
            input,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Spec("depth must be at least 1".into()));
        }
        if self.width == 0 || self.classes < 2 || self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!(
                "width, input dims must be positive and classes >= 2: {self:?}"
            )));
        }
        if self.family != Family::Mlp {
            let div = 1usize << self.depth;
            if self.input[1] % div != 0 || self.input[2] % div != 0 {
                return Err(Error::Spec(format!(
                    "input {}x{} not divisible by 2^{} poolings",
                    self.input[1], self.input[2], self.depth
                )));
            }
        }
        Ok(())
    }

    fn kernel(&self) -> usize {
        match self.family {
            Family::LenetLike => 5,
            _ => 3,
        }
    }

    /// Per-example shape of the features emitted at block `tap`.
    pub fn feature_shape(&self, tap: usize) -> Result<Vec<usize>> {
        if tap == 0 || tap > self.depth {
            return Err(Error::Spec(format!(
                "tap {tap} outside 1..={}",
                self.depth
            )));
        }
        Ok(match self.family {
            Family::Mlp => vec![self.width],
            _ => vec![
                self.width,
                self.input[1] >> tap,
                self.input[2] >> tap,
            ],
        })
    }

    pub fn feature_dim(&self, tap: usize) -> Result<usize> {
        Ok(self.feature_shape(tap)?.iter().product())
    }

    /// Ordered `(name, shape, fan_in)` of every parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let [ch, h, w] = self.input;
        let mut in_dim = ch * h * w;
        let mut in_ch = ch;
        for b in 1..=self.depth {
            match self.family {
                Family::Mlp => {
                    out.push((format!("block{b}.weight"), vec![in_dim, self.width], in_dim));
                    out.push((format!("block{b}.bias"), vec![self.width], in_dim));
                    in_dim = self.width;
                }
                _ => {
                    let k = self.kernel();
                    let fan = in_ch * k * k;
                    out.push((format!("block{b}.weight"), vec![self.width, in_ch, k, k], fan));
                    out.push((format!("block{b}.bias"), vec![self.width], fan));
                    in_ch = self.width;
                }
            }
        }
        let d = self.feature_dim(self.depth).unwrap_or(0);
        out.push(("classifier.weight".into(), vec![d, self.classes], d));
        out.push(("classifier.bias".into(), vec![self.classes], d));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Params,
    pub seed: u64,
}

/// Weights ~ U(-b, b) with `b = sqrt(6 / fan_in)` for hidden layers and
/// `b = sqrt(3 / fan_in)` for the classifier; biases start at zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = rng::derive(seed, rng::stream::MODEL_INIT, 0);
    let mut params = Params::new();
    for (name, shape, fan_in) in spec.param_layout() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let gain = if name.starts_with("classifier") { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, t);
    }
    Ok(ModelState {
        spec: spec.clone(),
        params,
        seed,
    })
}

/// `theta <- theta - lr * grad`, elementwise.
pub fn sgd_step(state: &ModelState, grads: &Params, lr: f32) -> Result<ModelState> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let mut next = state.clone();
    for (name, p) in next.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
        p.axpy(-lr, g)?;
    }
    Ok(next)
}

/// Collects gradients of bound parameters by name.
pub fn named_grads(model: &BoundModel, grads: &GradMap) -> Result<Params> {
    model
        .vars()
        .iter()
        .map(|(k, &v)| {
            grads
                .get(v)
                .cloned()
                .map(|t| (k.clone(), t))
                .ok_or_else(|| Error::invalid(format!("no gradient for `{k}`")))
        })
        .collect()
}

/// One SGD step on the mean cross-entropy of a batch. Returns the updated
/// state and the loss before the step.
pub fn ce_step(state: &ModelState, x: &Tensor, labels: &[usize], lr: f32) -> Result<(ModelState, f64)> {
    let mut g = Graph::new();
    let m = state.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let (_, z) = m.forward_split(&mut g, xv, state.spec.depth)?;
    let loss = g.cross_entropy(z, labels)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss, &m.param_vars())?;
    Ok((sgd_step(state, &named_grads(&m, &grads)?, lr)?, value))
}

impl ModelState {
    /// Places the parameters on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundModel {
            spec: self.spec.clone(),
            vars,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Stable digest of the parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.params {
            h.update(k.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Tap features and logits for a batch `[N, C, H, W]`.
    pub fn forward_split(&self, x: &Tensor, tap: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (f, z) = m.forward_split(&mut g, xv, tap)?;
        Ok((g.value(f).clone(), g.value(z).clone()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_split(x, self.spec.depth)?.1)
    }

    /// Classifier applied to final-block feature labels `[N, ...feature shape]`.
    pub fn classify_feature(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let z = m.classify(&mut g, fv, self.spec.depth)?;
        Ok(g.value(z).clone())
    }

    /// Predicted class per example.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(argmax_rows(&z))
    }
}

pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    let c = *z.shape().last().unwrap_or(&1);
    z.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Parameters placed on a graph.
pub struct BoundModel {
    pub spec: ModelSpec,
    vars: BTreeMap<String, Var>,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::shape(
                x.id(),
                format!("input {s:?} does not match spec input {:?}", self.spec.input),
            ));
        }
        Ok(())
    }

    fn block(&self, g: &mut Graph, h: Var, b: usize) -> Result<Var> {
        let w = self.var(&format!("block{b}.weight"));
        let bias = self.var(&format!("block{b}.bias"));
        match self.spec.family {
            Family::Mlp => {
                let h = g.flatten(h)?;
                let h = g.linear(h, w, Some(bias))?;
                g.relu(h)
            }
            Family::Convnet => {
                let h = g.conv2d(h, w, 1)?;
                let bias = g.reshape(bias, &[1, self.spec.width, 1, 1])?;
                let h = g.add(h, bias)?;
                let h = g.instance_norm(h, INSTANCE_NORM_EPS)?;
                let h = g.relu(h)?;
                g.avg_pool2(h)
            }
            Family::LenetLike => {
                let h = g.conv2d(h, w, 2)?;
                let bias = g.reshape(bias, &[1, self.spec.width, 1, 1])?;
                let h = g.add(h, bias)?;
                let h = g.relu(h)?;
                g.max_pool2(h)
            }
        }
    }

    /// Returns `(features at tap, final-block features)`.
    pub fn features(&self, g: &mut Graph, x: Var, tap: usize) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        self.spec.feature_shape(tap)?;
        let mut h = x;
        let mut tapped = None;
        for b in 1..=self.spec.depth {
            h = self.block(g, h, b)?;
            if b == tap {
                tapped = Some(h);
            }
        }
        Ok((tapped.expect("tap validated"), h))
    }

    /// Returns `(features at tap, logits)`.
    pub fn forward_split(&self, g: &mut Graph, x: Var, tap: usize) -> Result<(Var, Var)> {
        let (f, last) = self.features(g, x, tap)?;
        let z = self.classify(g, last, self.spec.depth)?;
        Ok((f, z))
    }

    pub fn logits(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_split(g, x, self.spec.depth)?.1)
    }

    /// Classifier head on features taken at `tap`; only the final block's
    /// features are accepted.
    pub fn classify(&self, g: &mut Graph, f: Var, tap: usize) -> Result<Var> {
        if tap != self.spec.depth {
            return Err(Error::invalid(format!(
                "classifier consumes block-{} features, got tap {tap}",
                self.spec.depth
            )));
        }
        let want = self.spec.feature_shape(tap)?;
        let s = g.shape(f).to_vec();
        if s.len() != want.len() + 1 || s[1..] != want[..] {
            return Err(Error::shape(
                f.id(),
                format!("classifier input {s:?}, expected [N, {want:?}]"),
            ));
        }
        let flat = g.flatten(f)?;
        g.linear(
            flat,
            self.var("classifier.weight"),
            Some(self.var("classifier.bias")),
        )
    }
}
