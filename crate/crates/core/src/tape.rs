//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation is evaluated eagerly and recorded as a node. Gradients are
//! computed by [`Graph::grad`], which records the backward pass as ordinary
//! nodes on the same tape. The resulting gradient variables can therefore be
//! differentiated again, which is what gradient matching needs: the distance
//! between two parameter gradients is itself differentiated with respect to
//! the synthetic inputs.
//!
//! Max-pool window choices are read from the forward node and treated as
//! constants when the backward pass is differentiated.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    Shift(Var, f32),
    Powf(Var, f32),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Step(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    BroadcastTo(Var, Vec<usize>),
    SumTo(Var, Vec<usize>),
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
    AvgPool2(Var),
    AvgUnpool2(Var),
    MaxPool2(Var),
    MaxScatter { grad: Var, pool: Var },
    MaxGather { grad: Var, pool: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Embed { x: Var, start: usize, total: usize },
}

impl Op {
    /// Inputs through which gradients flow.
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Shift(a, _) | Powf(a, _) | Exp(a) | Log(a) | Relu(a)
            | Sigmoid(a) | Permute(a, _) | Reshape(a, _) | BroadcastTo(a, _) | SumTo(a, _)
            | Im2Col(a, _) | Col2Im(a, _) | AvgPool2(a) | AvgUnpool2(a) | MaxPool2(a) => {
                vec![*a]
            }
            Step(_) => vec![],
            MaxScatter { grad, .. } | MaxGather { grad, .. } => vec![*grad],
            Concat(vs) => vs.clone(),
            Slice { x, .. } | Embed { x, .. } => vec![*x],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    argmax: Option<Arc<Vec<u32>>>,
}

/// Gradients keyed by the variable they were taken with respect to.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<Var, Tensor> {
        self.grads
    }
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn pool_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return None;
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    Some((numel(&shape[..r - 2]), h, w))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `len`. Vars pointing there
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            argmax: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that is never differentiated through.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value: t,
            argmax: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let (value, argmax) = self.eval(&op, id)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { node: id });
        }
        self.nodes.push(Node { op, value, argmax });
        Ok(Var(id))
    }

    fn eval(&self, op: &Op, id: usize) -> Result<(Tensor, Option<Arc<Vec<u32>>>)> {
        use Op::*;
        let v = |x: &Var| &self.nodes[x.0].value;
        let same = |a: &Var, b: &Var, what: &str| -> Result<()> {
            if v(a).shape() != v(b).shape() {
                return Err(Error::shape(
                    id,
                    format!("{what}: {:?} vs {:?}", v(a).shape(), v(b).shape()),
                ));
            }
            Ok(())
        };
        let t = |shape: Vec<usize>, data: Vec<f32>| -> Result<Tensor> {
            Tensor::new(shape, data).map_err(|e| Error::shape(id, e.to_string()))
        };
        let out = match op {
            Leaf | Const => {
                return Ok((self.nodes[id].value.clone(), None));
            }
            Add(a, b) => {
                same(a, b, "add")?;
                v(a).zip_map(v(b), |x, y| x + y)?
            }
            Sub(a, b) => {
                same(a, b, "sub")?;
                v(a).zip_map(v(b), |x, y| x - y)?
            }
            Mul(a, b) => {
                same(a, b, "mul")?;
                v(a).zip_map(v(b), |x, y| x * y)?
            }
            Neg(a) => v(a).map(|x| -x),
            Scale(a, c) => v(a).map(|x| x * c),
            Shift(a, c) => v(a).map(|x| x + c),
            Powf(a, p) => v(a).map(|x| x.powf(*p)),
            Exp(a) => v(a).map(f32::exp),
            Log(a) => v(a).map(f32::ln),
            Relu(a) => v(a).map(|x| x.max(0.0)),
            Step(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Sigmoid(a) => v(a).map(|x| 1.0 / (1.0 + (-x).exp())),
            MatMul(a, b) => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::shape(id, format!("matmul {sa:?} x {sb:?}")));
                }
                let data = kernels::matmul(v(a).data(), v(b).data(), sa[0], sa[1], sb[1]);
                t(vec![sa[0], sb[1]], data)?
            }
            Permute(a, perm) => {
                let s = v(a).shape();
                let mut seen = vec![false; s.len()];
                if perm.len() != s.len()
                    || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
                {
                    return Err(Error::shape(id, format!("permute {perm:?} of {s:?}")));
                }
                let data = kernels::permute(v(a).data(), s, perm);
                t(kernels::permuted_shape(s, perm), data)?
            }
            Reshape(a, shape) => t(shape.clone(), v(a).data().to_vec())?,
            BroadcastTo(a, target) => {
                let s = v(a).shape();
                if s.len() != target.len()
                    || s.iter().zip(target).any(|(&x, &y)| x != y && x != 1)
                {
                    return Err(Error::shape(id, format!("broadcast {s:?} to {target:?}")));
                }
                t(target.clone(), kernels::broadcast_to(v(a).data(), s, target))?
            }
            SumTo(a, target) => {
                let s = v(a).shape();
                if s.len() != target.len()
                    || s.iter().zip(target).any(|(&x, &y)| x != y && y != 1)
                {
                    return Err(Error::shape(id, format!("sum {s:?} to {target:?}")));
                }
                t(target.clone(), kernels::sum_to(v(a).data(), s, target))?
            }
            Im2Col(a, g) => {
                if v(a).shape() != [g.n, g.c, g.h, g.w] {
                    return Err(Error::shape(
                        id,
                        format!("im2col input {:?} vs geometry {g:?}", v(a).shape()),
                    ));
                }
                t(g.cols_shape().to_vec(), kernels::im2col(v(a).data(), *g))?
            }
            Col2Im(a, g) => {
                if v(a).shape() != g.cols_shape() {
                    return Err(Error::shape(
                        id,
                        format!("col2im input {:?} vs geometry {g:?}", v(a).shape()),
                    ));
                }
                t(vec![g.n, g.c, g.h, g.w], kernels::col2im(v(a).data(), *g))?
            }
            AvgPool2(a) | MaxPool2(a) => {
                let s = v(a).shape();
                let (planes, h, w) = pool_dims(s)
                    .filter(|&(_, h, w)| h % 2 == 0 && w % 2 == 0)
                    .ok_or_else(|| Error::shape(id, format!("2x2 pool of {s:?}")))?;
                let mut shape = s.to_vec();
                let r = shape.len();
                shape[r - 2] = h / 2;
                shape[r - 1] = w / 2;
                if let MaxPool2(_) = op {
                    let (data, arg) = kernels::maxpool2(v(a).data(), planes, h, w);
                    return Ok((t(shape, data)?, Some(Arc::new(arg))));
                }
                t(shape, kernels::avgpool2(v(a).data(), planes, h, w))?
            }
            AvgUnpool2(a) => {
                let s = v(a).shape();
                let (planes, h, w) =
                    pool_dims(s).ok_or_else(|| Error::shape(id, format!("unpool of {s:?}")))?;
                let mut shape = s.to_vec();
                let r = shape.len();
                shape[r - 2] = h * 2;
                shape[r - 1] = w * 2;
                t(shape, kernels::avgunpool2(v(a).data(), planes, h, w))?
            }
            MaxScatter { grad, pool } => {
                let (arg, in_shape) = self.pool_info(*pool, id)?;
                if v(grad).shape() != self.nodes[pool.0].value.shape() {
                    return Err(Error::shape(id, "max scatter gradient shape"));
                }
                let mut data = vec![0f32; numel(&in_shape)];
                for (&i, &g) in arg.iter().zip(v(grad).data()) {
                    data[i as usize] += g;
                }
                t(in_shape, data)?
            }
            MaxGather { grad, pool } => {
                let (arg, in_shape) = self.pool_info(*pool, id)?;
                if v(grad).shape() != in_shape.as_slice() {
                    return Err(Error::shape(id, "max gather gradient shape"));
                }
                let src = v(grad).data();
                let data = arg.iter().map(|&i| src[i as usize]).collect();
                t(self.nodes[pool.0].value.shape().to_vec(), data)?
            }
            Concat(vs) => {
                let first = vs
                    .first()
                    .ok_or_else(|| Error::shape(id, "concat of nothing"))?;
                let tail = &v(first).shape()[1..];
                let mut rows = 0;
                let mut data = Vec::new();
                for x in vs {
                    let s = v(x).shape();
                    if s.is_empty() || &s[1..] != tail {
                        return Err(Error::shape(id, format!("concat part {s:?}")));
                    }
                    rows += s[0];
                    data.extend_from_slice(v(x).data());
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(tail);
                t(shape, data)?
            }
            Slice { x, start, len } => {
                let s = v(x).shape();
                if s.is_empty() || *len == 0 || start + len > s[0] {
                    return Err(Error::shape(id, format!("slice {start}+{len} of {s:?}")));
                }
                let inner = numel(&s[1..]);
                let mut shape = s.to_vec();
                shape[0] = *len;
                t(shape, v(x).data()[start * inner..(start + len) * inner].to_vec())?
            }
            Embed { x, start, total } => {
                let s = v(x).shape();
                if s.is_empty() || start + s[0] > *total {
                    return Err(Error::shape(id, format!("embed {s:?} at {start} in {total}")));
                }
                let inner = numel(&s[1..]);
                let mut data = vec![0f32; total * inner];
                data[start * inner..(start + s[0]) * inner].copy_from_slice(v(x).data());
                let mut shape = s.to_vec();
                shape[0] = *total;
                t(shape, data)?
            }
        };
        Ok((out, None))
    }

    fn pool_info(&self, pool: Var, id: usize) -> Result<(Arc<Vec<u32>>, Vec<usize>)> {
        let node = &self.nodes[pool.0];
        match (&node.op, &node.argmax) {
            (Op::MaxPool2(src), Some(arg)) => {
                Ok((arg.clone(), self.nodes[src.0].value.shape().to_vec()))
            }
            _ => Err(Error::shape(id, "max scatter source is not a max-pool node")),
        }
    }

    /// Re-evaluates the tape with new leaf values and returns the value of `root`.
    ///
    /// Every recorded node is recomputed in order, so the tape must still be
    /// consistent with the new leaf shapes.
    pub fn forward(&mut self, bindings: &[(Var, Tensor)], root: Var) -> Result<Tensor> {
        for (v, t) in bindings {
            match self.nodes.get(v.0).map(|n| &n.op) {
                Some(Op::Leaf) => self.nodes[v.0].value = t.clone(),
                _ => return Err(Error::invalid(format!("node {} is not a leaf", v.0))),
            }
        }
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf | Op::Const) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let (value, argmax) = self.eval(&op, id)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { node: id });
            }
            self.nodes[id].value = value;
            self.nodes[id].argmax = argmax;
        }
        Ok(self.value(root).clone())
    }

    /// Records the backward pass of scalar `root` and returns one gradient
    /// variable per entry of `wrt`. The returned variables live on the tape
    /// and may be differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let shape = self.shape(root).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarRoot {
                node: root.0,
                shape,
            });
        }
        let n = root.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|x| relevant[x.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[root.0] {
            adj[root.0] = Some(self.constant(Tensor::ones(&shape)));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g, &relevant)? {
                adj[input.0] = Some(match adj[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(*w));
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    fn vjp(&mut self, out: Var, op: &Op, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let need = |x: &Var| relevant[x.0];
        let mut res = Vec::new();
        match op {
            Leaf | Const | Step(_) => {}
            Add(a, b) => {
                if need(a) {
                    res.push((*a, g));
                }
                if need(b) {
                    res.push((*b, g));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    res.push((*a, g));
                }
                if need(b) {
                    res.push((*b, self.neg(g)?));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    res.push((*a, self.mul(g, *b)?));
                }
                if need(b) {
                    res.push((*b, self.mul(g, *a)?));
                }
            }
            Neg(a) => res.push((*a, self.neg(g)?)),
            Scale(a, c) => res.push((*a, self.scale(g, *c)?)),
            Shift(a, _) => res.push((*a, g)),
            Powf(a, p) => {
                let d = self.powf(*a, p - 1.0)?;
                let d = self.scale(d, *p)?;
                res.push((*a, self.mul(g, d)?));
            }
            Exp(a) => res.push((*a, self.mul(g, out)?)),
            Log(a) => {
                let r = self.powf(*a, -1.0)?;
                res.push((*a, self.mul(g, r)?));
            }
            Relu(a) => {
                let m = self.push(Step(*a))?;
                res.push((*a, self.mul(g, m)?));
            }
            Sigmoid(a) => {
                let one_minus = self.neg(out)?;
                let one_minus = self.shift(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((*a, self.mul(g, d)?));
            }
            MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(*b)?;
                    res.push((*a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(*a)?;
                    res.push((*b, self.matmul(at, g)?));
                }
            }
            Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*a, self.permute(g, &inv)?));
            }
            Reshape(a, _) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.reshape(g, &s)?));
            }
            BroadcastTo(a, _) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.sum_to(g, &s)?));
            }
            SumTo(a, _) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.broadcast_to(g, &s)?));
            }
            Im2Col(a, geom) => res.push((*a, self.push(Col2Im(g, *geom))?)),
            Col2Im(a, geom) => res.push((*a, self.push(Im2Col(g, *geom))?)),
            AvgPool2(a) => res.push((*a, self.push(AvgUnpool2(g))?)),
            AvgUnpool2(a) => res.push((*a, self.push(AvgPool2(g))?)),
            MaxPool2(a) => res.push((*a, self.push(MaxScatter { grad: g, pool: out })?)),
            MaxScatter { grad, pool } => {
                res.push((*grad, self.push(MaxGather { grad: g, pool: *pool })?))
            }
            MaxGather { grad, pool } => {
                res.push((*grad, self.push(MaxScatter { grad: g, pool: *pool })?))
            }
            Concat(vs) => {
                let mut start = 0;
                for x in vs {
                    let len = self.shape(*x)[0];
                    if need(x) {
                        res.push((*x, self.push(Slice { x: g, start, len })?));
                    }
                    start += len;
                }
            }
            Slice { x, start, .. } => {
                let total = self.shape(*x)[0];
                res.push((
                    *x,
                    self.push(Embed {
                        x: g,
                        start: *start,
                        total,
                    })?,
                ));
            }
            Embed { x, start, .. } => {
                let len = self.shape(*x)[0];
                res.push((
                    *x,
                    self.push(Slice {
                        x: g,
                        start: *start,
                        len,
                    })?,
                ));
            }
        }
        Ok(res)
    }

    /// Numeric gradients of scalar `root`; the backward nodes are discarded.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Result<GradMap> {
        let mark = self.nodes.len();
        let vars = self.grad(root, wrt);
        let out = vars.map(|vars| {
            let grads = wrt
                .iter()
                .zip(vars)
                .map(|(w, g)| (*w, self.value(g).clone()))
                .collect();
            GradMap { grads }
        });
        self.truncate(mark);
        out
    }

    /// Gradient of `outer(grad(root, inner_wrt))` with respect to `outer_wrt`.
    ///
    /// `outer` receives the inner gradient variables and must return a scalar.
    pub fn grad_of_grad<F>(
        &mut self,
        root: Var,
        inner_wrt: &[Var],
        outer: F,
        outer_wrt: &[Var],
    ) -> Result<GradMap>
    where
        F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
    {
        let inner = self.grad(root, inner_wrt)?;
        let scalar = outer(self, &inner)?;
        self.backward(scalar, outer_wrt)
    }

    // ----- elementwise -----

    fn broadcast_pair(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(self.len(), format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let lift = |g: &mut Graph, v: Var, s: &[usize]| -> Result<Var> {
            if s == target.as_slice() {
                return Ok(v);
            }
            let v = if s.len() < target.len() {
                let mut padded = vec![1; target.len() - s.len()];
                padded.extend_from_slice(s);
                g.reshape(v, &padded)?
            } else {
                v
            };
            g.broadcast_to(v, &target)
        };
        Ok((lift(self, a, &sa)?, lift(self, b, &sb)?))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b)?;
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.powf(b, -1.0)?;
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f32) -> Result<Var> {
        self.push(Op::Shift(a, c))
    }

    pub fn powf(&mut self, a: Var, p: f32) -> Result<Var> {
        self.push(Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    // ----- structural -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.push(Op::Permute(a, perm.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape(a.0, "flatten of a scalar"));
        }
        self.reshape(a, &[s[0], numel(&s[1..])])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::BroadcastTo(a, shape.to_vec()))
    }

    /// Sums over every axis where `shape` has extent 1 (same rank as `a`).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::SumTo(a, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, start, len })
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ones = vec![1; self.shape(a).len()];
        let s = self.sum_to(a, &ones)?;
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f32;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a 2-D tensor, kept as `[rows, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(a.0, format!("row_sum of {s:?}")));
        }
        self.sum_to(a, &[s[0], 1])
    }

    // ----- network layers -----

    /// Stride-1 zero-padded convolution of `x: [N,Ci,H,W]` with `w: [Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape(self.len(), format!("conv2d {sx:?} * {sw:?}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            pad,
        };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(Error::shape(self.len(), "conv2d kernel larger than input"));
        }
        let cols = self.push(Op::Im2Col(x, geom))?;
        let wm = self.reshape(w, &[sw[0], sw[1] * sw[2] * sw[3]])?;
        let wt = self.transpose(wm)?;
        let out = self.matmul(cols, wt)?;
        let out = self.reshape(out, &[geom.n, geom.out_h(), geom.out_w(), sw[0]])?;
        self.permute(out, &[0, 3, 1, 2])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.push(Op::AvgPool2(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MaxPool2(x))
    }

    /// `x @ w + b` for `x: [N,in]`, `w: [in,out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Per-example, per-channel normalization over the spatial axes of `[N,C,H,W]`.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(x.0, format!("instance_norm of {s:?}")));
        }
        let (rows, cols) = (s[0] * s[1], s[2] * s[3]);
        let r = self.reshape(x, &[rows, cols])?;
        let mu = self.row_sum(r)?;
        let mu = self.scale(mu, 1.0 / cols as f32)?;
        let d = self.sub(r, mu)?;
        let sq = self.square(d)?;
        let var = self.row_sum(sq)?;
        let var = self.scale(var, 1.0 / cols as f32)?;
        let var = self.shift(var, eps)?;
        let inv = self.powf(var, -0.5)?;
        let y = self.mul(d, inv)?;
        self.reshape(y, &s)
    }

    /// Row-wise log-softmax of `[N,C]` logits.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(logits.0, format!("log_softmax of {s:?}")));
        }
        // the shift is a constant: log-softmax is invariant to it
        let v = self.value(logits);
        let maxes: Vec<f32> = v
            .data()
            .chunks(s[1])
            .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        let m = self.constant(Tensor::new(vec![s[0], 1], maxes)?);
        let shifted = self.sub(logits, m)?;
        let e = self.exp(shifted)?;
        let z = self.row_sum(e)?;
        let lz = self.log(z)?;
        self.sub(shifted, lz)
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        self.exp(ls)
    }

    /// Mean cross-entropy of `[N,C]` logits against hard labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(Error::shape(
                logits.0,
                format!("cross_entropy logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let mut onehot = Tensor::zeros(&s);
        for (i, &y) in labels.iter().enumerate() {
            onehot.data_mut()[i * s[1] + y] = 1.0;
        }
        let t = self.constant(onehot);
        self.soft_cross_entropy(logits, t)
    }

    /// Mean cross-entropy against target distributions `[N,C]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let n = self.shape(logits)[0] as f32;
        let ls = self.log_softmax(logits)?;
        let p = self.mul(targets, ls)?;
        let s = self.sum(p)?;
        self.scale(s, -1.0 / n)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.len(),
                format!("mse {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }
}
