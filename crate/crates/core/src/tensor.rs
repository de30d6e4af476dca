//! Dense row-major `f32` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` values in row-major order.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Tensor(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Tensor(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Tensor(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// Sub-tensor along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Tensor {
        let inner: usize = numel(&self.shape[1..]);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn select_axis0(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Tensor("empty selection".into()));
        }
        let inner: usize = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::Tensor(format!(
                    "row {i} out of range for leading dim {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Writes the rows of `src` to positions `idx` of the leading axis.
    pub fn set_rows(&mut self, idx: &[usize], src: &Tensor) -> Result<()> {
        let inner: usize = numel(&self.shape[1..]);
        if src.shape[1..] != self.shape[1..] || src.shape[0] != idx.len() {
            return Err(Error::Tensor(format!(
                "set_rows {:?} into {:?} at {} rows",
                src.shape,
                self.shape,
                idx.len()
            )));
        }
        for (j, &i) in idx.iter().enumerate() {
            if i >= self.shape[0] {
                return Err(Error::Tensor(format!("row {i} out of range")));
            }
            self.data[i * inner..(i + 1) * inner]
                .copy_from_slice(&src.data[j * inner..(j + 1) * inner]);
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Tensor("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Tensor(format!(
                    "stack shapes differ: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn axpy(&mut self, alpha: f32, x: &Tensor) -> Result<()> {
        if self.shape != x.shape {
            return Err(Error::Tensor(format!(
                "axpy shapes differ: {:?} vs {:?}",
                self.shape, x.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

pub(crate) mod kernels {
    //! Raw compute kernels shared by the tape.

    use super::numel;

    /// Reductions longer than this accumulate in `f64`.
    pub const WIDE_ACCUM: usize = 4096;

    /// `c[m,n] = a[m,k] * b[k,n]`
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0f32; m * n];
        if k > WIDE_ACCUM {
            let mut acc = vec![0f64; n];
            for i in 0..m {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let arow = &a[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let av = av as f64;
                    let brow = &b[p * n..(p + 1) * n];
                    for (s, &bv) in acc.iter_mut().zip(brow) {
                        *s += av * bv as f64;
                    }
                }
                for (dst, &s) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                    *dst = s as f32;
                }
            }
        } else {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (s, &bv) in crow.iter_mut().zip(brow) {
                        *s += av * bv;
                    }
                }
            }
        }
        c
    }

    fn strides(shape: &[usize]) -> Vec<usize> {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    }

    /// Output shape of permuting `shape` by `perm`.
    pub fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
        perm.iter().map(|&p| shape[p]).collect()
    }

    pub fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
        let out_shape = permuted_shape(shape, perm);
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let rank = shape.len();
        let total = data.len();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            out.push(data[offset]);
            // odometer increment over the output index
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                offset += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        out
    }

    /// Expands `data` of `shape` (same rank, 1s where broadcast) to `target`.
    pub fn broadcast_to(data: &[f32], shape: &[usize], target: &[usize]) -> Vec<f32> {
        let total = numel(target);
        let rank = target.len();
        let in_strides = strides(shape);
        let eff: Vec<usize> = (0..rank)
            .map(|d| if shape[d] == 1 { 0 } else { in_strides[d] })
            .collect();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            out.push(data[offset]);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                offset += eff[d];
                if idx[d] < target[d] {
                    break;
                }
                offset -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        out
    }

    /// Sums `data` of `shape` down to `target` (same rank, 1s where reduced).
    pub fn sum_to(data: &[f32], shape: &[usize], target: &[usize]) -> Vec<f32> {
        let rank = shape.len();
        let out_strides = strides(target);
        let eff: Vec<usize> = (0..rank)
            .map(|d| if target[d] == 1 { 0 } else { out_strides[d] })
            .collect();
        let mut acc = vec![0f64; numel(target)];
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for &v in data {
            acc[offset] += v as f64;
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                offset += eff[d];
                if idx[d] < shape[d] {
                    break;
                }
                offset -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Geometry of a stride-1 zero-padded square-kernel convolution.
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub struct ConvGeom {
        pub n: usize,
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub k: usize,
        pub pad: usize,
    }

    impl ConvGeom {
        pub fn out_h(&self) -> usize {
            self.h + 2 * self.pad + 1 - self.k
        }
        pub fn out_w(&self) -> usize {
            self.w + 2 * self.pad + 1 - self.k
        }
        pub fn cols_shape(&self) -> [usize; 2] {
            [
                self.n * self.out_h() * self.out_w(),
                self.c * self.k * self.k,
            ]
        }
    }

    /// Rows are output positions `(n, y, x)`, columns are `(c, ky, kx)`.
    pub fn im2col(x: &[f32], g: ConvGeom) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let ncols = g.c * g.k * g.k;
        let mut cols = vec![0f32; g.n * oh * ow * ncols];
        for n in 0..g.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * ncols;
                    for c in 0..g.c {
                        let plane = (n * g.c + c) * g.h * g.w;
                        for ky in 0..g.k {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let iy = iy - g.pad;
                            for kx in 0..g.k {
                                let ix = ox + kx;
                                if ix < g.pad || ix - g.pad >= g.w {
                                    continue;
                                }
                                cols[row + (c * g.k + ky) * g.k + kx] =
                                    x[plane + iy * g.w + ix - g.pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
    pub fn col2im(cols: &[f32], g: ConvGeom) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let ncols = g.c * g.k * g.k;
        let mut x = vec![0f32; g.n * g.c * g.h * g.w];
        for n in 0..g.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * ncols;
                    for c in 0..g.c {
                        let plane = (n * g.c + c) * g.h * g.w;
                        for ky in 0..g.k {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let iy = iy - g.pad;
                            for kx in 0..g.k {
                                let ix = ox + kx;
                                if ix < g.pad || ix - g.pad >= g.w {
                                    continue;
                                }
                                x[plane + iy * g.w + ix - g.pad] +=
                                    cols[row + (c * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// 2x2 average pooling over the trailing two axes of `[planes, h, w]`.
    pub fn avgpool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0f32; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let c = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    out[(p * oh + y) * ow + xx] = 0.25 * (a + b + c + d);
                }
            }
        }
        out
    }

    /// Adjoint of [`avgpool2`]; `h, w` are the pooled (input) sizes.
    pub fn avgunpool2(g: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0f32; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = 0.25 * g[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        out
    }

    /// 2x2 max pooling; also returns the flat input index of each maximum.
    /// Ties resolve to the first element in row-major window order.
    pub fn maxpool2(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0f32; planes * oh * ow];
        let mut arg = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let cands = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = cands[0];
                    for &c in &cands[1..] {
                        if x[c] > x[best] {
                            best = c;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out[o] = x[best];
                    arg[o] = best as u32;
                }
            }
        }
        (out, arg)
    }
}
