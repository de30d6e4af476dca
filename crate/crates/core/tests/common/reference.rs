//! Naive `f64` reference implementations used as finite-difference oracles.
//! Nothing here touches the tape.

#[derive(Clone, Debug)]
pub struct R {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl R {
    pub fn new(shape: &[usize], data: Vec<f64>) -> R {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        R {
            shape: shape.to_vec(),
            data,
        }
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> R {
        R::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
    pub fn zip(&self, o: &R, f: impl Fn(f64, f64) -> f64) -> R {
        assert_eq!(self.shape, o.shape);
        R::new(
            &self.shape,
            self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }
    pub fn reshape(&self, shape: &[usize]) -> R {
        R::new(shape, self.data.clone())
    }
}

pub fn add(a: &R, b: &R) -> R {
    a.zip(b, |x, y| x + y)
}

pub fn mul(a: &R, b: &R) -> R {
    a.zip(b, |x, y| x * y)
}

pub fn matmul(a: &R, b: &R) -> R {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    assert_eq!(b.shape[0], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
            }
        }
    }
    R::new(&[m, n], out)
}

/// Direct-sum convolution, stride 1, zero padding.
pub fn conv2d(x: &R, w: &R, pad: usize) -> R {
    let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for a in 0..k {
                            for bb in 0..k {
                                let iy = y as isize + a as isize - pad as isize;
                                let ix = xx as isize + bb as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data[((o * ci + c) * k + a) * k + bb]
                                    * x.data[((b * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    R::new(&[n, co, oh, ow], out)
}

pub fn relu(x: &R) -> R {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &R) -> R {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn pool(x: &R, f: impl Fn([f64; 4]) -> f64) -> R {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let planes: usize = x.shape[..r - 2].iter().product();
    let mut shape = x.shape.clone();
    shape[r - 2] = h / 2;
    shape[r - 1] = w / 2;
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x.data[p * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out.push(f([at(0, 0), at(0, 1), at(1, 0), at(1, 1)]));
            }
        }
    }
    R::new(&shape, out)
}

pub fn avgpool2(x: &R) -> R {
    pool(x, |v| v.iter().sum::<f64>() / 4.0)
}

pub fn maxpool2(x: &R) -> R {
    pool(x, |v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn instance_norm(x: &R, eps: f64) -> R {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let hw = h * w;
    let mut out = x.data.clone();
    for p in 0..n * c {
        let s = &x.data[p * hw..(p + 1) * hw];
        let mu = s.iter().sum::<f64>() / hw as f64;
        let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
        for i in 0..hw {
            out[p * hw + i] = (s[i] - mu) / (var + eps).sqrt();
        }
    }
    R::new(&x.shape, out)
}

pub fn log_softmax(x: &R) -> R {
    let (n, c) = (x.shape[0], x.shape[1]);
    let mut out = x.data.clone();
    for i in 0..n {
        let row = &x.data[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lz;
        }
    }
    R::new(&x.shape, out)
}

pub fn softmax(x: &R) -> R {
    log_softmax(x).map(f64::exp)
}

pub fn log(x: &R) -> R {
    x.map(f64::ln)
}

pub fn sum(x: &R) -> f64 {
    x.data.iter().sum()
}

pub fn mean(x: &R) -> f64 {
    sum(x) / x.data.len() as f64
}

pub fn concat0(parts: &[&R]) -> R {
    let mut shape = parts[0].shape.clone();
    shape[0] = parts.iter().map(|p| p.shape[0]).sum();
    R::new(&shape, parts.iter().flat_map(|p| p.data.clone()).collect())
}

/// Mean cross-entropy of logits against hard labels.
pub fn cross_entropy(logits: &R, labels: &[usize]) -> f64 {
    let ls = log_softmax(logits);
    let c = logits.shape[1];
    -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| ls.data[i * c + y])
        .sum::<f64>()
        / labels.len() as f64
}

pub fn mse(a: &R, b: &R) -> f64 {
    mean(&a.zip(b, |x, y| (x - y) * (x - y)))
}

/// Central finite-difference gradient.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}
