//! Finite-difference checks of tape gradients against the `f64` reference.

use drupi_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, fd_grad, rel_err, R};

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const CASES: u64 = 20;

#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Any,
    Positive,
    /// Entries at least 0.05 away from zero (ReLU kink).
    AwayFromZero,
    /// All entries distinct with a gap of at least 0.02 (max-pool ties).
    Distinct,
}

pub struct PrimCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub tape: fn(&mut Graph, &[Var]) -> Result<Var>,
    pub reference: fn(&[R]) -> R,
}

fn scalar(v: f64) -> R {
    R::new(&[], vec![v])
}

pub fn primitive_cases() -> Vec<PrimCase> {
    vec![
        PrimCase {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            domain: Domain::Any,
            tape: |g, v| g.add(v[0], v[1]),
            reference: |x| r::add(&x[0], &x[1]),
        },
        PrimCase {
            name: "add_broadcast",
            shapes: vec![vec![3, 4], vec![4]],
            domain: Domain::Any,
            tape: |g, v| g.add(v[0], v[1]),
            reference: |x| {
                let b = R::new(&[3, 4], (0..12).map(|i| x[1].data[i % 4]).collect());
                r::add(&x[0], &b)
            },
        },
        PrimCase {
            name: "mul",
            shapes: vec![vec![2, 5], vec![2, 5]],
            domain: Domain::Any,
            tape: |g, v| g.mul(v[0], v[1]),
            reference: |x| r::mul(&x[0], &x[1]),
        },
        PrimCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domain: Domain::Any,
            tape: |g, v| g.matmul(v[0], v[1]),
            reference: |x| r::matmul(&x[0], &x[1]),
        },
        PrimCase {
            name: "conv2d",
            shapes: vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3]],
            domain: Domain::Any,
            tape: |g, v| g.conv2d(v[0], v[1], 1),
            reference: |x| r::conv2d(&x[0], &x[1], 1),
        },
        PrimCase {
            name: "conv2d_valid",
            shapes: vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]],
            domain: Domain::Any,
            tape: |g, v| g.conv2d(v[0], v[1], 0),
            reference: |x| r::conv2d(&x[0], &x[1], 0),
        },
        PrimCase {
            name: "relu",
            shapes: vec![vec![4, 5]],
            domain: Domain::AwayFromZero,
            tape: |g, v| g.relu(v[0]),
            reference: |x| r::relu(&x[0]),
        },
        PrimCase {
            name: "sigmoid",
            shapes: vec![vec![4, 5]],
            domain: Domain::Any,
            tape: |g, v| g.sigmoid(v[0]),
            reference: |x| r::sigmoid(&x[0]),
        },
        PrimCase {
            name: "avg_pool",
            shapes: vec![vec![2, 2, 4, 4]],
            domain: Domain::Any,
            tape: |g, v| g.avg_pool2(v[0]),
            reference: |x| r::avgpool2(&x[0]),
        },
        PrimCase {
            name: "max_pool",
            shapes: vec![vec![2, 2, 4, 4]],
            domain: Domain::Distinct,
            tape: |g, v| g.max_pool2(v[0]),
            reference: |x| r::maxpool2(&x[0]),
        },
        PrimCase {
            name: "instance_norm",
            shapes: vec![vec![2, 3, 3, 3]],
            domain: Domain::Any,
            tape: |g, v| g.instance_norm(v[0], 1e-5),
            reference: |x| r::instance_norm(&x[0], 1e-5),
        },
        PrimCase {
            name: "softmax",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            tape: |g, v| g.softmax(v[0]),
            reference: |x| r::softmax(&x[0]),
        },
        PrimCase {
            name: "log",
            shapes: vec![vec![3, 4]],
            domain: Domain::Positive,
            tape: |g, v| g.log(v[0]),
            reference: |x| r::log(&x[0]),
        },
        PrimCase {
            name: "reshape",
            shapes: vec![vec![2, 6]],
            domain: Domain::Any,
            tape: |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                // multiply so the check is not trivially linear
                g.mul(y, y)
            },
            reference: |x| {
                let y = x[0].reshape(&[3, 4]);
                r::mul(&y, &y)
            },
        },
        PrimCase {
            name: "mean",
            shapes: vec![vec![3, 5]],
            domain: Domain::Any,
            tape: |g, v| g.mean(v[0]),
            reference: |x| scalar(r::mean(&x[0])),
        },
        PrimCase {
            name: "sum",
            shapes: vec![vec![3, 5]],
            domain: Domain::Any,
            tape: |g, v| g.sum(v[0]),
            reference: |x| scalar(r::sum(&x[0])),
        },
        PrimCase {
            name: "concat",
            shapes: vec![vec![2, 3], vec![1, 3]],
            domain: Domain::Any,
            tape: |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                g.mul(c, c)
            },
            reference: |x| {
                let c = r::concat0(&[&x[0], &x[1]]);
                r::mul(&c, &c)
            },
        },
        PrimCase {
            name: "cross_entropy",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            tape: |g, v| g.cross_entropy(v[0], &[0, 3, 1]),
            reference: |x| scalar(r::cross_entropy(&x[0], &[0, 3, 1])),
        },
        PrimCase {
            name: "mse",
            shapes: vec![vec![2, 4], vec![2, 4]],
            domain: Domain::Any,
            tape: |g, v| g.mse(v[0], v[1]),
            reference: |x| scalar(r::mse(&x[0], &x[1])),
        },
    ]
}

pub fn sample(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match domain {
        Domain::Any => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Domain::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Domain::AwayFromZero => (0..n)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Domain::Distinct => {
            let mut ranks: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                ranks.swap(i, rng.random_range(0..=i));
            }
            ranks
                .into_iter()
                .map(|k| k as f64 * 0.02 - 0.01 * n as f64)
                .collect()
        }
    }
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<R> {
    let mut out = Vec::new();
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(R::new(s, flat[at..at + n].to_vec()));
        at += n;
    }
    out
}

fn to_tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap()
}

fn flat_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Builds the projected scalar `sum(u * op(inputs))` on the tape.
fn projected(
    g: &mut Graph,
    case: &PrimCase,
    inputs: &[Vec<f64>],
    u: &R,
) -> (Vec<Var>, Var) {
    let leaves: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| g.leaf(to_tensor(s, d)))
        .collect();
    let out = (case.tape)(g, &leaves).unwrap();
    let uc = g.constant(to_tensor(g.shape(out).to_vec().as_slice(), &u.data));
    let p = g.mul(out, uc).unwrap();
    let s = g.sum(p).unwrap();
    (leaves, s)
}

/// Relative error of first- and second-order tape derivatives for one seed.
pub fn check_primitive(case: &PrimCase, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| sample(s, case.domain, &mut rng))
        .collect();
    let flat: Vec<f64> = inputs.concat();
    let out_ref = (case.reference)(&split(&flat, &case.shapes));
    let u = R::new(
        &out_ref.shape,
        (0..out_ref.data.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let v: Vec<f64> = (0..flat.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let shapes = case.shapes.clone();
    let reference = case.reference;
    let u_data = u.data.clone();
    let f = move |x: &[f64]| -> f64 {
        let out = reference(&split(x, &shapes));
        out.data.iter().zip(&u_data).map(|(a, b)| a * b).sum()
    };

    // first order
    let mut g = Graph::new();
    let (leaves, s) = projected(&mut g, case, &inputs, &u);
    let grads = g.backward(s, &leaves).unwrap();
    let tape_grad: Vec<f64> = leaves
        .iter()
        .flat_map(|l| flat_f64(grads.get(*l).unwrap()))
        .collect();
    let fd = fd_grad(&f, &flat, FD_STEP);
    let first = rel_err(&tape_grad, &fd, 1e-6);

    // second order: gradient of v . grad(s)
    let mut g = Graph::new();
    let (leaves, s) = projected(&mut g, case, &inputs, &u);
    let v_parts = split(&v, &case.shapes);
    let hv = g
        .grad_of_grad(
            s,
            &leaves,
            |g, inner| {
                let mut acc: Option<Var> = None;
                for (gi, vp) in inner.iter().zip(&v_parts) {
                    let vc = g.constant(to_tensor(&vp.shape, &vp.data));
                    let p = g.mul(*gi, vc)?;
                    let t = g.sum(p)?;
                    acc = Some(match acc {
                        None => t,
                        Some(a) => g.add(a, t)?,
                    });
                }
                Ok(acc.unwrap())
            },
            &leaves,
        )
        .unwrap();
    let tape_hv: Vec<f64> = leaves
        .iter()
        .flat_map(|l| flat_f64(hv.get(*l).unwrap()))
        .collect();
    let v2 = v.clone();
    let s2 = |x: &[f64]| -> f64 {
        fd_grad(&f, x, 1e-4)
            .iter()
            .zip(&v2)
            .map(|(a, b)| a * b)
            .sum()
    };
    let fd2 = fd_grad(&s2, &flat, FD_STEP);
    let second = rel_err(&tape_hv, &fd2, 1e-3);
    (first, second)
}

/// Second-order check on small models (<= 50 parameters): the gradient with
/// respect to the input of a squared distance between the parameter
/// gradient and a fixed target.
pub struct ModelCase {
    pub name: &'static str,
    pub param_shapes: Vec<Vec<usize>>,
    pub input_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub tape: fn(&mut Graph, Var, &[Var], &[usize]) -> Result<Var>,
    pub reference: fn(&R, &[R], &[usize]) -> f64,
}

pub fn model_cases() -> Vec<ModelCase> {
    vec![
        ModelCase {
            name: "softmax_regression",
            param_shapes: vec![vec![4, 3], vec![3]],
            input_shape: vec![2, 4],
            labels: vec![0, 2],
            tape: |g, x, p, y| {
                let z = g.linear(x, p[0], Some(p[1]))?;
                g.cross_entropy(z, y)
            },
            reference: |x, p, y| {
                let mut z = r::matmul(x, &p[0]);
                for i in 0..z.shape[0] {
                    for j in 0..z.shape[1] {
                        z.data[i * z.shape[1] + j] += p[1].data[j];
                    }
                }
                r::cross_entropy(&z, y)
            },
        },
        ModelCase {
            name: "tiny_convnet",
            // conv 1->2 (18 + 2), linear 8->2 (16 + 2): 38 parameters
            param_shapes: vec![vec![2, 1, 3, 3], vec![2], vec![8, 2], vec![2]],
            input_shape: vec![2, 1, 4, 4],
            labels: vec![1, 0],
            tape: |g, x, p, y| {
                let h = g.conv2d(x, p[0], 1)?;
                let b = g.reshape(p[1], &[1, 2, 1, 1])?;
                let h = g.add(h, b)?;
                let h = g.instance_norm(h, 1e-5)?;
                let h = g.sigmoid(h)?;
                let h = g.avg_pool2(h)?;
                let h = g.flatten(h)?;
                let z = g.linear(h, p[2], Some(p[3]))?;
                g.cross_entropy(z, y)
            },
            reference: |x, p, y| {
                let mut h = r::conv2d(x, &p[0], 1);
                let plane = 16;
                for (i, v) in h.data.iter_mut().enumerate() {
                    *v += p[1].data[(i / plane) % 2];
                }
                let h = r::sigmoid(&r::instance_norm(&h, 1e-5));
                let h = r::avgpool2(&h).reshape(&[2, 8]);
                let mut z = r::matmul(&h, &p[2]);
                for i in 0..2 {
                    for j in 0..2 {
                        z.data[i * 2 + j] += p[3].data[j];
                    }
                }
                r::cross_entropy(&z, y)
            },
        },
    ]
}

pub fn check_model(case: &ModelCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Vec<f64>> = case
        .param_shapes
        .iter()
        .map(|s| sample(s, Domain::Any, &mut rng))
        .collect();
    let x0 = sample(&case.input_shape, Domain::Any, &mut rng);
    let nparam: usize = params.iter().map(Vec::len).sum();
    assert!(nparam <= 50);
    let target: Vec<f64> = (0..nparam).map(|_| rng.random_range(-0.3..0.3)).collect();

    let mut g = Graph::new();
    let x = g.leaf(to_tensor(&case.input_shape, &x0));
    let pv: Vec<Var> = case
        .param_shapes
        .iter()
        .zip(&params)
        .map(|(s, d)| g.leaf(to_tensor(s, d)))
        .collect();
    let loss = (case.tape)(&mut g, x, &pv, &case.labels).unwrap();
    let tparts = split(&target, &case.param_shapes);
    let gm = g
        .grad_of_grad(
            loss,
            &pv,
            |g, inner| {
                let mut acc: Option<Var> = None;
                for (gi, t) in inner.iter().zip(&tparts) {
                    let tc = g.constant(to_tensor(&t.shape, &t.data));
                    let d = g.sub(*gi, tc)?;
                    let sq = g.square(d)?;
                    let s = g.sum(sq)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s)?,
                    });
                }
                Ok(acc.unwrap())
            },
            &[x],
        )
        .unwrap();
    let tape_grad = flat_f64(gm.get(x).unwrap());

    let pr: Vec<R> = split(&params.concat(), &case.param_shapes);
    let reference = case.reference;
    let shape = case.input_shape.clone();
    let labels = case.labels.clone();
    let outer = |xf: &[f64]| -> f64 {
        let xr = R::new(&shape, xf.to_vec());
        let pflat: Vec<f64> = pr.iter().flat_map(|p| p.data.clone()).collect();
        let shapes: Vec<Vec<usize>> = pr.iter().map(|p| p.shape.clone()).collect();
        let inner = |pf: &[f64]| reference(&xr, &split(pf, &shapes), &labels);
        let gp = fd_grad(&inner, &pflat, 1e-4);
        gp.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let fd = fd_grad(&outer, &x0, FD_STEP);
    rel_err(&tape_grad, &fd, 1e-6)
}
