//! Central finite-difference checks of the graph's reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::BnMode;
use crate::rrelu::{rrelu_backward, rrelu_forward};
use crate::tensor::{Scalar, Tensor};

/// Outcome of one op over all its random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Step and error floor for a scalar type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    /// Denominator floor of the relative error, so that exact zeros compare
    /// as absolute differences.
    pub floor: f64,
}

impl Tolerance {
    pub fn for_f32() -> Self {
        Tolerance { step: 1e-3, floor: 1e-3 }
    }

    pub fn for_f64() -> Self {
        Tolerance { step: 1e-3, floor: 1e-6 }
    }
}

/// Richardson-extrapolated central difference of `f` at `x`, O(h⁴).
pub fn central_diff(x: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut d = |h: f64| -> Result<f64> { Ok((f(x + h)? - f(x - h)?) / (2.0 * h)) };
    let (coarse, fine) = (d(h)?, d(h / 2.0)?);
    Ok((4.0 * fine - coarse) / 3.0)
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Shape-independent description of one random case.
#[derive(Clone, Debug)]
enum Case {
    Matmul,
    AddChannelBias,
    Linear,
    Conv { stride: usize, pad: usize },
    BatchNorm { train: bool, mean: Vec<f64>, var: Vec<f64> },
    Relu,
    Rrelu,
    Add,
    GlobalAvgPool,
    Reshape(Vec<usize>),
    Gather(Vec<usize>),
    Scatter(Vec<usize>, usize),
    Shortcut { stride: usize, c_out: usize },
    Sum,
    WeightedSum(Tensor<f64>),
    CrossEntropy(Vec<usize>),
}

fn build<T: Scalar>(case: &Case, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
    let cast = |xs: &[f64]| xs.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    match case {
        Case::Matmul => g.matmul(v[0], v[1]),
        Case::AddChannelBias => g.add_channel_bias(v[0], v[1]),
        Case::Linear => g.linear(v[0], v[1], Some(v[2])),
        Case::Conv { stride, pad } => g.conv2d(v[0], v[1], *stride, *pad),
        Case::BatchNorm { train, mean, var } => {
            let (mean, var, eps) = (cast(mean), cast(var), T::of(1e-5));
            let mode = if *train {
                BnMode::Train { eps }
            } else {
                BnMode::Eval {
                    mean: &mean,
                    var: &var,
                    eps,
                }
            };
            Ok(g.batchnorm(v[0], v[1], v[2], mode)?.0)
        }
        Case::Relu => Ok(g.relu(v[0])),
        Case::Rrelu => g.rrelu(v[0], v[1]),
        Case::Add => g.add(v[0], v[1]),
        Case::GlobalAvgPool => g.global_avg_pool(v[0]),
        Case::Reshape(shape) => g.reshape(v[0], shape),
        Case::Gather(idx) => g.gather_channels(v[0], idx),
        Case::Scatter(idx, width) => g.scatter_channels(v[0], idx, *width),
        Case::Shortcut { stride, c_out } => g.shortcut(v[0], *stride, *c_out),
        Case::Sum => Ok(g.sum(v[0])),
        Case::WeightedSum(w) => g.weighted_sum(v[0], &w.cast()),
        Case::CrossEntropy(labels) => g.softmax_cross_entropy(v[0], labels),
    }
}

/// Worst relative error between the tape's gradient of `Σ w ⊙ f(inputs)`,
/// computed in `T`, and central differences of the same ops evaluated in f64,
/// over every element of every input.
fn check<T: Scalar>(case: &Case, inputs: &[Tensor<f64>], tol: Tolerance, seed: u64) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = build(case, &mut g, &vars)?;
    let weights = normal_tensor(g.value(out).shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    let loss = g.weighted_sum(out, &weights.cast())?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(case, &mut g, &vars)?;
        let loss = g.weighted_sum(out, &weights)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst = 0f64;
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let numeric = central_diff(orig, tol.step, |v| {
                xs[i].data_mut()[j] = v;
                eval(&xs)
            })?;
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[i].data()[j].as_f64(), numeric, tol.floor));
        }
    }
    Ok(worst)
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Normal samples pushed at least `margin` away from zero, so that a
/// finite-difference step never crosses a rectifier kink.
fn off_kink(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal_tensor(shape, rng).map(|x| if x.abs() < margin { x.signum() * margin + x } else { x })
}

/// All differentiable ops with their random case generators.
pub const OPS: &[&str] = &[
    "matmul",
    "add_channel_bias",
    "linear",
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "rrelu",
    "rrelu_backward",
    "add",
    "global_avg_pool",
    "reshape",
    "gather_channels",
    "scatter_channels",
    "shortcut",
    "sum",
    "weighted_sum",
    "softmax_cross_entropy",
];

fn random_case(op: &str, rng: &mut ChaCha8Rng, margin: f64) -> Result<(Case, Vec<Tensor<f64>>)> {
    let dims: Vec<usize> = (0..8).map(|_| rng.random_range(1..5)).collect();
    let [a, b, c, d, e, f, h, w] = dims[..] else { unreachable!() };
    let out = match op {
        "matmul" => (Case::Matmul, vec![normal_tensor(&[a, b], rng), normal_tensor(&[b, c], rng)]),
        "add_channel_bias" => {
            let shape = if d % 2 == 0 { vec![a, c] } else { vec![a, c, h, w] };
            (Case::AddChannelBias, vec![normal_tensor(&shape, rng), normal_tensor(&[c], rng)])
        }
        "linear" => (
            Case::Linear,
            vec![normal_tensor(&[a, b + 1], rng), normal_tensor(&[b + 1, c], rng), normal_tensor(&[c], rng)],
        ),
        "conv2d" => {
            let k = if d % 2 == 0 { 1 } else { 3 };
            let (stride, pad) = (1 + e % 2, f % 2);
            let (n, ci, co) = (1 + a % 2, b.min(3), c.min(3));
            let x = normal_tensor(&[n, ci, k + h, k + w], rng);
            let filt = normal_tensor(&[co, ci, k, k], rng);
            (Case::Conv { stride, pad }, vec![x, filt])
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let ch = c.min(3);
            let x = normal_tensor(&[1 + a, ch, h.min(3), w.min(3)], rng);
            let gamma = normal_tensor(&[ch], rng);
            let beta = normal_tensor(&[ch], rng);
            let mean = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var = (0..ch).map(|_| rng.random_range(0.5..2.0)).collect();
            let train = op == "batchnorm_train";
            (Case::BatchNorm { train, mean, var }, vec![x, gamma, beta])
        }
        "relu" => (Case::Relu, vec![off_kink(&[a, b + c], margin, rng)]),
        "rrelu" => (
            Case::Rrelu,
            vec![off_kink(&[a.min(2), c, h, 2], margin, rng), normal_tensor(&[c], rng)],
        ),
        "add" => (Case::Add, vec![normal_tensor(&[a, b], rng), normal_tensor(&[a, b], rng)]),
        "global_avg_pool" => (Case::GlobalAvgPool, vec![normal_tensor(&[a.min(2), c, h, w], rng)]),
        "reshape" => (Case::Reshape(vec![a, 2 * b]), vec![normal_tensor(&[a, b, 2], rng)]),
        "gather_channels" => {
            let idx = (0..b + 1).map(|_| rng.random_range(0..c)).collect();
            (Case::Gather(idx), vec![normal_tensor(&[2, c, 2, w.min(2)], rng)])
        }
        "scatter_channels" => {
            let width = c + 1;
            let mut idx: Vec<usize> = (0..width).filter(|_| rng.random_bool(0.6)).collect();
            if idx.is_empty() {
                idx.push(width - 1);
            }
            let x = normal_tensor(&[2, idx.len(), 2, 2], rng);
            (Case::Scatter(idx, width), vec![x])
        }
        "shortcut" => {
            let ch = c.min(3);
            let case = Case::Shortcut {
                stride: 1 + d % 2,
                c_out: ch + e % 3,
            };
            (case, vec![normal_tensor(&[2, ch, h + 1, w + 1], rng)])
        }
        "sum" => (Case::Sum, vec![normal_tensor(&[a, b], rng)]),
        "weighted_sum" => (
            Case::WeightedSum(normal_tensor(&[a, b], rng)),
            vec![normal_tensor(&[a, b], rng)],
        ),
        "softmax_cross_entropy" => {
            let k = b + 1;
            let labels = (0..a).map(|_| rng.random_range(0..k)).collect();
            (Case::CrossEntropy(labels), vec![normal_tensor(&[a, k], rng)])
        }
        other => return Err(crate::Error::Input(format!("no gradient case for `{other}`"))),
    };
    Ok(out)
}

/// Runs `cases` random cases of `op` and returns the worst relative error.
pub fn check_op<T: Scalar>(op: &'static str, cases: usize, tol: Tolerance, seed: u64) -> Result<GradCheck> {
    let mut worst = 0f64;
    for case in 0..cases {
        let case_seed = seed ^ (case as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let margin = 4.0 * tol.step;
        let err = if op == "rrelu_backward" {
            rrelu_backward_case::<T>(&mut rng, tol, margin)?
        } else {
            let (c, inputs) = random_case(op, &mut rng, margin)?;
            check::<T>(&c, &inputs, tol, case_seed)?
        };
        worst = worst.max(err);
    }
    Ok(GradCheck {
        op,
        cases,
        max_rel_err: worst,
    })
}

/// Checks the kernel-level `rrelu_backward` in `T`, both outputs, against
/// central differences of `rrelu_forward` in f64.
fn rrelu_backward_case<T: Scalar>(rng: &mut ChaCha8Rng, tol: Tolerance, margin: f64) -> Result<f64> {
    let c = rng.random_range(1..5);
    let shape = [rng.random_range(1..3), c, rng.random_range(1..4)];
    let x = off_kink(&shape, margin, rng);
    let b: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let up = normal_tensor(&shape, rng);
    let bt: Vec<T> = b.iter().map(|&v| T::of(v)).collect();
    let (gx, gb) = rrelu_backward(&up.cast::<T>(), &x.cast::<T>(), &bt)?;
    let loss = |x: &Tensor<f64>, b: &[f64]| -> Result<f64> {
        let y = rrelu_forward(x, b)?;
        Ok(y.data().iter().zip(up.data()).map(|(p, q)| p * q).sum())
    };
    let mut worst = 0f64;
    let mut xs = x.clone();
    for j in 0..x.numel() {
        let o = x.data()[j];
        let numeric = central_diff(o, tol.step, |v| {
            xs.data_mut()[j] = v;
            loss(&xs, &b)
        })?;
        xs.data_mut()[j] = o;
        worst = worst.max(rel_err(gx.data()[j].as_f64(), numeric, tol.floor));
    }
    let mut bs = b.clone();
    for i in 0..c {
        let o = b[i];
        let numeric = central_diff(o, tol.step, |v| {
            bs[i] = v;
            loss(&x, &bs)
        })?;
        bs[i] = o;
        worst = worst.max(rel_err(gb[i].as_f64(), numeric, tol.floor));
    }
    Ok(worst)
}
