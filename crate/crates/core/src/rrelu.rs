//! Rotated ReLU: `h = b · max(0, a · x)` with one slope per channel.
//!
//! Training graphs only use the canonical form (`a = +1`). The general form
//! exists so that [`canonicalize`] can fold any sign pattern into the
//! incoming weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_channels<T: Scalar>(op: &'static str, x: &Tensor<T>, len: usize) -> Result<(usize, usize, usize)> {
    let (n, c, inner) = x.channel_layout()?;
    if c != len {
        return Err(Error::dim(op, x.shape(), &[len]));
    }
    Ok((n, c, inner))
}

/// `h[:, i, ..] = b[i] · max(0, x[:, i, ..])`; channel axis is 1.
pub fn rrelu_forward<T: Scalar>(x: &Tensor<T>, b: &[T]) -> Result<Tensor<T>> {
    let (n, c, inner) = check_channels("rrelu_forward", x, b.len())?;
    let mut out = vec![T::zero(); x.numel()];
    for s in 0..n {
        for (ch, &slope) in b.iter().enumerate() {
            let base = (s * c + ch) * inner;
            let xs = &x.data()[base..base + inner];
            for (o, &v) in out[base..base + inner].iter_mut().zip(xs) {
                *o = if v <= T::zero() { T::zero() } else { slope * v };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(grad_x, grad_b)`. The subgradient at `x == 0` is zero.
pub fn rrelu_backward<T: Scalar>(upstream: &Tensor<T>, x: &Tensor<T>, b: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
    if upstream.shape() != x.shape() {
        return Err(Error::dim("rrelu_backward", upstream.shape(), x.shape()));
    }
    let (n, c, inner) = check_channels("rrelu_backward", x, b.len())?;
    let mut dx = vec![T::zero(); x.numel()];
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let mut acc = T::zero();
            let xs = &x.data()[base..base + inner];
            let gs = &upstream.data()[base..base + inner];
            for ((d, &v), &g) in dx[base..base + inner].iter_mut().zip(xs).zip(gs) {
                if v > T::zero() {
                    *d = b[ch] * g;
                    acc += v * g;
                }
            }
            db[ch] += acc;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, db))
}

/// General form with a fixed sign per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralRRelu<T: Scalar = f32> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> GeneralRRelu<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim("GeneralRRelu", &[a.len()], &[b.len()]));
        }
        if let Some(bad) = a.iter().find(|&&s| s != T::one() && s != -T::one()) {
            return Err(Error::Contract(format!("sign entries must be +1 or -1, got {bad:?}")));
        }
        Ok(GeneralRRelu { a, b })
    }

    pub fn signs(&self) -> &[T] {
        &self.a
    }

    pub fn slopes(&self) -> &[T] {
        &self.b
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        rrelu_general_forward(x, &self.a, &self.b)
    }
}

/// `h[:, i, ..] = b[i] · max(0, a[i] · x[:, i, ..])`.
pub fn rrelu_general_forward<T: Scalar>(x: &Tensor<T>, a: &[T], b: &[T]) -> Result<Tensor<T>> {
    if a.len() != b.len() {
        return Err(Error::dim("rrelu_general_forward", &[a.len()], &[b.len()]));
    }
    if let Some(bad) = a.iter().find(|&&s| s != T::one() && s != -T::one()) {
        return Err(Error::Contract(format!("sign entries must be +1 or -1, got {bad:?}")));
    }
    let (n, c, inner) = check_channels("rrelu_general_forward", x, b.len())?;
    let mut out = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            let xs = &x.data()[base..base + inner];
            for (o, &xv) in out[base..base + inner].iter_mut().zip(xs) {
                let v = a[ch] * xv;
                *o = if v <= T::zero() { T::zero() } else { b[ch] * v };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Whatever produces the pre-activation of a general-form layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Incoming<T: Scalar = f32> {
    /// Weight matrix `[in, out]`; channel `i` is column `i`.
    Linear(Tensor<T>),
    /// Filters `[c_out, c_in, k, k]`; channel `i` is filter `i`.
    Conv(Tensor<T>),
    /// Batch-norm affine transform directly in front of the activation.
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
    /// Sum of a branch and a skip path; a sign cannot be pushed through it.
    ResidualJoin,
}

/// Folds the signs of `layer` into `incoming`, returning the canonical slopes
/// and the adjusted producer. `b · max(0, -x) = b · max(0, x')` with `x' = -x`.
pub fn canonicalize<T: Scalar>(layer: &GeneralRRelu<T>, incoming: Incoming<T>) -> Result<(Vec<T>, Incoming<T>)> {
    let c = layer.a.len();
    let flipped: Vec<usize> = (0..c).filter(|&i| layer.a[i] < T::zero()).collect();
    let adjusted = match incoming {
        Incoming::Linear(mut w) => {
            if w.ndim() != 2 || w.shape()[1] != c {
                return Err(Error::dim("canonicalize", w.shape(), &[c]));
            }
            let cols = w.shape()[1];
            for row in w.data_mut().chunks_exact_mut(cols) {
                for &i in &flipped {
                    row[i] = -row[i];
                }
            }
            Incoming::Linear(w)
        }
        Incoming::Conv(mut w) => {
            if w.ndim() != 4 || w.shape()[0] != c {
                return Err(Error::dim("canonicalize", w.shape(), &[c]));
            }
            let per = w.numel() / c;
            for &i in &flipped {
                for v in &mut w.data_mut()[i * per..(i + 1) * per] {
                    *v = -*v;
                }
            }
            Incoming::Conv(w)
        }
        Incoming::BatchNorm { mut gamma, mut beta } => {
            if gamma.len() != c || beta.len() != c {
                return Err(Error::dim("canonicalize", &[gamma.len(), beta.len()], &[c]));
            }
            for &i in &flipped {
                gamma[i] = -gamma[i];
                beta[i] = -beta[i];
            }
            Incoming::BatchNorm { gamma, beta }
        }
        Incoming::ResidualJoin => {
            if flipped.is_empty() {
                Incoming::ResidualJoin
            } else {
                return Err(Error::Unsupported(
                    "negative sign after a residual join has no weights to absorb it".into(),
                ));
            }
        }
    };
    Ok((layer.b.clone(), adjusted))
}

/// Slope vector of one activation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeLayer {
    pub name: String,
    pub slopes: Vec<f32>,
    pub trainable: bool,
}

/// All slope vectors of a model, in forward order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlopeBank {
    pub layers: Vec<SlopeLayer>,
}

impl SlopeBank {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.slopes.len()).sum()
    }

    pub fn iter_abs(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.slopes.iter().map(|s| s.abs()))
    }

    pub fn fraction_below(&self, threshold: f32) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.iter_abs().filter(|&s| s < threshold).count() as f64 / total as f64
    }

    pub fn all_finite(&self) -> bool {
        self.iter_abs().all(f32::is_finite)
    }
}
