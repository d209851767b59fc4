//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use crate::error::{Error, Result};
use crate::gemm::gemm_acc;
use crate::kernels::{self, BatchStats, BnMode, ConvGeometry};
use crate::rrelu;
use crate::tensor::{transpose_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        filters: Var,
        geometry: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    RRelu {
        x: Var,
        slope: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Scatter {
        x: Var,
        indices: Vec<usize>,
    },
    Shortcut {
        x: Var,
        stride: usize,
        c_out: usize,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf (data, frozen parameters).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, inner) = xv.channel_layout()?;
        let bv = self.value(bias);
        if bv.numel() != c {
            return Err(Error::dim("add_channel_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let beta = bv.data()[ch];
                for v in &mut out[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    *v += beta;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddChannelBias { x, bias }))
    }

    /// `x · w (+ bias)` for `x: [N, in]`, `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let keep = self.requires_grad(filters);
        let (out, geometry, cols) =
            kernels::conv2d_forward(self.value(input), self.value(filters), stride, pad, keep)?;
        let rg = self.any_grad(&[input, filters]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                filters,
                geometry,
                cols,
            },
        ))
    }

    /// Per-channel batch normalization. In train mode the batch statistics are
    /// returned so the caller can update its running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let train = matches!(mode, BnMode::Train { .. });
        let fwd = kernels::batchnorm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg {
            (fwd.xhat, fwd.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let v = self.push(
            fwd.out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, fwd.stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v <= T::zero() { T::zero() } else { v });
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    /// Canonical rotated ReLU: `slope[c] · max(0, x)` on channel `c`.
    pub fn rrelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let value = rrelu::rrelu_forward(self.value(x), self.value(slope).data())?;
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(value, rg, Op::RRelu { x, slope }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, inner) = xv.channel_layout()?;
        if inner == 0 {
            return Err(Error::Contract("global_avg_pool over empty spatial extent".into()));
        }
        let scale = T::one() / T::of(inner as f64);
        let data = xv
            .data()
            .chunks_exact(inner)
            .map(|plane| {
                let mut s = T::zero();
                for &v in plane {
                    s += v;
                }
                s * scale
            })
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Keep only the listed channels (axis 1).
    pub fn gather_channels(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = kernels::gather_channels(self.value(x), indices)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Embed channels into a zero tensor of `width` channels at `indices`.
    pub fn scatter_channels(&mut self, x: Var, indices: &[usize], width: usize) -> Result<Var> {
        let value = kernels::scatter_channels(self.value(x), indices, width)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Scatter {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Parameter-free residual shortcut: spatial stride plus zero channels.
    pub fn shortcut(&mut self, x: Var, stride: usize, c_out: usize) -> Result<Var> {
        let value = kernels::shortcut_forward(self.value(x), stride, c_out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Shortcut { x, stride, c_out }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::dim("weighted_sum", xv.shape(), weights.shape()));
        }
        let mut s = T::zero();
        for (&a, &b) in xv.data().iter().zip(weights.data()) {
            s += a * b;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside class range 0..{k}")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / z;
            }
            total += z.ln() + max - row[label];
        }
        let loss = total / T::of(n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let shape = lv.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
            for (target, g) in contributions {
                self.accumulate(target, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, g: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return Ok(());
        }
        if g.shape() != node.value.shape() {
            return Err(Error::dim("backward", g.shape(), node.value.shape()));
        }
        match node.grad.as_mut() {
            None => node.grad = Some(g),
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if rg(*a) {
                    let mut bt = vec![T::zero(); n * k];
                    transpose_into(bv.data(), k, n, &mut bt);
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(m, n, k, up.data(), &bt, &mut da);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if rg(*b) {
                    let mut at = vec![T::zero(); k * m];
                    transpose_into(av.data(), m, k, &mut at);
                    let mut db = vec![T::zero(); k * n];
                    gemm_acc(k, m, n, &at, up.data(), &mut db);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if rg(*x) {
                    out.push((*x, up.clone()));
                }
                if rg(*bias) {
                    let (n, c, inner) = up.channel_layout()?;
                    let mut db = vec![T::zero(); c];
                    for b in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            for &v in &up.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                                *acc += v;
                            }
                        }
                    }
                    out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
                }
            }
            Op::Conv2d {
                input,
                filters,
                geometry,
                cols,
            } => {
                if rg(*filters) {
                    let cols = cols
                        .as_ref()
                        .ok_or_else(|| Error::Contract("conv2d columns were not retained".into()))?;
                    let dw = kernels::conv2d_filter_grad(geometry, cols, up.data());
                    out.push((*filters, Tensor::new(self.value(*filters).shape().to_vec(), dw)?));
                }
                if rg(*input) {
                    let dx = kernels::conv2d_input_grad(geometry, self.value(*filters).data(), up.data());
                    out.push((*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (dx, dg, db) = kernels::batchnorm_backward(
                    up.shape(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    up.data(),
                    *train,
                );
                if rg(*x) {
                    out.push((*x, Tensor::new(up.shape().to_vec(), dx)?));
                }
                if rg(*gamma) {
                    out.push((*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?));
                }
                if rg(*beta) {
                    out.push((*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::RRelu { x, slope } => {
                let sv = self.value(*slope);
                let (dx, db) = rrelu::rrelu_backward(up, self.value(*x), sv.data())?;
                if rg(*x) {
                    out.push((*x, dx));
                }
                if rg(*slope) {
                    out.push((*slope, Tensor::new(sv.shape().to_vec(), db)?));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, up.clone()));
                out.push((*b, up.clone()));
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (_, _, inner) = xv.channel_layout()?;
                let scale = T::one() / T::of(inner as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for &g in up.data() {
                    dx.extend(std::iter::repeat_n(g * scale, inner));
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Reshape { x } => {
                out.push((*x, up.clone().reshape(self.value(*x).shape())?));
            }
            Op::Gather { x, indices } => {
                let width = self.value(*x).shape()[1];
                let mut dx = kernels::scatter_channels(up, indices, width)?;
                // repeated indices must sum, which scatter would overwrite
                if has_duplicates(indices) {
                    dx = Tensor::zeros(self.value(*x).shape());
                    let (n, k, inner) = up.channel_layout()?;
                    for b in 0..n {
                        for (j, &i) in indices.iter().enumerate() {
                            for t in 0..inner {
                                dx.data_mut()[(b * width + i) * inner + t] +=
                                    up.data()[(b * k + j) * inner + t];
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Scatter { x, indices } => {
                out.push((*x, kernels::gather_channels(up, indices)?));
            }
            Op::Shortcut { x, stride, c_out } => {
                let xs = self.value(*x).shape().to_vec();
                let dx = kernels::shortcut_backward(&xs, *stride, *c_out, up.data());
                out.push((*x, Tensor::new(xs, dx)?));
            }
            Op::Sum { x } => {
                let g = up.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
            Op::WeightedSum { x, weights } => {
                let g = up.data()[0];
                let dx = weights.iter().map(|&w| w * g).collect();
                out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let k = shape[1];
                let scale = up.data()[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * k + label] -= T::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, Tensor::new(shape, d)?));
            }
        }
        Ok(out)
    }
}

fn has_duplicates(indices: &[usize]) -> bool {
    let mut seen = std::collections::HashSet::new();
    !indices.iter().all(|i| seen.insert(*i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(p, q).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let id = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, id, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(ones, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_add_and_loss_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::zeros(&[2]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());

        let logits = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn constant_channel_batchnorm_outputs_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.5));
        let gamma = g.constant(t(&[1], &[2.0]));
        let beta = g.constant(t(&[1], &[0.25]));
        let (y, stats) = g.batchnorm(x, gamma, beta, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.unwrap().var, vec![0.0]);
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.batchnorm(x, gamma, beta, BnMode::Train { eps: 1e-5 }),
            Err(Error::DegenerateBatch { .. })
        ));
    }

    #[test]
    fn sum_backward_is_ones_and_unreachable_leaf_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let unused = g.param(t(&[2], &[4.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }
}
