//! Parameter and FLOP accounting, savings reports, filter-path-length
//! distributions, and slope histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::model::{ActivationKind, LayerDef, Model, ModelSpec, BN_EPS};
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub layer: String,
    pub weights: usize,
    pub bias: usize,
    pub bn: usize,
    pub slopes: usize,
}

impl ParamRow {
    pub fn total(&self) -> usize {
        self.weights + self.bias + self.bn + self.slopes
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub rows: Vec<ParamRow>,
}

impl ParamCount {
    pub fn weights(&self) -> usize {
        self.rows.iter().map(|r| r.weights).sum()
    }

    pub fn bias(&self) -> usize {
        self.rows.iter().map(|r| r.bias).sum()
    }

    pub fn bn(&self) -> usize {
        self.rows.iter().map(|r| r.bn).sum()
    }

    pub fn slopes(&self) -> usize {
        self.rows.iter().map(|r| r.slopes).sum()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(ParamRow::total).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// Counts parameters from the layer descriptions alone: `in · out` per fully
/// connected layer, `c_out · c_in · k²` per convolution, two per batch-norm
/// channel, one per slope. Running statistics are not parameters.
pub fn count_params(spec: &ModelSpec) -> ParamCount {
    fn walk(layers: &[LayerDef], rows: &mut Vec<ParamRow>) {
        for l in layers {
            let row = match l {
                LayerDef::Linear {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => ParamRow {
                    layer: name.clone(),
                    weights: in_features * out_features,
                    bias: if *bias { *out_features } else { 0 },
                    ..Default::default()
                },
                LayerDef::Conv { name, c_in, c_out, k, .. } => ParamRow {
                    layer: name.clone(),
                    weights: c_out * c_in * k * k,
                    ..Default::default()
                },
                LayerDef::BatchNorm { name, channels } => ParamRow {
                    layer: name.clone(),
                    bn: 2 * channels,
                    ..Default::default()
                },
                LayerDef::Activation {
                    name,
                    act: ActivationKind::Rrelu,
                    channels,
                } => ParamRow {
                    layer: name.clone(),
                    slopes: *channels,
                    ..Default::default()
                },
                LayerDef::Shift { name, channels } => ParamRow {
                    layer: name.clone(),
                    bias: *channels,
                    ..Default::default()
                },
                LayerDef::Residual { branch, .. } => {
                    walk(branch, rows);
                    continue;
                }
                _ => continue,
            };
            rows.push(row);
        }
    }
    let mut rows = Vec::new();
    walk(&spec.layers, &mut rows);
    ParamCount { rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Linear,
    Conv,
    Join,
    BatchNorm,
    Activation,
    Pool,
    Shift,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRow {
    pub layer: String,
    pub kind: CostKind,
    pub mults: u64,
    pub adds: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub rows: Vec<FlopRow>,
}

impl FlopCount {
    pub fn mults(&self) -> u64 {
        self.rows.iter().map(|r| r.mults).sum()
    }

    pub fn adds(&self) -> u64 {
        self.rows.iter().map(|r| r.adds).sum()
    }

    pub fn flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&FlopRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// Name of the row holding a residual unit's join additions.
pub fn join_row(unit: &str) -> String {
    format!("{unit}.add")
}

/// Closed-form costs per sample for fully connected layers (`h_in · h_out`
/// multiplies, `(h_in − 1) · h_out` adds, `2 · h_in · h_out` FLOPs),
/// convolutions (`c_in · k² · H'W' · c_out` multiplies,
/// `(c_in − 1)(k² − 1) · H'W' · c_out` adds, twice the multiplies as FLOPs)
/// and residual joins (`c_out · H'W'` adds). Other layers are free.
pub fn count_flops_paper(spec: &ModelSpec) -> Result<FlopCount> {
    fn walk(layers: &[LayerDef], mut s: Vec<usize>, rows: &mut Vec<FlopRow>) -> Result<Vec<usize>> {
        for l in layers {
            s = match l {
                LayerDef::Flatten => vec![s.iter().product()],
                LayerDef::Linear {
                    name,
                    in_features: i,
                    out_features: o,
                    ..
                } => {
                    let (i, o) = (*i as u64, *o as u64);
                    rows.push(FlopRow {
                        layer: name.clone(),
                        kind: CostKind::Linear,
                        mults: i * o,
                        adds: (i - 1) * o,
                        flops: 2 * i * o,
                    });
                    vec![o as usize]
                }
                LayerDef::Conv {
                    name,
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    let oh = (s[1] + 2 * pad - k) / stride + 1;
                    let ow = (s[2] + 2 * pad - k) / stride + 1;
                    let hw = (oh * ow) as u64;
                    let (ci, co, k2) = (*c_in as u64, *c_out as u64, (k * k) as u64);
                    let mults = ci * k2 * hw * co;
                    rows.push(FlopRow {
                        layer: name.clone(),
                        kind: CostKind::Conv,
                        mults,
                        adds: (ci - 1) * (k2 - 1) * hw * co,
                        flops: 2 * mults,
                    });
                    vec![*c_out, oh, ow]
                }
                LayerDef::Residual {
                    name,
                    branch,
                    stride,
                    c_out,
                } => {
                    let out = vec![*c_out, s[1].div_ceil(*stride), s[2].div_ceil(*stride)];
                    if !branch.is_empty() {
                        walk(branch, s.clone(), rows)?;
                        let adds = out.iter().product::<usize>() as u64;
                        rows.push(FlopRow {
                            layer: join_row(name),
                            kind: CostKind::Join,
                            mults: 0,
                            adds,
                            flops: adds,
                        });
                    }
                    out
                }
                LayerDef::GlobalAvgPool => vec![s[0]],
                LayerDef::Gather { indices, .. } | LayerDef::Scatter { indices, .. } => {
                    let mut t = s.clone();
                    if matches!(l, LayerDef::Gather { .. }) {
                        t[0] = indices.len();
                    } else if let LayerDef::Scatter { width, .. } = l {
                        t[0] = *width;
                    }
                    t
                }
                _ => s,
            };
        }
        Ok(s)
    }
    spec.check_shapes()?;
    let mut rows = Vec::new();
    walk(&spec.layers, spec.input_shape.clone(), &mut rows)?;
    Ok(FlopCount { rows })
}

/// Multiply/add counters of the instrumented interpreter.
#[derive(Default)]
struct Counter {
    rows: Vec<FlopRow>,
}

impl Counter {
    fn push(&mut self, layer: String, kind: CostKind, mults: u64, adds: u64) {
        self.rows.push(FlopRow {
            layer,
            kind,
            mults,
            adds,
            flops: mults + adds,
        });
    }
}

/// Sample-major activations of one input, `[C, H, W]` or `[D]`.
struct Act {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Runs one sample through `model` with plain nested loops (explicitly
/// zero-padded convolutions, eval-mode batch norm) and counts every scalar
/// multiply and add it executes. Comparisons and copies are free.
pub fn count_flops_oracle(model: &Model) -> Result<FlopCount> {
    let shape = model.spec().input_shape.clone();
    let n: usize = shape.iter().product();
    let input = Act {
        shape,
        data: (0..n).map(|i| ((i % 7) as f32 - 3.0) * 0.25).collect(),
    };
    let mut counter = Counter::default();
    oracle_walk(model, &model.spec().layers, input, &mut counter)?;
    Ok(FlopCount { rows: counter.rows })
}

fn oracle_walk(model: &Model, layers: &[LayerDef], mut x: Act, ctr: &mut Counter) -> Result<Act> {
    for l in layers {
        x = match l {
            LayerDef::Flatten => Act {
                shape: vec![x.data.len()],
                data: x.data,
            },
            LayerDef::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let w = model.tensor(&format!("{name}.weight"))?.data();
                let (mut m, mut a) = (0u64, 0u64);
                let mut out = vec![0f32; *out_features];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = x.data[0] * w[j];
                    m += 1;
                    for i in 1..*in_features {
                        acc += x.data[i] * w[i * out_features + j];
                        m += 1;
                        a += 1;
                    }
                    *o = acc;
                }
                if *bias {
                    let b = model.tensor(&format!("{name}.bias"))?.data();
                    for (o, &bv) in out.iter_mut().zip(b) {
                        *o += bv;
                        a += 1;
                    }
                }
                ctr.push(name.clone(), CostKind::Linear, m, a);
                Act {
                    shape: vec![*out_features],
                    data: out,
                }
            }
            LayerDef::Conv {
                name,
                c_in,
                c_out,
                k,
                stride,
                pad,
            } => {
                let w = model.tensor(&format!("{name}.weight"))?.data();
                let (h, wd) = (x.shape[1], x.shape[2]);
                let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
                let mut padded = vec![0f32; c_in * ph * pw];
                for c in 0..*c_in {
                    for y in 0..h {
                        for xx in 0..wd {
                            padded[(c * ph + y + pad) * pw + xx + pad] = x.data[(c * h + y) * wd + xx];
                        }
                    }
                }
                let oh = (ph - k) / stride + 1;
                let ow = (pw - k) / stride + 1;
                let (mut m, mut a) = (0u64, 0u64);
                let mut out = vec![0f32; c_out * oh * ow];
                for o in 0..*c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0f32;
                            let mut first = true;
                            for c in 0..*c_in {
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let p = padded[(c * ph + oy * stride + ky) * pw + ox * stride + kx]
                                            * w[((o * c_in + c) * k + ky) * k + kx];
                                        m += 1;
                                        if first {
                                            acc = p;
                                            first = false;
                                        } else {
                                            acc += p;
                                            a += 1;
                                        }
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                ctr.push(name.clone(), CostKind::Conv, m, a);
                Act {
                    shape: vec![*c_out, oh, ow],
                    data: out,
                }
            }
            LayerDef::BatchNorm { name, channels } => {
                let get = |s: &str| model.tensor(&format!("{name}.{s}")).map(Tensor::data);
                let (g, b, mu, var) = (get("gamma")?, get("beta")?, get("running_mean")?, get("running_var")?);
                let inner = x.data.len() / channels;
                let (mut m, mut a) = (0u64, 0u64);
                for c in 0..*channels {
                    let inv = 1.0 / (var[c] + BN_EPS).sqrt();
                    a += 1;
                    for v in &mut x.data[c * inner..(c + 1) * inner] {
                        *v = g[c] * ((*v - mu[c]) * inv) + b[c];
                        m += 2;
                        a += 2;
                    }
                }
                ctr.push(name.clone(), CostKind::BatchNorm, m, a);
                x
            }
            LayerDef::Activation { name, act, channels } => {
                let inner = x.data.len() / channels;
                let mut m = 0u64;
                let slopes = match act {
                    ActivationKind::Rrelu => Some(model.tensor(&format!("{name}.slope"))?.data()),
                    ActivationKind::Relu => None,
                };
                for c in 0..*channels {
                    for v in &mut x.data[c * inner..(c + 1) * inner] {
                        let r = if *v <= 0.0 { 0.0 } else { *v };
                        *v = match slopes {
                            Some(s) => {
                                m += 1;
                                s[c] * r
                            }
                            None => r,
                        };
                    }
                }
                ctr.push(name.clone(), CostKind::Activation, m, 0);
                x
            }
            LayerDef::Residual {
                name,
                branch,
                stride,
                c_out,
            } => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (h.div_ceil(*stride), w.div_ceil(*stride));
                let mut skip = vec![0f32; c_out * oh * ow];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            skip[(ch * oh + y) * ow + xx] = x.data[(ch * h + y * stride) * w + xx * stride];
                        }
                    }
                }
                if branch.is_empty() {
                    Act {
                        shape: vec![*c_out, oh, ow],
                        data: skip,
                    }
                } else {
                    let mut y = oracle_walk(model, branch, x, ctr)?;
                    let mut a = 0u64;
                    for (v, s) in y.data.iter_mut().zip(&skip) {
                        *v += s;
                        a += 1;
                    }
                    ctr.push(join_row(name), CostKind::Join, 0, a);
                    y
                }
            }
            LayerDef::GlobalAvgPool => {
                let c = x.shape[0];
                let inner = x.data.len() / c;
                let (mut m, mut a) = (0u64, 0u64);
                let mut out = vec![0f32; c];
                for (ch, o) in out.iter_mut().enumerate() {
                    let plane = &x.data[ch * inner..(ch + 1) * inner];
                    let mut s = plane[0];
                    for &v in &plane[1..] {
                        s += v;
                        a += 1;
                    }
                    *o = s / inner as f32;
                    m += 1;
                }
                ctr.push("pool".into(), CostKind::Pool, m, a);
                Act {
                    shape: vec![c],
                    data: out,
                }
            }
            LayerDef::Shift { name, channels } => {
                let s = model.tensor(&format!("{name}.shift"))?.data();
                let inner = x.data.len() / channels;
                let mut a = 0u64;
                for (c, &sc) in s.iter().enumerate().take(*channels) {
                    for v in &mut x.data[c * inner..(c + 1) * inner] {
                        *v += sc;
                        a += 1;
                    }
                }
                ctr.push(name.clone(), CostKind::Shift, 0, a);
                x
            }
            LayerDef::Gather { indices, width } => {
                let inner = x.data.len() / width;
                let mut data = Vec::with_capacity(indices.len() * inner);
                for &i in indices {
                    data.extend_from_slice(&x.data[i * inner..(i + 1) * inner]);
                }
                let mut shape = x.shape.clone();
                shape[0] = indices.len();
                Act { shape, data }
            }
            LayerDef::Scatter { indices, width } => {
                let inner = x.data.len() / indices.len().max(1);
                let mut data = vec![0f32; width * inner];
                for (j, &i) in indices.iter().enumerate() {
                    data[i * inner..(i + 1) * inner].copy_from_slice(&x.data[j * inner..(j + 1) * inner]);
                }
                let mut shape = x.shape.clone();
                shape[0] = *width;
                Act { shape, data }
            }
        };
    }
    Ok(x)
}

/// Output spatial extent `H' · W'` of each convolution, from the spec.
fn conv_out_pixels(spec: &ModelSpec) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    fn walk(layers: &[LayerDef], mut s: Vec<usize>, out: &mut BTreeMap<String, usize>) -> Result<Vec<usize>> {
        for l in layers {
            s = match l {
                LayerDef::Conv {
                    name,
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    let g = ConvGeometry::new(&[1, *c_in, s[1], s[2]], &[*c_out, *c_in, *k, *k], *stride, *pad)?;
                    out.insert(name.clone(), g.out_pixels());
                    vec![*c_out, g.out_h, g.out_w]
                }
                LayerDef::Residual {
                    branch, stride, c_out, ..
                } => {
                    walk(branch, s.clone(), out)?;
                    vec![*c_out, s[1].div_ceil(*stride), s[2].div_ceil(*stride)]
                }
                LayerDef::Flatten => vec![s.iter().product()],
                LayerDef::Linear { out_features, .. } => vec![*out_features],
                LayerDef::GlobalAvgPool => vec![s[0]],
                _ => s,
            };
        }
        Ok(s)
    }
    walk(&spec.layers, spec.input_shape.clone(), &mut out)?;
    Ok(out)
}

/// Per-layer parameters and closed-form FLOPs removed by compacting a freshly
/// built `spec` with `mask`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedSavings {
    /// `(layer, parameters removed)`; negative entries are parameters added.
    pub params: Vec<(String, i64)>,
    /// `(layer, closed-form FLOPs removed)`.
    pub flops: Vec<(String, i64)>,
}

impl PredictedSavings {
    pub fn params_removed(&self) -> i64 {
        self.params.iter().map(|p| p.1).sum()
    }

    pub fn flops_removed(&self) -> i64 {
        self.flops.iter().map(|p| p.1).sum()
    }
}

/// Savings from the closed forms: removing `n` of the `h_l` outputs of a
/// fully connected layer saves `h_{l−1} · n` weights there and `n · h_{l+1}`
/// in the consumer; removing `n` of `c_out` filters saves `c_in · k² · n`
/// weights (`2 · c_in · k² · H'W' · n` FLOPs) at the producer and
/// `n · k² · c_out^{l+1}` weights (`2 · n · k² · H'W' · c_out^{l+1}` FLOPs)
/// at the consumer. With both sides of a layer pruned, the surviving
/// dimensions enter the product, so the terms do not double count.
pub fn predict_savings(spec: &ModelSpec, mask: &PruneMask) -> Result<PredictedSavings> {
    mask.validate(spec)?;
    let pixels = conv_out_pixels(spec)?;
    let n_of = |layer: &str| mask.get(layer).map_or(0, |m| m.count()) as i64;
    let mut out = PredictedSavings::default();
    let layers = &spec.layers;
    // channels removed from the stream feeding the next consumer
    let mut upstream_cut: i64 = 0;
    let mut i = 0;
    while i < layers.len() {
        match &layers[i] {
            LayerDef::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                let n = match layers.get(i + 1) {
                    Some(LayerDef::Activation {
                        name: a,
                        act: ActivationKind::Rrelu,
                        ..
                    }) => {
                        let n = n_of(a);
                        out.params.push((a.clone(), n));
                        n
                    }
                    _ => 0,
                };
                let (hi, ho) = (*in_features as i64, *out_features as i64);
                let kept = (hi - upstream_cut) * (ho - n);
                out.params.push((name.clone(), hi * ho - kept + if *bias { n } else { 0 }));
                out.flops.push((name.clone(), 2 * (hi * ho - kept)));
                upstream_cut = n;
            }
            LayerDef::Residual {
                name: unit,
                branch,
                c_out,
                ..
            } => {
                let Some(LayerDef::Activation { name: act2, .. }) = layers.get(i + 1) else {
                    return Err(Error::Unsupported(format!("residual unit `{unit}` without activation")));
                };
                let [LayerDef::Conv {
                    name: conv1,
                    c_in,
                    c_out: mid,
                    k,
                    ..
                }, LayerDef::BatchNorm { name: bn1, .. }, LayerDef::Activation { name: act1, .. }, LayerDef::Conv { name: conv2, .. }, LayerDef::BatchNorm { name: bn2, .. }] =
                    branch.as_slice()
                else {
                    return Err(Error::Unsupported(format!("unit `{unit}` is not a two-conv unit")));
                };
                let (ci, m, w, k2) = (*c_in as i64, *mid as i64, *c_out as i64, (*k * *k) as i64);
                let (n1, n2) = (n_of(act1), n_of(act2));
                let (p1, p2) = (pixels[conv1] as i64, pixels[conv2] as i64);
                if n1 == m {
                    out.params.push((conv1.clone(), ci * m * k2));
                    out.params.push((bn1.clone(), 2 * m));
                    out.params.push((act1.clone(), m));
                    out.params.push((conv2.clone(), m * w * k2));
                    out.params.push((bn2.clone(), 2 * w));
                    // the constant left behind by the removed branch
                    out.params.push((unit.clone(), -(w - n2)));
                    out.flops.push((conv1.clone(), 2 * ci * k2 * p1 * m));
                    out.flops.push((conv2.clone(), 2 * m * k2 * p2 * w));
                    out.flops.push((join_row(unit), w * p2));
                } else {
                    let c1_kept = (ci - upstream_cut) * (m - n1) * k2;
                    let c2_kept = (m - n1) * (w - n2) * k2;
                    out.params.push((conv1.clone(), ci * m * k2 - c1_kept));
                    out.params.push((bn1.clone(), 2 * n1));
                    out.params.push((act1.clone(), n1));
                    out.params.push((conv2.clone(), m * w * k2 - c2_kept));
                    out.params.push((bn2.clone(), 2 * n2));
                    out.flops.push((conv1.clone(), 2 * (ci * m * k2 - c1_kept) * p1));
                    out.flops.push((conv2.clone(), 2 * (m * w * k2 - c2_kept) * p2));
                }
                out.params.push((act2.clone(), n2));
                upstream_cut = n2;
                i += 1;
            }
            LayerDef::Conv { .. } => upstream_cut = 0,
            _ => {}
        }
        i += 1;
    }
    Ok(out)
}

/// Exact distribution of the number of active filters along the `2^B` paths
/// through `B` residual units, where each unit is either skipped (0) or taken
/// (its active filter count).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterPathDistribution {
    pub per_unit: Vec<u64>,
    /// `counts[len]` = number of paths of that length.
    pub counts: Vec<BigUint>,
}

impl FilterPathDistribution {
    pub fn units(&self) -> usize {
        self.per_unit.len()
    }

    pub fn total_paths(&self) -> BigUint {
        self.counts.iter().sum()
    }

    pub fn max_length(&self) -> u64 {
        self.counts.iter().rposition(|c| !c.is_zero()).unwrap_or(0) as u64
    }

    /// `(length, count)` for every length that occurs.
    pub fn support(&self) -> Vec<(u64, BigUint)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_zero())
            .map(|(l, c)| (l as u64, c.clone()))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let total = self.total_paths();
        let mut w = csv_writer(out);
        w.write_record(["length", "paths", "probability"]).map_err(csv_err)?;
        for (len, c) in self.support() {
            let p = ratio(&c, &total);
            w.write_record([len.to_string(), c.to_string(), format!("{p:.6e}")])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio(a: &BigUint, b: &BigUint) -> f64 {
    // scale both down to keep the leading bits representable
    let shift = b.bits().saturating_sub(900);
    let (a, b) = (a >> shift, b >> shift);
    let to_f = |x: &BigUint| x.to_string().parse::<f64>().unwrap_or(f64::INFINITY);
    to_f(&a) / to_f(&b)
}

/// Dynamic programme over units: convolve the running distribution with the
/// two-point distribution `{0, f_b}` of each unit.
pub fn filter_path_distribution(per_unit: &[i64]) -> Result<FilterPathDistribution> {
    if let Some(bad) = per_unit.iter().find(|&&c| c < 0) {
        return Err(Error::Input(format!("negative active-filter count {bad}")));
    }
    let per_unit: Vec<u64> = per_unit.iter().map(|&c| c as u64).collect();
    let max: u64 = per_unit.iter().sum();
    let mut counts = vec![BigUint::zero(); max as usize + 1];
    counts[0] = BigUint::one();
    let mut reach = 0usize;
    for &f in &per_unit {
        let f = f as usize;
        if f == 0 {
            for c in counts.iter_mut().take(reach + 1) {
                *c <<= 1u32;
            }
            continue;
        }
        for len in (0..=reach).rev() {
            if !counts[len].is_zero() {
                let add = counts[len].clone();
                counts[len + f] += add;
            }
        }
        reach += f;
    }
    Ok(FilterPathDistribution { per_unit, counts })
}

/// Active filters per residual unit: surviving output channels of the
/// branch convolutions, or 0 when the branch is gone. With a mask, the first
/// convolution keeps the channels alive at the branch activation and the last
/// one those alive at the activation after the join.
pub fn active_filters_per_unit(spec: &ModelSpec, mask: Option<&PruneMask>) -> Vec<i64> {
    let alive = |layer: &str, width: usize| -> usize {
        mask.and_then(|m| m.get(layer)).map_or(width, |m| m.alive().len())
    };
    let mut out = Vec::new();
    let layers = &spec.layers;
    for (i, l) in layers.iter().enumerate() {
        let LayerDef::Residual { branch, .. } = l else { continue };
        let mut total = 0usize;
        let mut dead = false;
        for (j, b) in branch.iter().enumerate() {
            let LayerDef::Conv { c_out, .. } = b else { continue };
            // the activation that decides which of this conv's outputs live
            let gate = branch[j + 1..]
                .iter()
                .find_map(|x| match x {
                    LayerDef::Activation { name, channels, .. } => Some((name.as_str(), *channels)),
                    _ => None,
                })
                .or_else(|| match layers.get(i + 1) {
                    Some(LayerDef::Activation { name, channels, .. }) => Some((name.as_str(), *channels)),
                    _ => None,
                });
            let n = match gate {
                Some((name, ch)) if ch == *c_out => alive(name, ch),
                _ => *c_out,
            };
            dead |= n == 0 && j == 0;
            total += n;
        }
        out.push(if dead { 0 } else { total as i64 });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub layer: String,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_paper_before: u64,
    pub flops_paper_after: u64,
    pub flops_exact_before: u64,
    pub flops_exact_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub gamma: f32,
    pub rows: Vec<SavingsRow>,
    /// Rotated-ReLU slopes of the unpruned model (the stem has none).
    pub slopes_total: usize,
    pub slopes_below_gamma: usize,
    /// Channels removed by the compaction; equal to `slopes_below_gamma`
    /// when the pruned model was compacted at `gamma`.
    pub filters_ignored: usize,
    /// Of the ignored channels, those feeding a residual join: their slot
    /// stays in the feature map and only their production cost is saved.
    pub join_channels_ignored: usize,
}

impl SavingsReport {
    fn sum(&self, f: impl Fn(&SavingsRow) -> u64) -> u64 {
        self.rows.iter().map(f).sum()
    }

    pub fn params_before(&self) -> u64 {
        self.sum(|r| r.params_before)
    }

    pub fn params_after(&self) -> u64 {
        self.sum(|r| r.params_after)
    }

    pub fn flops_paper_before(&self) -> u64 {
        self.sum(|r| r.flops_paper_before)
    }

    pub fn flops_paper_after(&self) -> u64 {
        self.sum(|r| r.flops_paper_after)
    }

    pub fn flops_exact_before(&self) -> u64 {
        self.sum(|r| r.flops_exact_before)
    }

    pub fn flops_exact_after(&self) -> u64 {
        self.sum(|r| r.flops_exact_after)
    }

    pub fn filters_ignored_pct(&self) -> f64 {
        if self.slopes_total == 0 {
            0.0
        } else {
            100.0 * self.filters_ignored as f64 / self.slopes_total as f64
        }
    }

    /// Totals equal row sums and nothing grows, in any column.
    pub fn is_consistent(&self) -> bool {
        let rows_ok = self.rows.iter().all(|r| {
            r.params_after <= r.params_before
                || r.params_before == 0 // constants that replace removed units
        });
        rows_ok
            && self.params_after() <= self.params_before()
            && self.flops_paper_after() <= self.flops_paper_before()
            && self.flops_exact_after() <= self.flops_exact_before()
            && self.filters_ignored <= self.slopes_total
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "{:<width$} {:>12} {:>12} {:>15} {:>15} {:>15} {:>15}",
            "layer", "params", "params_after", "flops_paper", "flops_paper_af", "flops_exact", "flops_exact_af"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$} {:>12} {:>12} {:>15} {:>15} {:>15} {:>15}",
                r.layer,
                r.params_before,
                r.params_after,
                r.flops_paper_before,
                r.flops_paper_after,
                r.flops_exact_before,
                r.flops_exact_after
            );
        }
        let _ = writeln!(
            s,
            "{:<width$} {:>12} {:>12} {:>15} {:>15} {:>15} {:>15}",
            "total",
            self.params_before(),
            self.params_after(),
            self.flops_paper_before(),
            self.flops_paper_after(),
            self.flops_exact_before(),
            self.flops_exact_after()
        );
        let pct = |a: u64, b: u64| if b == 0 { 0.0 } else { 100.0 * (b - a.min(b)) as f64 / b as f64 };
        let _ = writeln!(s);
        let _ = writeln!(s, "gamma                 {}", self.gamma);
        let _ = writeln!(
            s,
            "Filters ignored       {}/{} ({:.2}%)",
            self.filters_ignored,
            self.slopes_total,
            self.filters_ignored_pct()
        );
        let _ = writeln!(
            s,
            "  feeding joins       {} (compute saved, channel slot kept)",
            self.join_channels_ignored
        );
        let _ = writeln!(
            s,
            "Memory saving         {:.2}%",
            pct(self.params_after(), self.params_before())
        );
        let _ = writeln!(
            s,
            "FLOP saving (formula) {:.2}%",
            pct(self.flops_paper_after(), self.flops_paper_before())
        );
        let _ = writeln!(
            s,
            "FLOP saving (exact)   {:.2}%",
            pct(self.flops_exact_after(), self.flops_exact_before())
        );
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.serialize(SavingsRow {
            layer: "total".into(),
            params_before: self.params_before(),
            params_after: self.params_after(),
            flops_paper_before: self.flops_paper_before(),
            flops_paper_after: self.flops_paper_after(),
            flops_exact_before: self.flops_exact_before(),
            flops_exact_after: self.flops_exact_after(),
        })
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Compares an unpruned model with its compacted counterpart. Layer rows are
/// matched by name; layers missing on one side count as zero there.
pub fn savings_report(before: &Model, after: &Model, gamma: f32) -> Result<SavingsReport> {
    let pb = count_params(before.spec());
    let pa = count_params(after.spec());
    let fb = count_flops_paper(before.spec())?;
    let fa = count_flops_paper(after.spec())?;
    let eb = count_flops_oracle(before)?;
    let ea = count_flops_oracle(after)?;
    let mut order: Vec<String> = Vec::new();
    let mut push = |name: &str| {
        if !order.iter().any(|n| n == name) {
            order.push(name.to_string());
        }
    };
    for r in &pb.rows {
        push(&r.layer);
    }
    for r in &fb.rows {
        push(&r.layer);
    }
    for r in &eb.rows {
        push(&r.layer);
    }
    for r in pa.rows.iter().map(|r| &r.layer).chain(fa.rows.iter().map(|r| &r.layer)) {
        push(r);
    }
    for r in &ea.rows {
        push(&r.layer);
    }
    let p = |c: &ParamCount, n: &str| c.get(n).map_or(0, |r| r.total() as u64);
    let f = |c: &FlopCount, n: &str| c.get(n).map_or(0, |r| r.flops);
    let rows = order
        .iter()
        .map(|n| SavingsRow {
            layer: n.clone(),
            params_before: p(&pb, n),
            params_after: p(&pa, n),
            flops_paper_before: f(&fb, n),
            flops_paper_after: f(&fa, n),
            flops_exact_before: f(&eb, n),
            flops_exact_after: f(&ea, n),
        })
        .collect();
    let bank = before.slope_bank();
    let below = bank.iter_abs().filter(|&s| s < gamma).count();
    let kept = after.slope_bank().total();
    // channels that survive only as zero slots after a join
    let join_acts: Vec<String> = before
        .spec()
        .layers
        .windows(2)
        .filter_map(|w| match w {
            [LayerDef::Residual { .. }, LayerDef::Activation { name, .. }] => Some(name.clone()),
            _ => None,
        })
        .collect();
    let join_ignored = bank
        .layers
        .iter()
        .filter(|l| join_acts.contains(&l.name))
        .map(|l| l.slopes.iter().filter(|s| s.abs() < gamma).count())
        .sum();
    Ok(SavingsReport {
        gamma,
        rows,
        slopes_total: bank.total(),
        slopes_below_gamma: below,
        filters_ignored: bank.total().saturating_sub(kept),
        join_channels_ignored: join_ignored,
    })
}

/// Equal-width histogram of slope values, per rotated-ReLU layer and overall.
/// The range spans the smallest to the largest slope (a unit-wide range
/// around the value if all slopes are equal).
pub fn slope_histogram(model: &Model, bins: usize) -> Result<Vec<(String, f32, f32, usize)>> {
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    let bank = model.slope_bank();
    let all: Vec<f32> = bank.layers.iter().flat_map(|l| l.slopes.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Contract("model has no rotated-ReLU slopes".into()));
    }
    let lo = all.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = all.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f32;
    let bin_of = |v: f32| (((v - lo) / width) as usize).min(bins - 1);
    let edges = |b: usize| (lo + b as f32 * width, if b + 1 == bins { hi } else { lo + (b + 1) as f32 * width });
    let mut rows = Vec::new();
    let mut groups: Vec<(String, Vec<f32>)> = bank.layers.iter().map(|l| (l.name.clone(), l.slopes.clone())).collect();
    groups.push(("all".into(), all));
    for (name, vals) in groups {
        let mut counts = vec![0usize; bins];
        for v in vals {
            counts[bin_of(v)] += 1;
        }
        for (b, c) in counts.into_iter().enumerate() {
            let (l, h) = edges(b);
            rows.push((name.clone(), l, h, c));
        }
    }
    Ok(rows)
}

/// Writes `group,bin_low,bin_high,count` rows.
pub fn slope_histogram_export<W: Write>(model: &Model, bins: usize, out: W) -> Result<()> {
    let rows = slope_histogram(model, bins)?;
    let mut w = csv_writer(out);
    w.write_record(["group", "bin_low", "bin_high", "count"]).map_err(csv_err)?;
    for (g, l, h, c) in rows {
        w.write_record([g, l.to_string(), h.to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
