//! Declarative network descriptions, builders, and the parameter store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{BatchStats, BnMode};
use crate::rrelu::{SlopeBank, SlopeLayer};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Rrelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDef {
    /// `[N, ...] -> [N, prod(...)]`.
    Flatten,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Activation {
        name: String,
        act: ActivationKind,
        channels: usize,
    },
    /// `branch(x) + skip(x)`; the skip subsamples by `stride` and zero-extends
    /// to `c_out` channels. An empty branch leaves only the skip.
    Residual {
        name: String,
        branch: Vec<LayerDef>,
        stride: usize,
        c_out: usize,
    },
    GlobalAvgPool,
    /// Learned per-channel constant added to every position.
    Shift {
        name: String,
        channels: usize,
    },
    /// Keep channels `indices` of a `width`-channel input.
    Gather {
        indices: Vec<usize>,
        width: usize,
    },
    /// Place the input channels at `indices` of a zero `width`-channel map.
    Scatter {
        indices: Vec<usize>,
        width: usize,
    },
}

impl LayerDef {
    pub fn name(&self) -> Option<&str> {
        match self {
            LayerDef::Linear { name, .. }
            | LayerDef::Conv { name, .. }
            | LayerDef::BatchNorm { name, .. }
            | LayerDef::Activation { name, .. }
            | LayerDef::Residual { name, .. }
            | LayerDef::Shift { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub activation: ActivationKind,
    pub layers: Vec<LayerDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
    Slope,
    Shift,
}

impl ParamKind {
    /// Running statistics are state, not parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Visits every parameterized layer depth-first in forward order.
pub fn visit_layers<'a>(layers: &'a [LayerDef], f: &mut impl FnMut(&'a LayerDef)) {
    for l in layers {
        f(l);
        if let LayerDef::Residual { branch, .. } = l {
            visit_layers(branch, f);
        }
    }
}

impl ModelSpec {
    /// Name, kind and shape of every tensor the model owns, in storage order.
    pub fn param_layout(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        let mut out = Vec::new();
        visit_layers(&self.layers, &mut |l| match l {
            LayerDef::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                out.push((format!("{name}.weight"), ParamKind::Weight, vec![*in_features, *out_features]));
                if *bias {
                    out.push((format!("{name}.bias"), ParamKind::Bias, vec![*out_features]));
                }
            }
            LayerDef::Conv { name, c_in, c_out, k, .. } => {
                out.push((format!("{name}.weight"), ParamKind::Weight, vec![*c_out, *c_in, *k, *k]));
            }
            LayerDef::BatchNorm { name, channels } => {
                let c = vec![*channels];
                out.push((format!("{name}.gamma"), ParamKind::BnGamma, c.clone()));
                out.push((format!("{name}.beta"), ParamKind::BnBeta, c.clone()));
                out.push((format!("{name}.running_mean"), ParamKind::RunningMean, c.clone()));
                out.push((format!("{name}.running_var"), ParamKind::RunningVar, c));
            }
            LayerDef::Activation {
                name,
                act: ActivationKind::Rrelu,
                channels,
            } => out.push((format!("{name}.slope"), ParamKind::Slope, vec![*channels])),
            LayerDef::Shift { name, channels } => {
                out.push((format!("{name}.shift"), ParamKind::Shift, vec![*channels]))
            }
            _ => {}
        });
        out
    }

    /// Names of the rotated-ReLU activation layers in forward order.
    pub fn rrelu_layers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        visit_layers(&self.layers, &mut |l| {
            if let LayerDef::Activation {
                name,
                act: ActivationKind::Rrelu,
                channels,
            } = l
            {
                out.push((name.clone(), *channels));
            }
        });
        out
    }

    /// Walks the layers with per-sample shapes, checking that they chain.
    /// Returns the output shape.
    pub fn check_shapes(&self) -> Result<Vec<usize>> {
        let out = chain_shapes(&self.layers, self.input_shape.clone())?;
        if out != [self.num_classes] {
            return Err(Error::Structural {
                layer: self.name.clone(),
                reason: format!("network output {out:?} does not match {} classes", self.num_classes),
            });
        }
        Ok(out)
    }

    /// Same layout with every rotated ReLU replaced by a plain one, or vice versa
    /// (the stem stays plain either way).
    pub fn with_activation(&self, act: ActivationKind) -> ModelSpec {
        fn swap(layers: &[LayerDef], act: ActivationKind) -> Vec<LayerDef> {
            layers
                .iter()
                .map(|l| match l {
                    LayerDef::Activation { name, channels, .. } if name != STEM_ACT => LayerDef::Activation {
                        name: name.clone(),
                        act,
                        channels: *channels,
                    },
                    LayerDef::Residual {
                        name,
                        branch,
                        stride,
                        c_out,
                    } => LayerDef::Residual {
                        name: name.clone(),
                        branch: swap(branch, act),
                        stride: *stride,
                        c_out: *c_out,
                    },
                    other => other.clone(),
                })
                .collect()
        }
        ModelSpec {
            activation: act,
            layers: swap(&self.layers, act),
            ..self.clone()
        }
    }
}

fn structural(layer: &LayerDef, reason: String) -> Error {
    Error::Structural {
        layer: layer.name().unwrap_or("<unnamed>").to_string(),
        reason,
    }
}

fn chain_shapes(layers: &[LayerDef], mut s: Vec<usize>) -> Result<Vec<usize>> {
    for l in layers {
        let channels = s.first().copied().unwrap_or(0);
        s = match l {
            LayerDef::Flatten => vec![s.iter().product()],
            LayerDef::Linear {
                in_features,
                out_features,
                ..
            } => {
                if s != [*in_features] {
                    return Err(structural(l, format!("expects [{in_features}], got {s:?}")));
                }
                vec![*out_features]
            }
            LayerDef::Conv {
                c_in,
                c_out,
                k,
                stride,
                pad,
                ..
            } => {
                if s.len() != 3 || s[0] != *c_in || *stride == 0 || *k == 0 {
                    return Err(structural(l, format!("expects {c_in} channels, got {s:?}")));
                }
                if s[1] + 2 * pad < *k || s[2] + 2 * pad < *k {
                    return Err(structural(l, format!("kernel {k} larger than padded input {s:?}")));
                }
                vec![*c_out, (s[1] + 2 * pad - k) / stride + 1, (s[2] + 2 * pad - k) / stride + 1]
            }
            LayerDef::BatchNorm { channels: c, .. }
            | LayerDef::Activation { channels: c, .. }
            | LayerDef::Shift { channels: c, .. } => {
                if channels != *c {
                    return Err(structural(l, format!("expects {c} channels, got {s:?}")));
                }
                s
            }
            LayerDef::Residual {
                branch,
                stride,
                c_out,
                ..
            } => {
                if s.len() != 3 || *c_out < s[0] || *stride == 0 {
                    return Err(structural(l, format!("skip cannot map {s:?} to {c_out} channels")));
                }
                let skip = vec![*c_out, s[1].div_ceil(*stride), s[2].div_ceil(*stride)];
                if !branch.is_empty() {
                    let b = chain_shapes(branch, s.clone())?;
                    if b != skip {
                        return Err(structural(l, format!("branch output {b:?} differs from skip {skip:?}")));
                    }
                }
                skip
            }
            LayerDef::GlobalAvgPool => {
                if s.len() < 2 {
                    return Err(structural(l, format!("needs spatial axes, got {s:?}")));
                }
                vec![s[0]]
            }
            LayerDef::Gather { indices, width } => {
                if channels != *width || indices.iter().any(|&i| i >= *width) {
                    return Err(structural(l, format!("gather from width {width}, got {s:?}")));
                }
                let mut t = s.clone();
                t[0] = indices.len();
                t
            }
            LayerDef::Scatter { indices, width } => {
                if channels != indices.len() || indices.iter().any(|&i| i >= *width) {
                    return Err(structural(l, format!("scatter of {} channels, got {s:?}", indices.len())));
                }
                let mut t = s.clone();
                t[0] = *width;
                t
            }
        };
    }
    Ok(s)
}

pub const STEM_ACT: &str = "stem.act";

/// Fully connected classifier: `flatten → (linear → activation)* → linear + bias`.
pub fn build_fcnn(input_dim: usize, hidden: &[usize], num_classes: usize, act: ActivationKind) -> ModelSpec {
    let mut layers = vec![LayerDef::Flatten];
    let mut width = input_dim;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(LayerDef::Linear {
            name: format!("fc{}", i + 1),
            in_features: width,
            out_features: h,
            bias: false,
        });
        layers.push(LayerDef::Activation {
            name: format!("act{}", i + 1),
            act,
            channels: h,
        });
        width = h;
    }
    layers.push(LayerDef::Linear {
        name: "out".into(),
        in_features: width,
        out_features: num_classes,
        bias: true,
    });
    let dims: Vec<String> = std::iter::once(input_dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(num_classes))
        .map(|d| d.to_string())
        .collect();
    ModelSpec {
        name: format!("fcnn-{}", dims.join("-")),
        input_shape: vec![input_dim],
        num_classes,
        activation: act,
        layers,
    }
}

fn conv(name: String, c_in: usize, c_out: usize, stride: usize) -> LayerDef {
    LayerDef::Conv {
        name,
        c_in,
        c_out,
        k: 3,
        stride,
        pad: 1,
    }
}

/// Residual network on `[in_channels, h, w]` inputs: a 3×3 stem with plain
/// ReLU, then one stage per entry of `widths`, each with `units` two-conv
/// residual units. Stages after the first (and any width change) start with a
/// stride-2 unit whose skip subsamples and zero-extends channels.
pub fn build_residual(
    name: String,
    input_shape: [usize; 3],
    stem_width: usize,
    widths: &[usize],
    units: usize,
    num_classes: usize,
    act: ActivationKind,
) -> Result<ModelSpec> {
    if units == 0 || widths.is_empty() || stem_width == 0 {
        return Err(Error::Input("residual network needs at least one unit, stage and stem channel".into()));
    }
    let mut layers = vec![
        conv("stem.conv".into(), input_shape[0], stem_width, 1),
        LayerDef::BatchNorm {
            name: "stem.bn".into(),
            channels: stem_width,
        },
        LayerDef::Activation {
            name: STEM_ACT.into(),
            act: ActivationKind::Relu,
            channels: stem_width,
        },
    ];
    let mut c = stem_width;
    for (si, &w) in widths.iter().enumerate() {
        if w < c {
            return Err(Error::Input(format!("stage width {w} narrower than its input {c}")));
        }
        for u in 0..units {
            let p = format!("s{}.u{}", si + 1, u + 1);
            let stride = if si > 0 && u == 0 { 2 } else { 1 };
            let branch = vec![
                conv(format!("{p}.conv1"), c, w, stride),
                LayerDef::BatchNorm {
                    name: format!("{p}.bn1"),
                    channels: w,
                },
                LayerDef::Activation {
                    name: format!("{p}.act1"),
                    act,
                    channels: w,
                },
                conv(format!("{p}.conv2"), w, w, 1),
                LayerDef::BatchNorm {
                    name: format!("{p}.bn2"),
                    channels: w,
                },
            ];
            layers.push(LayerDef::Residual {
                name: p.clone(),
                branch,
                stride,
                c_out: w,
            });
            layers.push(LayerDef::Activation {
                name: format!("{p}.act2"),
                act,
                channels: w,
            });
            c = w;
        }
    }
    layers.push(LayerDef::GlobalAvgPool);
    layers.push(LayerDef::Linear {
        name: "fc".into(),
        in_features: c,
        out_features: num_classes,
        bias: false,
    });
    let spec = ModelSpec {
        name,
        input_shape: input_shape.to_vec(),
        num_classes,
        activation: act,
        layers,
    };
    spec.check_shapes()?;
    Ok(spec)
}

/// CIFAR-style ResNet with `units` per stage and widths 16/32/64: depth `6·units + 2`.
pub fn build_resnet(units: usize, num_classes: usize, act: ActivationKind) -> Result<ModelSpec> {
    build_residual(
        format!("resnet-{}", 6 * units + 2),
        [3, 32, 32],
        16,
        &[16, 32, 64],
        units,
        num_classes,
        act,
    )
}

/// Wide ResNet: 16-channel stem, stages of `16w`, `32w`, `64w` channels with
/// `(depth - 4) / 6` units each.
pub fn build_wrn(depth: usize, widen: usize, num_classes: usize, act: ActivationKind) -> Result<ModelSpec> {
    if depth < 10 || !(depth - 4).is_multiple_of(6) || widen == 0 {
        return Err(Error::Input(format!(
            "wide resnet depth {depth} must be 4 + 6k with k >= 1, widen factor >= 1"
        )));
    }
    build_residual(
        format!("wrn-{depth}-{widen}"),
        [3, 32, 32],
        16,
        &[16 * widen, 32 * widen, 64 * widen],
        (depth - 4) / 6,
        num_classes,
        act,
    )
}

/// Parses the command-line model names `fcnn-784-500-10`, `resnet-20`, `wrn-16-4`.
pub fn spec_from_name(
    name: &str,
    input_shape: &[usize],
    num_classes: usize,
    act: ActivationKind,
) -> Result<ModelSpec> {
    let bad = || Error::Input(format!("unknown model `{name}`"));
    let nums = |s: &str| -> Result<Vec<usize>> {
        s.split('-')
            .map(|p| p.parse::<usize>().map_err(|_| bad()))
            .collect()
    };
    if let Some(rest) = name.strip_prefix("fcnn-") {
        let dims = nums(rest)?;
        if dims.len() < 2 {
            return Err(bad());
        }
        let input: usize = input_shape.iter().product();
        if dims[0] != input || *dims.last().unwrap() != num_classes {
            return Err(Error::Input(format!(
                "model `{name}` expects {} inputs and {} classes, dataset has {input} and {num_classes}",
                dims[0],
                dims.last().unwrap()
            )));
        }
        return Ok(build_fcnn(dims[0], &dims[1..dims.len() - 1], num_classes, act));
    }
    if input_shape.len() != 3 {
        return Err(Error::Input(format!("model `{name}` needs image inputs, got {input_shape:?}")));
    }
    let shape = [input_shape[0], input_shape[1], input_shape[2]];
    if let Some(rest) = name.strip_prefix("resnet-") {
        let d = nums(rest)?;
        if d.len() != 1 || d[0] < 8 || (d[0] - 2) % 6 != 0 {
            return Err(Error::Input(format!("resnet depth must be 6k + 2, got `{name}`")));
        }
        return build_residual(name.into(), shape, 16, &[16, 32, 64], (d[0] - 2) / 6, num_classes, act);
    }
    if let Some(rest) = name.strip_prefix("wrn-") {
        let d = nums(rest)?;
        if d.len() != 2 {
            return Err(bad());
        }
        let (depth, w) = (d[0], d[1]);
        if depth < 10 || (depth - 4) % 6 != 0 || w == 0 {
            return Err(Error::Input(format!("wide resnet depth must be 6k + 4, got `{name}`")));
        }
        return build_residual(name.into(), shape, 16, &[16 * w, 32 * w, 64 * w], (depth - 4) / 6, num_classes, act);
    }
    if let Some(rest) = name.strip_prefix("rescnn-") {
        // rescnn-<units>-<width>: a single-stage residual network
        let d = nums(rest)?;
        if d.len() != 2 {
            return Err(bad());
        }
        return build_residual(name.into(), shape, d[1], &[d[1]], d[0], num_classes, act);
    }
    Err(bad())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// A network layout together with its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of building one forward pass on a graph.
pub struct Forward {
    pub logits: Var,
    /// Batch statistics per batch-norm layer, train mode only.
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
    /// Graph leaf of every parameter used.
    pub vars: HashMap<String, Var>,
}

impl Model {
    /// Allocates all tensors with neutral values: zero weights and biases,
    /// unit BN scale and running variance, unit slopes.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.check_shapes()?;
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, kind, shape) in spec.param_layout() {
            let value = match kind {
                ParamKind::BnGamma | ParamKind::RunningVar | ParamKind::Slope => Tensor::ones(&shape),
                _ => Tensor::zeros(&shape),
            };
            if index.insert(name.clone(), params.len()).is_some() {
                return Err(Error::Structural {
                    layer: name,
                    reason: "duplicate tensor name".into(),
                });
            }
            params.push(Param { name, kind, value });
        }
        Ok(Model { spec, params, index })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor `{name}`")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Number of scalars in trainable tensors (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.kind.is_buffer())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn slope_bank(&self) -> SlopeBank {
        SlopeBank {
            layers: self
                .spec
                .rrelu_layers()
                .into_iter()
                .map(|(name, _)| SlopeLayer {
                    slopes: self.get(&format!("{name}.slope")).map(|t| t.data().to_vec()).unwrap_or_default(),
                    name,
                    trainable: true,
                })
                .collect(),
        }
    }

    pub fn set_slopes(&mut self, layer: &str, slopes: Vec<f32>) -> Result<()> {
        let t = Tensor::from_vec(slopes);
        self.set(&format!("{layer}.slope"), t)
    }

    /// Builds the forward pass for `input` (`[N, ...input_shape]`). Tensors for
    /// which `trainable` returns true become gradient-carrying leaves.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        input: Var,
        mode: Mode,
        trainable: &dyn Fn(ParamKind) -> bool,
    ) -> Result<Forward> {
        let mut fw = Forward {
            logits: input,
            bn_stats: Vec::new(),
            vars: HashMap::new(),
        };
        let x = self.run(&self.spec.layers, g, input, mode, trainable, &mut fw)?;
        fw.logits = x;
        Ok(fw)
    }

    fn leaf(
        &self,
        g: &mut Graph<f32>,
        name: &str,
        trainable: &dyn Fn(ParamKind) -> bool,
        fw: &mut Forward,
    ) -> Result<Var> {
        if let Some(&v) = fw.vars.get(name) {
            return Ok(v);
        }
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("model has no tensor `{name}`")))?;
        let p = &self.params[i];
        let v = g.leaf(p.value.clone(), trainable(p.kind));
        fw.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn run(
        &self,
        layers: &[LayerDef],
        g: &mut Graph<f32>,
        mut x: Var,
        mode: Mode,
        trainable: &dyn Fn(ParamKind) -> bool,
        fw: &mut Forward,
    ) -> Result<Var> {
        for l in layers {
            x = match l {
                LayerDef::Flatten => {
                    let s = g.value(x).shape();
                    let n = s[0];
                    let rest = s[1..].iter().product::<usize>();
                    g.reshape(x, &[n, rest])?
                }
                LayerDef::Linear { name, bias, .. } => {
                    let w = self.leaf(g, &format!("{name}.weight"), trainable, fw)?;
                    let b = if *bias {
                        Some(self.leaf(g, &format!("{name}.bias"), trainable, fw)?)
                    } else {
                        None
                    };
                    g.linear(x, w, b)?
                }
                LayerDef::Conv { name, stride, pad, .. } => {
                    let w = self.leaf(g, &format!("{name}.weight"), trainable, fw)?;
                    g.conv2d(x, w, *stride, *pad)?
                }
                LayerDef::BatchNorm { name, .. } => {
                    let gamma = self.leaf(g, &format!("{name}.gamma"), trainable, fw)?;
                    let beta = self.leaf(g, &format!("{name}.beta"), trainable, fw)?;
                    match mode {
                        Mode::Train => {
                            let (y, stats) = g.batchnorm(x, gamma, beta, BnMode::Train { eps: BN_EPS })?;
                            if let Some(s) = stats {
                                fw.bn_stats.push((name.clone(), s));
                            }
                            y
                        }
                        Mode::Eval => {
                            let mean = self.tensor(&format!("{name}.running_mean"))?;
                            let var = self.tensor(&format!("{name}.running_var"))?;
                            let bn = BnMode::Eval {
                                mean: mean.data(),
                                var: var.data(),
                                eps: BN_EPS,
                            };
                            g.batchnorm(x, gamma, beta, bn)?.0
                        }
                    }
                }
                LayerDef::Activation { act: ActivationKind::Relu, .. } => g.relu(x),
                LayerDef::Activation { name, .. } => {
                    let b = self.leaf(g, &format!("{name}.slope"), trainable, fw)?;
                    g.rrelu(x, b)?
                }
                LayerDef::Residual {
                    branch,
                    stride,
                    c_out,
                    ..
                } => {
                    let skip = g.shortcut(x, *stride, *c_out)?;
                    if branch.is_empty() {
                        skip
                    } else {
                        let y = self.run(branch, g, x, mode, trainable, fw)?;
                        g.add(y, skip)?
                    }
                }
                LayerDef::GlobalAvgPool => g.global_avg_pool(x)?,
                LayerDef::Shift { name, .. } => {
                    let s = self.leaf(g, &format!("{name}.shift"), trainable, fw)?;
                    g.add_channel_bias(x, s)?
                }
                LayerDef::Gather { indices, .. } => g.gather_channels(x, indices)?,
                LayerDef::Scatter { indices, width } => g.scatter_channels(x, indices, *width)?,
            };
        }
        Ok(x)
    }

    /// Eval-mode logits for a batch `[N, ...input_shape]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let fw = self.forward(&mut g, input, Mode::Eval, &|_| false)?;
        Ok(g.value(fw.logits).clone())
    }

    /// Folds train-mode batch statistics into the running estimates; the
    /// running variance uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<f32>)]) -> Result<()> {
        for (name, s) in stats {
            let unbias = if s.count > 1 {
                s.count as f32 / (s.count - 1) as f32
            } else {
                1.0
            };
            let mean = self
                .get_mut(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::Contract(format!("no running mean for `{name}`")))?;
            for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self
                .get_mut(&format!("{name}.running_var"))
                .ok_or_else(|| Error::Contract(format!("no running variance for `{name}`")))?;
            for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fcnn_counts() {
        let m = Model::new(build_fcnn(784, &[500], 10, ActivationKind::Relu)).unwrap();
        assert_eq!(m.num_params(), 397_010);
        let r = Model::new(build_fcnn(784, &[500], 10, ActivationKind::Rrelu)).unwrap();
        assert_eq!(r.num_params() - m.num_params(), 500);
        let lin = build_fcnn(20, &[], 3, ActivationKind::Rrelu);
        assert_eq!(lin.layers.len(), 2);
        assert_eq!(Model::new(lin).unwrap().num_params(), 63);
    }

    #[test]
    fn resnet_counts() {
        let r20 = Model::new(build_resnet(3, 10, ActivationKind::Relu).unwrap()).unwrap();
        assert_eq!(r20.num_params(), 269_712);
        let r20r = Model::new(build_resnet(3, 10, ActivationKind::Rrelu).unwrap()).unwrap();
        assert_eq!(r20r.slope_bank().total(), 672);
        let r56 = build_resnet(9, 10, ActivationKind::Rrelu).unwrap();
        let slopes: usize = r56.rrelu_layers().iter().map(|(_, c)| c).sum();
        assert_eq!(slopes, 2016);
    }

    #[test]
    fn wrn_layout() {
        assert!(build_wrn(15, 4, 10, ActivationKind::Relu).is_err());
        let w1 = build_wrn(16, 1, 10, ActivationKind::Relu).unwrap();
        let mut thin = build_residual("wrn-16-1".into(), [3, 32, 32], 16, &[16, 32, 64], 2, 10, ActivationKind::Relu)
            .unwrap();
        thin.name = w1.name.clone();
        assert_eq!(w1, thin);
    }

    #[test]
    fn forward_shapes_are_finite() {
        let spec = build_residual("t".into(), [3, 8, 8], 4, &[4, 8], 1, 5, ActivationKind::Rrelu).unwrap();
        let m = Model::new(spec).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.5);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.all_finite());
    }

    #[test]
    fn mismatched_chain_is_structural() {
        let mut spec = build_fcnn(4, &[3], 2, ActivationKind::Relu);
        if let LayerDef::Linear { in_features, .. } = &mut spec.layers[3] {
            *in_features = 5;
        }
        assert!(matches!(Model::new(spec), Err(Error::Structural { .. })));
    }

    #[test]
    fn spec_names() {
        let s = spec_from_name("fcnn-784-500-10", &[1, 28, 28], 10, ActivationKind::Rrelu).unwrap();
        assert_eq!(s, build_fcnn(784, &[500], 10, ActivationKind::Rrelu));
        assert!(spec_from_name("resnet-21", &[3, 32, 32], 10, ActivationKind::Relu).is_err());
        assert!(spec_from_name("vgg", &[3, 32, 32], 10, ActivationKind::Relu).is_err());
        let r = spec_from_name("resnet-20", &[3, 32, 32], 10, ActivationKind::Relu).unwrap();
        assert_eq!(r, build_resnet(3, 10, ActivationKind::Relu).unwrap());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = build_wrn(16, 2, 100, ActivationKind::Rrelu).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&j).unwrap(), s);
    }
}
