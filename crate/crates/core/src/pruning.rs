//! Slope-threshold pruning: masks, threshold search, zeroing, structural
//! compaction, and equivalence checks.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::BnMode;
use crate::model::{visit_layers, ActivationKind, LayerDef, Model, ModelSpec, BN_EPS};
use crate::tensor::Tensor;
use crate::training::accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer: String,
    /// `true` marks a pruned channel.
    pub pruned: Vec<bool>,
}

impl LayerMask {
    pub fn alive(&self) -> Vec<usize> {
        (0..self.pruned.len()).filter(|&i| !self.pruned[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub gamma: f32,
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    /// Channels whose slope magnitude is strictly below `gamma`.
    pub fn from_threshold(model: &Model, gamma: f32) -> PruneMask {
        PruneMask {
            gamma,
            layers: model
                .slope_bank()
                .layers
                .into_iter()
                .map(|l| LayerMask {
                    pruned: l.slopes.iter().map(|s| s.abs() < gamma).collect(),
                    layer: l.name,
                })
                .collect(),
        }
    }

    pub fn empty(model: &Model) -> PruneMask {
        Self::from_threshold(model, 0.0)
    }

    pub fn pruned_count(&self) -> usize {
        self.layers.iter().map(LayerMask::count).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.len()).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Checks that the mask covers exactly the rotated-ReLU layers of `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let layers = spec.rrelu_layers();
        if layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "mask has {} layers, model has {} rotated-ReLU layers",
                self.layers.len(),
                layers.len()
            )));
        }
        for ((name, c), m) in layers.iter().zip(&self.layers) {
            if name != &m.layer || *c != m.pruned.len() {
                return Err(Error::Contract(format!(
                    "mask entry `{}` ({} channels) does not match layer `{name}` ({c} channels)",
                    m.layer,
                    m.pruned.len()
                )));
            }
        }
        Ok(())
    }
}

/// Rotated-ReLU layers inside a residual branch; only these may lose every
/// channel, since the skip then carries the unit on its own.
pub fn removable_layers(spec: &ModelSpec) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for l in &spec.layers {
        if let LayerDef::Residual { branch, .. } = l {
            visit_layers(branch, &mut |b| {
                if let LayerDef::Activation { name, act: ActivationKind::Rrelu, .. } = b {
                    out.insert(name.clone());
                }
            });
        }
    }
    out
}

/// First layer that `mask` would empty although it is not removable.
pub fn survival_violation(spec: &ModelSpec, mask: &PruneMask) -> Option<String> {
    let removable = removable_layers(spec);
    mask.layers
        .iter()
        .find(|m| !m.pruned.is_empty() && m.count() == m.pruned.len() && !removable.contains(&m.layer))
        .map(|m| m.layer.clone())
}

/// Sets every masked slope to exactly zero.
pub fn apply_mask_zero(model: &Model, mask: &PruneMask) -> Result<Model> {
    mask.validate(model.spec())?;
    let mut out = model.clone();
    for m in &mask.layers {
        let name = format!("{}.slope", m.layer);
        let t = out.get_mut(&name).expect("validated layer");
        for (s, &p) in t.data_mut().iter_mut().zip(&m.pruned) {
            if p {
                *s = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaCandidate {
    pub gamma: f32,
    pub accuracy: f64,
    pub fraction_pruned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSearchResult {
    pub gamma: f32,
    pub base_accuracy: f64,
    pub chosen_accuracy: f64,
    pub tolerance_pp: f64,
    pub pruned: usize,
    pub total: usize,
    pub candidates: Vec<GammaCandidate>,
}

/// Largest candidate threshold whose zeroed-slope accuracy on `heldout` stays
/// within `tolerance_pp` percentage points of the unpruned accuracy.
/// Candidates are 0 and every distinct slope magnitude; thresholds that would
/// empty a non-removable layer are not considered.
pub fn select_gamma(model: &Model, heldout: &Dataset, tolerance_pp: f64) -> Result<GammaSearchResult> {
    if heldout.is_empty() {
        return Err(Error::Input("held-out split is empty".into()));
    }
    if tolerance_pp.is_nan() || tolerance_pp < 0.0 {
        return Err(Error::Input(format!("tolerance {tolerance_pp} pp must be non-negative")));
    }
    let bank = model.slope_bank();
    let mut mags: Vec<f32> = bank.iter_abs().collect();
    mags.push(0.0);
    mags.sort_by(f32::total_cmp);
    mags.dedup();
    let base = accuracy(model, heldout, 500)?;
    let total = bank.total();
    let mut candidates = Vec::new();
    let mut best = (0.0f32, base, 0usize);
    for &gamma in &mags {
        let mask = PruneMask::from_threshold(model, gamma);
        if survival_violation(model.spec(), &mask).is_some() {
            break;
        }
        let pruned = mask.pruned_count();
        let acc = if pruned == 0 {
            base
        } else {
            accuracy(&apply_mask_zero(model, &mask)?, heldout, 500)?
        };
        candidates.push(GammaCandidate {
            gamma,
            accuracy: acc,
            fraction_pruned: if total == 0 { 0.0 } else { pruned as f64 / total as f64 },
        });
        if (base - acc) * 100.0 <= tolerance_pp + 1e-9 {
            best = (gamma, acc, pruned);
        }
    }
    Ok(GammaSearchResult {
        gamma: best.0,
        base_accuracy: base,
        chosen_accuracy: best.1,
        tolerance_pp,
        pruned: best.2,
        total,
        candidates,
    })
}

/// Copies `src` restricted to `rows` on axis 0 and `cols` on axis 1.
fn slice2(src: &Tensor, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Result<Tensor> {
    let s = src.shape();
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let r = rows.map(<[usize]>::to_vec).unwrap_or_else(|| all(s[0]));
    let c = cols.map(<[usize]>::to_vec).unwrap_or_else(|| all(s[1]));
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(r.len() * c.len() * inner);
    for &i in &r {
        for &j in &c {
            let off = (i * s[1] + j) * inner;
            data.extend_from_slice(&src.data()[off..off + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[0] = r.len();
    shape[1] = c.len();
    Tensor::new(shape, data)
}

fn slice1(src: &Tensor, keep: &[usize]) -> Tensor {
    Tensor::from_vec(keep.iter().map(|&i| src.data()[i]).collect())
}

struct Compactor<'a> {
    model: &'a Model,
    mask: HashMap<&'a str, &'a LayerMask>,
    tensors: Vec<(String, Tensor)>,
}

impl<'a> Compactor<'a> {
    fn alive(&self, layer: &str, width: usize) -> Vec<usize> {
        match self.mask.get(layer) {
            Some(m) => m.alive(),
            None => (0..width).collect(),
        }
    }

    fn put(&mut self, name: String, t: Tensor) {
        self.tensors.push((name, t));
    }

    fn copy(&mut self, name: &str) -> Result<()> {
        let t = self.model.tensor(name)?.clone();
        self.put(name.to_string(), t);
        Ok(())
    }

    fn copy_layer(&mut self, l: &LayerDef) -> Result<()> {
        for (name, _, _) in (ModelSpec {
            name: String::new(),
            input_shape: vec![],
            num_classes: 0,
            activation: ActivationKind::Relu,
            layers: vec![l.clone()],
        })
        .param_layout()
        {
            self.copy(&name)?;
        }
        Ok(())
    }

    fn bn_subset(&mut self, name: &str, keep: &[usize]) -> Result<LayerDef> {
        for suffix in ["gamma", "beta", "running_mean", "running_var"] {
            let n = format!("{name}.{suffix}");
            let t = slice1(self.model.tensor(&n)?, keep);
            self.put(n, t);
        }
        Ok(LayerDef::BatchNorm {
            name: name.to_string(),
            channels: keep.len(),
        })
    }

    fn act_subset(&mut self, name: &str, act: ActivationKind, keep: &[usize]) -> Result<LayerDef> {
        if act == ActivationKind::Rrelu {
            let n = format!("{name}.slope");
            let t = slice1(self.model.tensor(&n)?, keep);
            self.put(n, t);
        }
        Ok(LayerDef::Activation {
            name: name.to_string(),
            act,
            channels: keep.len(),
        })
    }

    /// Eval-mode output of a batch norm fed with zeros.
    fn bn_of_zero(&self, name: &str, keep: &[usize]) -> Result<Tensor> {
        let get = |s: &str| self.model.tensor(&format!("{name}.{s}")).map(|t| slice1(t, keep));
        let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("running_mean")?, get("running_var")?);
        let zero = Tensor::zeros(&[1, keep.len()]);
        let out = crate::kernels::batchnorm_forward(
            &zero,
            gamma.data(),
            beta.data(),
            BnMode::Eval {
                mean: mean.data(),
                var: var.data(),
                eps: BN_EPS,
            },
        )?;
        Ok(Tensor::from_vec(out.out.into_data()))
    }
}

fn unsupported(l: &LayerDef) -> Error {
    Error::Unsupported(format!(
        "compaction of `{}` in this position (only freshly built layouts are supported)",
        l.name().unwrap_or("<unnamed>")
    ))
}

/// Removes every masked channel physically. The result computes the same
/// eval-mode function as `apply_mask_zero(model, mask)`.
///
/// * Fully connected: column `i` of the producing weight, the slope, and row
///   `i` of the consuming weight go away.
/// * Inside a residual unit: filter `i` of the first conv, its batch-norm
///   channel and slope, and sub-filter `i` of every second-conv filter.
/// * After a residual join: filter `i` of the second conv and its batch-norm
///   channel go away; the channel slot stays in the feature map as zeros and
///   downstream consumers drop their matching sub-filters or rows.
/// * A unit whose inner layer loses every channel keeps only its skip plus
///   the constant its second batch norm produces from zero input.
pub fn compact(model: &Model, mask: &PruneMask) -> Result<Model> {
    let spec = model.spec();
    mask.validate(spec)?;
    if let Some(layer) = survival_violation(spec, mask) {
        return Err(Error::Structural {
            layer,
            reason: "every channel is masked and the layer cannot be removed".into(),
        });
    }
    let mut c = Compactor {
        model,
        mask: mask.layers.iter().map(|m| (m.layer.as_str(), m)).collect(),
        tensors: Vec::new(),
    };
    let layers = &spec.layers;
    let mut out: Vec<LayerDef> = Vec::new();
    // rows kept from a physically narrowed stream
    let mut narrowed: Option<Vec<usize>> = None;
    // full-width stream whose other channels are zero
    let mut sparse: Option<(Vec<usize>, usize)> = None;
    let mut i = 0;
    while i < layers.len() {
        let l = &layers[i];
        let next = layers.get(i + 1);
        match l {
            LayerDef::Flatten => out.push(l.clone()),
            LayerDef::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                if sparse.is_some() {
                    return Err(unsupported(l));
                }
                let rows = narrowed.take();
                let cols = match next {
                    Some(LayerDef::Activation {
                        name: an,
                        act: ActivationKind::Rrelu,
                        ..
                    }) => c.alive(an, *out_features),
                    _ => (0..*out_features).collect(),
                };
                let w = c.model.tensor(&format!("{name}.weight"))?;
                let w = slice2(w, rows.as_deref(), Some(&cols))?;
                c.put(format!("{name}.weight"), w);
                if *bias {
                    let b = slice1(c.model.tensor(&format!("{name}.bias"))?, &cols);
                    c.put(format!("{name}.bias"), b);
                }
                out.push(LayerDef::Linear {
                    name: name.clone(),
                    in_features: rows.as_ref().map_or(*in_features, Vec::len),
                    out_features: cols.len(),
                    bias: *bias,
                });
                if let Some(LayerDef::Activation { name: an, act, .. }) = next {
                    out.push(c.act_subset(an, *act, &cols)?);
                    i += 1;
                }
                if cols.len() != *out_features {
                    narrowed = Some(cols);
                }
            }
            LayerDef::Conv { .. } | LayerDef::BatchNorm { .. } => {
                if narrowed.is_some() || sparse.is_some() {
                    return Err(unsupported(l));
                }
                c.copy_layer(l)?;
                out.push(l.clone());
            }
            LayerDef::Activation { name, act, channels } => {
                if *act == ActivationKind::Rrelu && c.alive(name, *channels).len() != *channels {
                    return Err(unsupported(l));
                }
                c.copy_layer(l)?;
                out.push(l.clone());
            }
            LayerDef::Residual {
                name,
                branch,
                stride,
                c_out,
            } => {
                let Some(LayerDef::Activation {
                    name: act2,
                    act: act2_kind,
                    channels,
                }) = next
                else {
                    return Err(unsupported(l));
                };
                if channels != c_out || narrowed.is_some() {
                    return Err(unsupported(l));
                }
                let a2 = c.alive(act2, *c_out);
                let partial2 = a2.len() != *c_out;
                let incoming = sparse.take();
                let (new_branch, shift) = compact_branch(&mut c, l, branch, incoming.as_ref(), &a2)?;
                out.push(LayerDef::Residual {
                    name: name.clone(),
                    branch: new_branch,
                    stride: *stride,
                    c_out: *c_out,
                });
                if partial2 {
                    out.push(LayerDef::Gather {
                        indices: a2.clone(),
                        width: *c_out,
                    });
                }
                if let Some(values) = shift {
                    c.put(format!("{name}.shift"), values);
                    out.push(LayerDef::Shift {
                        name: name.clone(),
                        channels: a2.len(),
                    });
                }
                out.push(c.act_subset(act2, *act2_kind, &a2)?);
                if partial2 {
                    out.push(LayerDef::Scatter {
                        indices: a2.clone(),
                        width: *c_out,
                    });
                    sparse = Some((a2, *c_out));
                }
                i += 1;
            }
            LayerDef::GlobalAvgPool => {
                out.push(l.clone());
                if let Some((alive, width)) = sparse.take() {
                    out.push(LayerDef::Gather {
                        indices: alive.clone(),
                        width,
                    });
                    narrowed = Some(alive);
                }
            }
            LayerDef::Shift { .. } | LayerDef::Gather { .. } | LayerDef::Scatter { .. } => {
                return Err(unsupported(l));
            }
        }
        i += 1;
    }
    let new_spec = ModelSpec {
        layers: out,
        ..spec.clone()
    };
    let mut result = Model::new(new_spec)?;
    for (name, t) in c.tensors {
        result.set(&name, t)?;
    }
    Ok(result)
}

/// Compacts the `conv → bn → act → conv → bn` branch of one unit. Returns the
/// new branch and, for a fully removed branch, the constant it contributes on
/// the channels in `a2`.
fn compact_branch(
    c: &mut Compactor<'_>,
    unit: &LayerDef,
    branch: &[LayerDef],
    incoming: Option<&(Vec<usize>, usize)>,
    a2: &[usize],
) -> Result<(Vec<LayerDef>, Option<Tensor>)> {
    let [LayerDef::Conv {
        name: conv1,
        c_in,
        c_out: mid,
        k: k1,
        stride: s1,
        pad: p1,
    }, LayerDef::BatchNorm { name: bn1, .. }, LayerDef::Activation {
        name: act1,
        act: act1_kind,
        ..
    }, LayerDef::Conv {
        name: conv2,
        c_out: w,
        k: k2,
        stride: s2,
        pad: p2,
        ..
    }, LayerDef::BatchNorm { name: bn2, .. }] = branch
    else {
        return Err(unsupported(unit));
    };
    let a1 = c.alive(act1, *mid);
    if a1.is_empty() {
        let shift = c.bn_of_zero(bn2, a2)?;
        return Ok((Vec::new(), Some(shift)));
    }
    let mut out = Vec::new();
    let in_cols = incoming.map(|(alive, width)| {
        out.push(LayerDef::Gather {
            indices: alive.clone(),
            width: *width,
        });
        alive.clone()
    });
    let w1 = slice2(c.model.tensor(&format!("{conv1}.weight"))?, Some(&a1), in_cols.as_deref())?;
    c.put(format!("{conv1}.weight"), w1);
    out.push(LayerDef::Conv {
        name: conv1.clone(),
        c_in: in_cols.as_ref().map_or(*c_in, Vec::len),
        c_out: a1.len(),
        k: *k1,
        stride: *s1,
        pad: *p1,
    });
    out.push(c.bn_subset(bn1, &a1)?);
    out.push(c.act_subset(act1, *act1_kind, &a1)?);
    let w2 = slice2(c.model.tensor(&format!("{conv2}.weight"))?, Some(a2), Some(&a1))?;
    c.put(format!("{conv2}.weight"), w2);
    out.push(LayerDef::Conv {
        name: conv2.clone(),
        c_in: a1.len(),
        c_out: a2.len(),
        k: *k2,
        stride: *s2,
        pad: *p2,
    });
    out.push(c.bn_subset(bn2, a2)?);
    if a2.len() != *w {
        out.push(LayerDef::Scatter {
            indices: a2.to_vec(),
            width: *w,
        });
    }
    Ok((out, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares eval-mode logits of two models on `n_samples` standard-normal inputs.
pub fn verify_equivalence(a: &Model, b: &Model, n_samples: usize, tol: f64, seed: u64) -> Result<EquivalenceReport> {
    if a.spec().input_shape != b.spec().input_shape {
        return Err(Error::dim("verify_equivalence", &a.spec().input_shape, &b.spec().input_shape));
    }
    let shape = &a.spec().input_shape;
    let per: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0f64;
    let mut left = n_samples;
    while left > 0 {
        let n = left.min(100);
        left -= n;
        let data = (0..n * per).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let x = Tensor::new(full, data)?;
        let d = a.predict(&x)?.max_abs_diff(&b.predict(&x)?)? as f64;
        max_diff = if d.is_nan() { f64::INFINITY } else { max_diff.max(d) };
    }
    Ok(EquivalenceReport {
        samples: n_samples,
        max_abs_diff: max_diff,
        tolerance: tol,
        passed: max_diff <= tol,
    })
}
