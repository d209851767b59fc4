//! Weight and slope initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};
use crate::tensor::Tensor;

/// Lower edge of the positive slope support, `tan 35°`.
pub fn gmm_low() -> f64 {
    35f64.to_radians().tan()
}

/// Upper edge of the positive slope support, `tan 55°`.
pub fn gmm_high() -> f64 {
    55f64.to_radians().tan()
}

/// Parent normal of each mixture component: mean `±1`, variance 3.
pub const GMM_VARIANCE: f64 = 3.0;

/// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kaiming_with(shape, fan_in, &mut rng)
}

fn kaiming_with(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("extent matches shape")
}

/// Draws from the two-component truncated mixture: a fair sign picks the
/// component, then `Normal(±1, 3)` is rejection-sampled into
/// `±[tan 35°, tan 55°]`.
pub fn sample_truncated_gmm(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gmm_with(n, &mut rng)
}

fn gmm_with(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (lo, hi) = (gmm_low(), gmm_high());
    let parent = Normal::new(1.0, GMM_VARIANCE.sqrt()).expect("finite std");
    (0..n)
        .map(|_| {
            let negative = rng.random_bool(0.5);
            // the negative component mirrors the positive one
            let mag = loop {
                let s = parent.sample(rng);
                if (lo..=hi).contains(&s) {
                    break s as f32;
                }
            };
            // rounding to f32 can step just outside the interval
            let mag = mag.clamp(lo as f32, hi as f32);
            if negative {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        // linear weights are stored [in, out]
        2 => shape[0],
        // conv filters [c_out, c_in, k, k]
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().product(),
    }
}

/// Training from scratch: Kaiming weights, zero biases, unit BN scale, and
/// truncated-mixture slopes. The stem activation is a plain ReLU in every
/// built model, so it has no slopes to draw.
pub fn init_type1(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = match p.kind {
            ParamKind::Weight => kaiming_with(&shape, fan_in(&shape), &mut rng),
            ParamKind::Slope => Tensor::new(shape.clone(), gmm_with(shape[0], &mut rng)).expect("slope extent"),
            ParamKind::BnGamma | ParamKind::RunningVar => Tensor::ones(&shape),
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean | ParamKind::Shift => Tensor::zeros(&shape),
        };
    }
}

/// Kaiming weights with every slope left at 1, for plain ReLU baselines.
pub fn init_kaiming(model: &mut Model, seed: u64) {
    init_type1(model, seed);
    for p in model.params_mut() {
        if p.kind == ParamKind::Slope {
            p.value = Tensor::ones(p.value.shape());
        }
    }
}

/// Warm start from a trained network: copies every weight and batch-norm
/// tensor by name and sets every slope to exactly 1.
pub fn init_type2(model: &mut Model, pretrained: &Model) -> Result<()> {
    for p in model.params_mut() {
        if p.kind == ParamKind::Slope {
            p.value = Tensor::ones(p.value.shape());
            continue;
        }
        let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l).to_string();
        let src = pretrained.get(&p.name).ok_or_else(|| Error::CheckpointIncompatible {
            layer: layer.clone(),
            reason: format!("pretrained network has no tensor `{}`", p.name),
        })?;
        if src.shape() != p.value.shape() {
            return Err(Error::CheckpointIncompatible {
                layer,
                reason: format!("shape {:?} in pretrained network, {:?} expected", src.shape(), p.value.shape()),
            });
        }
        p.value = src.clone();
    }
    let extra: Vec<&str> = pretrained
        .params()
        .iter()
        .filter(|p| p.kind != ParamKind::Slope && model.get(&p.name).is_none())
        .map(|p| p.name.as_str())
        .collect();
    if let Some(name) = extra.first() {
        return Err(Error::CheckpointIncompatible {
            layer: name.rsplit_once('.').map_or(*name, |(l, _)| l).to_string(),
            reason: "tensor has no counterpart in the target network".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fcnn, ActivationKind};

    #[test]
    fn kaiming_statistics() {
        let t = kaiming_init(&[100_000], 2, 11);
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 0.02);
        assert!(mean.abs() < 3.0 / n.sqrt());
        assert_eq!(t, kaiming_init(&[100_000], 2, 11));
    }

    #[test]
    fn gmm_support_and_balance() {
        let s = sample_truncated_gmm(100_000, 3);
        assert!(s.iter().all(|v| (0.7002..=1.4282).contains(&v.abs())));
        let neg = s.iter().filter(|&&v| v < 0.0).count() as f64 / s.len() as f64;
        assert!((0.48..=0.52).contains(&neg));
        assert!(sample_truncated_gmm(0, 3).is_empty());
    }

    #[test]
    fn type2_mismatch_names_layer() {
        let src = Model::new(build_fcnn(8, &[6], 2, ActivationKind::Relu)).unwrap();
        let mut dst = Model::new(build_fcnn(8, &[5], 2, ActivationKind::Rrelu)).unwrap();
        match init_type2(&mut dst, &src) {
            Err(Error::CheckpointIncompatible { layer, .. }) => assert_eq!(layer, "fc1"),
            other => panic!("{other:?}"),
        }
    }
}
