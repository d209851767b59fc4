//! Run configuration and dataset resolution.

use std::fs;
use std::path::{Path, PathBuf};

use rrelu::data::{
    cifar_dir, data_root, load_cifar_bin, load_mnist, synthetic_blobs, Augment, CifarVariant, Dataset, Standardizer,
};
use rrelu::model::ActivationKind;
use rrelu::training::{OptimizerConfig, Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Kaiming weights, slopes from the truncated Gaussian mixture.
    Type1,
    /// Weights copied from a ReLU checkpoint, unit slopes.
    Type2,
    /// Kaiming weights, unit slopes.
    Kaiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub shape: Vec<usize>,
    pub classes: usize,
    pub separation: f32,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            shape: vec![1, 8, 8],
            classes: 2,
            separation: 3.0,
            train: 512,
            test: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Dataset root; `RRELU_DATA_DIR` or `./data` when absent.
    pub root: Option<PathBuf>,
    /// Keep only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub blobs: BlobsConfig,
    /// Per-channel constants fitted on the training split; filled in by `train`.
    pub standardizer: Option<Standardizer>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: None,
            train_limit: None,
            test_limit: None,
            blobs: BlobsConfig::default(),
            standardizer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: String,
    pub activation: ActivationKind,
    pub init: InitKind,
    pub pretrained: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "fcnn-784-500-10".into(),
            activation: ActivationKind::Rrelu,
            init: InitKind::Type1,
            pretrained: None,
            data: DataConfig::default(),
            train: default_train("fcnn-784-500-10", DatasetKind::Mnist),
            out: None,
        }
    }
}

/// Adam with cosine decay for fully connected models; SGD with momentum,
/// weight decay and cosine decay for convolutional ones.
pub fn default_train(model: &str, dataset: DatasetKind) -> TrainConfig {
    let fcnn = model.starts_with("fcnn");
    TrainConfig {
        epochs: if fcnn { 300 } else { 200 },
        batch_size: 128,
        optimizer: if fcnn {
            OptimizerConfig::adam(1e-3)
        } else {
            OptimizerConfig::sgd(0.1)
        },
        schedule: Schedule::Cosine { lr_min: 0.0 },
        seed: 0,
        weight_decay: if fcnn { 0.0 } else { 5e-4 },
        freeze_weights: false,
        augment: match dataset {
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => Augment::Crop4Flip,
            _ => Augment::None,
        },
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(rrelu::Error::from)? + "\n";
    fs::write(path, text).map_err(rrelu::Error::from)?;
    Ok(())
}

/// Train and test splits, standardized with training-split constants (the
/// stored ones when present).
pub struct Splits {
    pub train: Option<Dataset>,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

impl DataConfig {
    fn root(&self) -> PathBuf {
        self.root.clone().unwrap_or_else(data_root)
    }

    fn raw(&self, train: bool) -> rrelu::Result<Dataset> {
        let ds = match self.dataset {
            DatasetKind::Mnist => load_mnist(&self.root(), train)?,
            DatasetKind::Cifar10 => load_cifar_bin(&cifar_dir(&self.root(), CifarVariant::C10), CifarVariant::C10, train)?,
            DatasetKind::Cifar100 => {
                load_cifar_bin(&cifar_dir(&self.root(), CifarVariant::C100), CifarVariant::C100, train)?
            }
            DatasetKind::Blobs => {
                let b = &self.blobs;
                let all = synthetic_blobs(b.train + b.test, &b.shape, b.classes, b.separation, b.seed)?;
                let idx: Vec<usize> = if train {
                    (0..b.train).collect()
                } else {
                    (b.train..b.train + b.test).collect()
                };
                all.subset(&idx, if train { "train" } else { "test" })?
            }
        };
        let limit = if train { self.train_limit } else { self.test_limit };
        match limit {
            Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>(), &ds.split),
            _ => Ok(ds),
        }
    }

    /// Loads the test split, and the training split when `with_train` or when
    /// no standardizer is stored yet.
    pub fn load(&self, with_train: bool) -> rrelu::Result<Splits> {
        let train = if with_train || self.standardizer.is_none() {
            Some(self.raw(true)?)
        } else {
            None
        };
        let standardizer = match (&self.standardizer, &train) {
            (Some(s), _) => s.clone(),
            (None, Some(t)) => Standardizer::fit(t)?,
            (None, None) => unreachable!("training split loaded when constants are missing"),
        };
        let mut test = self.raw(false)?;
        standardizer.apply(&mut test)?;
        let train = match train {
            Some(mut t) if with_train => {
                standardizer.apply(&mut t)?;
                Some(t)
            }
            _ => None,
        };
        Ok(Splits {
            train,
            test,
            standardizer,
        })
    }

    pub fn sample_shape_and_classes(splits: &Splits) -> (Vec<usize>, usize) {
        (splits.test.sample_shape().to_vec(), splits.test.num_classes)
    }
}
