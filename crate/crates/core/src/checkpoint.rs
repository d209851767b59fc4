//! Checkpoint directories: `manifest.json` plus a raw little-endian `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ParamKind};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: model.spec().clone(),
        tensors,
    };
    fs::write(dir.join(BLOB), blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let corrupt = |reason: String| Error::CorruptManifest {
        path: path.clone(),
        reason,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format_version {}", m.format_version)));
    }
    let mut end = 0u64;
    for t in &m.tensors {
        if t.dtype != "f32" {
            return Err(corrupt(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
        }
        if t.offset < end {
            return Err(corrupt(format!("tensor `{}` overlaps its predecessor", t.name)));
        }
        end = t.offset + 4 * t.shape.iter().product::<usize>() as u64;
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path)?;
    let mut model = Model::new(manifest.spec.clone())?;
    let expected = model.spec().param_layout();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::CheckpointIncompatible {
            layer: manifest.spec.name.clone(),
            reason: format!(
                "manifest lists {} tensors, layout has {}",
                manifest.tensors.len(),
                expected.len()
            ),
        });
    }
    for (entry, (name, _, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::CheckpointIncompatible {
                layer: entry.name.clone(),
                reason: format!("stored {:?} but the layout expects `{name}` {shape:?}", entry.shape),
            });
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let needed = entry.offset + 4 * n as u64;
        if needed > blob.len() as u64 {
            return Err(Error::TruncatedBlob {
                path: blob_path.clone(),
                tensor: entry.name.clone(),
                needed,
                actual: blob.len() as u64,
            });
        }
        let data = blob[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        model.set(name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(model)
}

/// Loads a checkpoint and checks that it was saved from `spec`.
pub fn load_checkpoint_for(dir: &Path, spec: &ModelSpec) -> Result<Model> {
    let model = load_checkpoint(dir)?;
    let stored = model.spec().param_layout();
    let wanted = spec.param_layout();
    for ((sn, _, ss), (wn, _, ws)) in stored.iter().zip(&wanted) {
        if sn != wn || ss != ws {
            return Err(Error::CheckpointIncompatible {
                layer: wn.clone(),
                reason: format!("checkpoint has `{sn}` {ss:?}, expected {ws:?}"),
            });
        }
    }
    if stored.len() != wanted.len() || model.spec() != spec {
        return Err(Error::CheckpointIncompatible {
            layer: spec.name.clone(),
            reason: "checkpoint layout differs from the requested model".into(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::init_type1;
    use crate::model::{build_fcnn, build_residual, ActivationKind};

    #[test]
    fn offsets_strictly_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(build_fcnn(6, &[4, 3], 2, ActivationKind::Rrelu)).unwrap();
        init_type1(&mut m, 1);
        save_checkpoint(&m, dir.path()).unwrap();
        let man = read_manifest(dir.path()).unwrap();
        for w in man.tensors.windows(2) {
            let size = 4 * w[0].shape.iter().product::<usize>() as u64;
            assert!(w[1].offset >= w[0].offset + size);
        }
        assert_eq!(load_checkpoint(dir.path()).unwrap(), m);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(
            build_residual("r".into(), [3, 8, 8], 4, &[4], 1, 2, ActivationKind::Rrelu).unwrap(),
        )
        .unwrap();
        init_type1(&mut m, 2);
        save_checkpoint(&m, dir.path()).unwrap();

        let other = build_residual("r".into(), [3, 8, 8], 4, &[8], 1, 2, ActivationKind::Rrelu).unwrap();
        assert!(matches!(
            load_checkpoint_for(dir.path(), &other),
            Err(Error::CheckpointIncompatible { .. })
        ));

        let blob = fs::read(dir.path().join(BLOB)).unwrap();
        fs::write(dir.path().join(BLOB), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::TruncatedBlob { .. })));

        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptManifest { .. })));
    }
}
