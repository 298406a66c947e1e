//! Self-describing checkpoint container: a JSON metadata header followed by
//! named tensors (name, dtype, shape, raw little-endian payload). Round
//! trips are bit-lossless.
//!
//! Layout, little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVTC"
//! 4       2     version (u16) = 1
//! 6       4     meta_len (u32)
//! 10      -     meta: UTF-8 JSON (CheckpointMeta)
//! -       4     n_tensors (u32)
//! per tensor:
//!         2     name_len (u16), then name UTF-8
//!         1     dtype (u8): 0 = f32, 1 = f64
//!         1     ndim (u8), then ndim × u32 extents
//!         -     product(extents) scalars, little-endian
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, VitEncoder};
use crate::config::RunConfig;
use crate::error::{AvtError, Result};
use crate::head::AvtModel;
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"AVTC";
const VERSION: u16 = 1;

/// Everything needed to rebuild the model and continue a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub vocab_hash: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub best_val_top1: f64,
}

/// A named tensor as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredTensor<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[StoredTensor<F>],
) -> Result<()> {
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| AvtError::Config(format!("cannot serialize checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(F::dtype_tag());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let expect: usize = t.shape.iter().product();
        assert_eq!(expect, t.data.len(), "stored tensor `{}` shape/data mismatch", t.name);
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    fs::write(path, &out).map_err(|e| AvtError::io(path.display().to_string(), e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointMeta, Vec<StoredTensor<F>>)> {
    let bytes = fs::read(path).map_err(|e| AvtError::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(AvtError::Format {
                offset: *pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(AvtError::Format { offset: 0, msg: "not a checkpoint file".to_string() });
    }
    let vb = take(&mut pos, 2, "version")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != VERSION {
        return Err(AvtError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let lb = take(&mut pos, 4, "meta length")?;
    let meta_len = u32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]) as usize;
    let meta_bytes = take(&mut pos, meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| AvtError::Format { offset: 10, msg: format!("bad metadata JSON: {e}") })?;

    let nb = take(&mut pos, 4, "tensor count")?;
    let n_tensors = u32::from_le_bytes([nb[0], nb[1], nb[2], nb[3]]) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let nl = take(&mut pos, 2, "name length")?;
        let name_len = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name_bytes = take(&mut pos, name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| AvtError::Format { offset: pos as u64, msg: "tensor name is not UTF-8".to_string() })?;
        let dtype = take(&mut pos, 1, "dtype")?[0];
        if dtype != F::dtype_tag() {
            return Err(AvtError::Format {
                offset: (pos - 1) as u64,
                msg: format!("tensor `{name}` has dtype tag {dtype}, expected {}", F::dtype_tag()),
            });
        }
        let ndim = take(&mut pos, 1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let db = take(&mut pos, 4, "extent")?;
            shape.push(u32::from_le_bytes([db[0], db[1], db[2], db[3]]) as usize);
        }
        let count: usize = shape.iter().product();
        let width = F::width();
        let payload = take(&mut pos, count * width, "payload")?;
        let data = payload.chunks_exact(width).map(F::read_le).collect();
        tensors.push(StoredTensor { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(AvtError::Format {
            offset: pos as u64,
            msg: format!("{} trailing bytes after last tensor", bytes.len() - pos),
        });
    }
    Ok((meta, tensors))
}

/// Builds a model with the architecture the config describes; parameters are
/// freshly initialized from the config seed.
pub fn build_model<F: Scalar>(run: &RunConfig, input_dim: usize, num_classes: usize) -> AvtModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let backbone = if run.backbone == "fixed" {
        None
    } else {
        let cfg = BackboneConfig::preset(&run.backbone).expect("validated backbone preset");
        Some(VitEncoder::new(cfg, &mut rng))
    };
    AvtModel::new(backbone, input_dim, run.head_config(), num_classes, &mut rng)
}

/// Model parameters plus any extra buffers (optimizer state) as stored
/// tensors.
pub fn snapshot_model<F: Scalar>(model: &AvtModel<F>, extra: &[(String, Vec<F>)]) -> Vec<StoredTensor<F>> {
    let mut out: Vec<StoredTensor<F>> = model
        .named_params()
        .into_iter()
        .map(|(name, t)| StoredTensor { name, shape: t.shape().to_vec(), data: t.to_vec() })
        .collect();
    for (name, data) in extra {
        out.push(StoredTensor { name: name.clone(), shape: vec![data.len()], data: data.clone() });
    }
    out
}

/// Rebuilds the model from a checkpoint. Returns leftover stored tensors
/// (optimizer state) keyed by name.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(CheckpointMeta, AvtModel<F>, BTreeMap<String, Vec<F>>)> {
    let (meta, tensors) = load_checkpoint::<F>(path)?;
    meta.run.validate()?;
    let model = build_model::<F>(&meta.run, meta.input_dim, meta.num_classes);
    let mut by_name: BTreeMap<String, StoredTensor<F>> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    for (name, param) in model.named_params() {
        let stored = by_name.remove(&name).ok_or_else(|| AvtError::Format {
            offset: 0,
            msg: format!("checkpoint is missing parameter `{name}`"),
        })?;
        if stored.shape != param.shape() {
            return Err(AvtError::Format {
                offset: 0,
                msg: format!(
                    "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                    stored.shape,
                    param.shape()
                ),
            });
        }
        param.set_data(&stored.data);
    }
    let extra = by_name.into_iter().map(|(k, v)| (k, v.data)).collect();
    Ok((meta, model, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::ClipInput;
    use crate::tensor::{no_grad, Tensor};

    fn meta_for(run: RunConfig) -> CheckpointMeta {
        CheckpointMeta {
            input_dim: run.feature_dim,
            num_classes: run.k,
            vocab_hash: 123,
            epoch: 3,
            best_val_top1: 0.5,
            run,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avtc");
        let run = RunConfig::default();
        let model = build_model::<f32>(&run, run.feature_dim, run.k);
        let extra = vec![("optim.v.projector.weight".to_string(), vec![0.25f32; 4])];
        save_checkpoint(&path, &meta_for(run.clone()), &snapshot_model(&model, &extra)).unwrap();

        let (meta, loaded, leftover) = load_model::<f32>(&path).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(meta.run, run);
        assert_eq!(leftover["optim.v.projector.weight"], vec![0.25f32; 4]);
        for ((n1, a), (n2, b)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(n1, n2);
            let (av, bv) = (a.to_vec(), b.to_vec());
            assert_eq!(av.len(), bv.len());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {n1} must round-trip exactly");
            }
        }
    }

    #[test]
    fn loaded_model_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avtc");
        let run = RunConfig::default();
        let model = build_model::<f32>(&run, run.feature_dim, run.k);
        save_checkpoint(&path, &meta_for(run.clone()), &snapshot_model(&model, &[])).unwrap();
        let (_, loaded, _) = load_model::<f32>(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(vec![6, run.feature_dim], 1.0, &mut rng);
        let a = no_grad(|| model.forward(&ClipInput::Features(&x))).unwrap();
        let b = no_grad(|| loaded.forward(&ClipInput::Features(&x))).unwrap();
        assert_eq!(a.y_hat.to_vec(), b.y_hat.to_vec());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avtc");
        let run = RunConfig::default();
        let model = build_model::<f32>(&run, run.feature_dim, run.k);
        save_checkpoint(&path, &meta_for(run), &snapshot_model(&model, &[])).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path).unwrap_err(), AvtError::Format { .. }));
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avtc");
        let run = RunConfig::default();
        let model = build_model::<f32>(&run, run.feature_dim, run.k);
        save_checkpoint(&path, &meta_for(run), &snapshot_model(&model, &[])).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path).unwrap_err(), AvtError::Format { .. }));
    }
}
