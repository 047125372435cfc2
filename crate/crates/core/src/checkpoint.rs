//! Model checkpoints in the safetensors format. Each parameter is stored as
//! an `F32` tensor under its path; the model configuration travels in the
//! header metadata, one entry per configuration key.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Result, TunesError};
use crate::kv::KvMap;
use crate::model::{TunesConfig, TunesModel};

const FORMAT_KEY: &str = "format";
const FORMAT_VALUE: &str = "tunes-1";
/// Prefix of caller-supplied metadata entries.
const EXTRA_PREFIX: &str = "extra.";

fn ck(msg: impl Into<String>) -> TunesError {
    TunesError::Checkpoint(msg.into())
}

/// Serialises parameters and configuration. `extra` entries are stored as
/// additional metadata.
pub fn to_bytes(model: &TunesModel, extra: &KvMap) -> Result<Vec<u8>> {
    let mut meta: HashMap<String, String> = model
        .config()
        .to_kv()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    meta.insert(FORMAT_KEY.into(), FORMAT_VALUE.into());
    for (k, v) in extra.iter() {
        meta.insert(format!("{EXTRA_PREFIX}{k}"), v.to_string());
    }
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .iter()
        .map(|(_, p)| {
            let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (p.name.clone(), p.shape.clone(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| ck(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(meta)).map_err(|e| ck(e.to_string()))
}

/// Restores a model: rebuilds it from the stored configuration and
/// overwrites every parameter. Returns the extra metadata too.
pub fn from_bytes(bytes: &[u8]) -> Result<(TunesModel, KvMap)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ck(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ck("missing metadata"))?;
    match meta.get(FORMAT_KEY) {
        Some(v) if v == FORMAT_VALUE => {}
        other => return Err(ck(format!("unsupported checkpoint format {other:?}"))),
    }
    let mut config_kv = KvMap::new();
    let mut extra = KvMap::new();
    let mut keys: Vec<&String> = meta.keys().collect();
    keys.sort();
    for k in keys {
        if let Some(stripped) = k.strip_prefix(EXTRA_PREFIX) {
            extra.set(stripped, meta[k].clone());
        } else if k != FORMAT_KEY {
            config_kv.set(k, meta[k].clone());
        }
    }
    let config = TunesConfig::from_kv(&config_kv)?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| ck(e.to_string()))?;
    let stored: usize = tensors
        .tensors()
        .iter()
        .map(|(_, v)| v.shape().iter().product::<usize>())
        .sum();
    check_sizes(&config, stored)?;
    let mut model = TunesModel::new(config)?;
    if tensors.len() != model.params().len() {
        return Err(ck(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let (name, shape) = {
            let p = model.params().param(id);
            (p.name.clone(), p.shape.clone())
        };
        let view = tensors
            .tensor(&name)
            .map_err(|_| ck(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
            return Err(ck(format!(
                "{name}: expected F32 {shape:?}, found {:?} {:?}",
                view.dtype(),
                view.shape()
            )));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ck(format!("{name}: non-finite value")));
        }
        let target = model.params_mut().get_mut(id);
        for (dst, src) in target.iter_mut().zip(values) {
            *dst = src;
        }
    }
    Ok((model, extra))
}

/// Rejects configurations whose weight matrices alone would need more
/// values than the file stores, before any of them is allocated.
fn check_sizes(config: &TunesConfig, stored: usize) -> Result<()> {
    let d = config.dim;
    let sizes = [
        ("input_dim", config.input_dim.saturating_mul(d)),
        ("kernel_size", config.kernel_size.saturating_mul(d).saturating_mul(d)),
        ("ffn_dim", config.ffn_dim.saturating_mul(d)),
        ("heads", config.heads.saturating_mul(config.head_dim).saturating_mul(d)),
        ("num_classes", config.num_classes.saturating_mul(d)),
        ("blocks_per_stage", config.blocks_per_stage.saturating_mul(d)),
        ("num_transformer_blocks", config.num_transformer_blocks.saturating_mul(d)),
        ("scales", config.scales.len().saturating_mul(d)),
    ];
    match sizes.iter().find(|(_, n)| *n > stored) {
        Some((key, n)) => Err(ck(format!(
            "configuration ({key}) implies at least {n} values, file stores {stored}"
        ))),
        None => Ok(()),
    }
}

pub fn save(model: &TunesModel, extra: &KvMap, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, extra)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TunesModel, KvMap)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small() -> TunesConfig {
        TunesConfig {
            input_dim: 12,
            dim: 8,
            head_dim: 8,
            ffn_dim: 16,
            num_classes: 3,
            seed: 4,
            ..TunesConfig::offline()
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let mut model = TunesModel::new(small()).unwrap();
        // move away from the seeded initialisation
        let id = model.params().find("head.0.bias").unwrap();
        model.params_mut().get_mut(id).fill(0.25);
        let mut extra = KvMap::new();
        extra.set("epoch", "7");
        let bytes = to_bytes(&model, &extra).unwrap();
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(meta.get("epoch"), Some("7"));
        let x = Array2::from_shape_fn((36, 12), |(t, j)| ((t * 7 + j) % 5) as f32 * 0.1);
        assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = TunesModel::new(small()).unwrap();
        save(&model, &KvMap::new(), &path).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back.count_parameters(), model.count_parameters());
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let model = TunesModel::new(small()).unwrap();
        let bytes = to_bytes(&model, &KvMap::new()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(&[0u8; 4]).is_err());
        assert!(from_bytes(b"").is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let model = TunesModel::new(small()).unwrap();
        let bytes = to_bytes(&model, &KvMap::new()).unwrap();
        let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
        let mut meta = header.metadata().clone().unwrap();
        meta.insert("num_transformer_blocks".into(), "2".into());
        let tensors = SafeTensors::deserialize(&bytes).unwrap();
        let pairs: Vec<(String, TensorView<'_>)> = tensors.tensors();
        let forged = safetensors::serialize(pairs, &Some(meta)).unwrap();
        assert!(matches!(from_bytes(&forged), Err(TunesError::Checkpoint(_))));
    }

    #[test]
    fn oversized_config_is_rejected_before_allocation() {
        let model = TunesModel::new(small()).unwrap();
        let bytes = to_bytes(&model, &KvMap::new()).unwrap();
        let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
        let mut meta = header.metadata().clone().unwrap();
        meta.insert("dim".into(), "1000000000".into());
        let tensors = SafeTensors::deserialize(&bytes).unwrap();
        let forged = safetensors::serialize(tensors.tensors(), &Some(meta)).unwrap();
        let err = from_bytes(&forged).unwrap_err();
        assert!(err.to_string().contains("implies at least"), "{err}");
    }
}
