//! Flat named-tensor container: a JSON header (name -> shape/offset plus
//! free-form metadata) followed by raw little-endian f64 payload. The
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"NTENSOR1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn save_named_tensors(path: &Path, entries: &[(String, &Tensor)], meta: Value) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    // Payload laid out in the given order; the header records offsets.
    for (name, t) in entries {
        if tensors
            .insert(name.clone(), TensorEntry { shape: t.shape().to_vec(), offset })
            .is_some()
        {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        offset += (t.numel() * 8) as u64;
    }
    let header = serde_json::to_vec(&Header { meta, tensors })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_named_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid(format!("{} is not a tensor container", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = BTreeMap::new();
    for (name, entry) in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::invalid(format!("tensor {name} runs past the payload")));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok((out, header.meta))
}

/// Saves model parameters only.
pub fn save_model(path: &Path, model: &Model, meta: Value) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = model
        .store
        .ids()
        .map(|id| (model.store.name(id).to_string(), model.store.tensor(id)))
        .collect();
    save_named_tensors(path, &entries, meta)
}

/// Loads parameters by name into an existing model; every parameter must be
/// present with a matching shape.
pub fn load_model(path: &Path, model: &mut Model) -> Result<Value> {
    let (tensors, meta) = load_named_tensors(path)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing parameter {name}")))?;
        if t.shape() != model.store.tensor(id).shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.store.tensor(id).shape()
            )));
        }
        *model.store.tensor_mut(id) = t.clone();
    }
    Ok(meta)
}

/// Saves model plus optimizer moments and the step counter, enough to
/// resume a run bitwise.
pub fn save_train_state(path: &Path, model: &Model, adam: &AdamState, step: usize, extra: Value) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (i, id) in model.store.ids().enumerate() {
        let name = model.store.name(id);
        let shape = model.store.tensor(id).shape().to_vec();
        owned.push((name.to_string(), model.store.tensor(id).clone()));
        owned.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), adam.m[i].clone())?));
        owned.push((format!("adam.v.{name}"), Tensor::new(shape, adam.v[i].clone())?));
    }
    let entries: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    let meta = serde_json::json!({ "step": step, "adam_step": adam.step, "extra": extra });
    save_named_tensors(path, &entries, meta)
}

pub fn load_train_state(path: &Path, model: &mut Model, adam: &mut AdamState) -> Result<(usize, Value)> {
    let (tensors, meta) = load_named_tensors(path)?;
    for (i, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let name = model.store.name(id).to_string();
        let get = |key: &str| {
            tensors
                .get(key)
                .ok_or_else(|| Error::invalid(format!("train state missing {key}")))
                .cloned()
        };
        *model.store.tensor_mut(id) = get(&name)?;
        adam.m[i] = get(&format!("adam.m.{name}"))?.data().to_vec();
        adam.v[i] = get(&format!("adam.v.{name}"))?.data().to_vec();
    }
    let step = meta
        .get("step")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::invalid("train state missing step"))? as usize;
    adam.step = meta
        .get("adam_step")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::invalid("train state missing adam_step"))? as usize;
    Ok((step, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ntc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");

        // Values chosen to stress exactness: subnormals, negatives, extremes.
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.30000000000000004]).unwrap();
        save_named_tensors(
            &path,
            &[("a".into(), &a), ("b".into(), &b)],
            serde_json::json!({"k": 1}),
        )
        .unwrap();
        let (tensors, meta) = load_named_tensors(&path).unwrap();
        assert_eq!(tensors["a"].data(), a.data());
        assert_eq!(tensors["a"].shape(), a.shape());
        assert_eq!(tensors["b"].data(), b.data());
        assert_eq!(meta["k"], 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn model_roundtrip_restores_every_parameter() {
        let dir = std::env::temp_dir().join(format!("ntc-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");

        let model = Model::new(ModelConfig::default(), 5).unwrap();
        save_model(&path, &model, serde_json::json!({})).unwrap();
        let mut other = Model::new(ModelConfig::default(), 99).unwrap();
        load_model(&path, &mut other).unwrap();
        for id in model.store.ids() {
            assert_eq!(model.store.tensor(id).data(), other.store.tensor(id).data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
