//! Checkpoint format: a JSON manifest naming every tensor with its shape and
//! byte offset, next to a payload of little-endian IEEE-754 `f32` values.
//!
//! `model.ckpt.json` holds the manifest, `model.ckpt.bin` the payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Parameterized, Real, Tensor};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Serializes named tensors into manifest + payload bytes.
pub fn encode(
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, Tensor<f32>)],
) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        tensors: entries,
        payload_sha256: sha256_hex(&payload),
    };
    (manifest, payload)
}

pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(Error::Format("checkpoint payload checksum mismatch".into()));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let end = e.offset + 4 * count;
        let bytes = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {} out of payload range", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save(
    manifest_path: &Path,
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, Tensor<f32>)],
) -> Result<Manifest> {
    let (manifest, payload) = encode(kind, config, tensors);
    let bin = payload_path(manifest_path);
    std::fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load(manifest_path: &Path) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let bin = payload_path(manifest_path);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let tensors = decode(&manifest, &payload)?;
    Ok((manifest, tensors))
}

/// Snapshot of a model's parameters in visiting order, as `f32`.
pub fn collect<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| out.push((name.to_string(), p.value.cast())));
    out
}

/// Copies named tensors into a model whose shapes already match.
pub fn restore<T: Real, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    tensors: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut idx = 0;
    let mut err = None;
    model.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(idx) {
            Some((n, t)) if n == name && t.shape() == p.value.shape() => {
                p.value = t.cast();
            }
            Some((n, t)) => {
                err = Some(Error::Format(format!(
                    "checkpoint tensor {n} {:?} does not match parameter {name} {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Format(format!("checkpoint lacks tensor {name}"))),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {idx}",
            tensors.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_bit_exact() {
        let a = Tensor::from_vec(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap();
        let b = Tensor::from_vec(&[3], vec![7.0f32, 8.0, 9.0]).unwrap();
        let tensors = vec![("a".to_string(), a), ("b".to_string(), b)];
        let (m, payload) = encode("test", serde_json::json!({"k": 1}), &tensors);
        assert_eq!(m.tensors[1].offset, 16);
        let back = decode(&m, &payload).unwrap();
        for ((_, x), (_, y)) in tensors.iter().zip(&back) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let t = vec![("a".to_string(), Tensor::from_vec(&[1], vec![1.0f32]).unwrap())];
        let (m, mut payload) = encode("test", serde_json::Value::Null, &t);
        payload[0] ^= 1;
        assert!(decode(&m, &payload).is_err());
    }
}
