//! Named-tensor bundles (binary and JSON) and sample-set files.
//!
//! Binary layout: the 8-byte magic `LSTCBND1`, a little-endian `u64` header
//! length, a UTF-8 JSON header `{"meta": .., "tensors": [{"name", "shape",
//! "offset"}]}`, then every tensor's values as little-endian `f64`, with
//! `offset` counted in values from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::Sample;
use crate::tensor::{Tensor, TensorError};

const MAGIC: &[u8; 8] = b"LSTCBND1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn format_err(e: impl std::fmt::Display) -> IoError {
    IoError::Format(e.to_string())
}

/// Free-form metadata plus an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonBundle {
    meta: Value,
    tensors: Vec<JsonTensor>,
}

impl Bundle {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(IoError::Format("missing LSTCBND1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(16)).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(IoError::Format(format!("header length {len} exceeds file size")));
        };
        let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(format_err)?;
        let payload = &bytes[end..];
        if payload.len() % 8 != 0 {
            return Err(IoError::Format("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = e
                .offset
                .checked_add(n)
                .and_then(|hi| values.get(e.offset..hi))
                .ok_or_else(|| IoError::Format(format!("tensor `{}` runs past the payload", e.name)))?;
            tensors.push((e.name, Tensor::new(e.shape, data.to_vec())?));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn to_json(&self) -> String {
        let b = JsonBundle {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| JsonTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
        };
        serde_json::to_string_pretty(&b).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let b: JsonBundle = serde_json::from_str(text).map_err(format_err)?;
        let tensors = b
            .tensors
            .into_iter()
            .map(|t| Ok((t.name, Tensor::new(t.shape, t.data)?)))
            .collect::<Result<_, IoError>>()?;
        Ok(Self { meta: b.meta, tensors })
    }

    /// Writes JSON when the path ends in `.json`, the binary form otherwise.
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let bytes = if is_json(path) { self.to_json().into_bytes() } else { self.to_bytes() };
        write_file(path, &bytes)
    }

    /// Reads either form, detected by the magic bytes.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = read_file(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            Self::from_json(std::str::from_utf8(&bytes).map_err(format_err)?)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    y: Vec<f64>,
    view_group: u32,
}

/// Packs samples into a bundle: one tensor per sample, labels in the metadata.
pub fn samples_to_bundle(samples: &[Sample], extra: Value) -> Bundle {
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta { id: s.id.clone(), y: s.y.clone(), view_group: s.view_group })
        .collect();
    let mut b = Bundle::new(serde_json::json!({ "kind": "samples", "samples": meta, "extra": extra }));
    for (i, s) in samples.iter().enumerate() {
        b.push(format!("x/{i}"), s.x.clone());
    }
    b
}

pub fn samples_from_bundle(b: &Bundle) -> Result<Vec<Sample>, IoError> {
    if b.meta.get("kind").and_then(Value::as_str) != Some("samples") {
        return Err(IoError::Format("bundle does not hold samples".into()));
    }
    let meta: Vec<SampleMeta> = serde_json::from_value(b.meta["samples"].clone()).map_err(format_err)?;
    if meta.len() != b.tensors.len() {
        return Err(IoError::Format(format!("{} labels for {} tensors", meta.len(), b.tensors.len())));
    }
    meta.into_iter()
        .zip(&b.tensors)
        .map(|(m, (_, x))| Sample::new(m.id, x.clone(), m.y, m.view_group).map_err(format_err))
        .collect()
}

pub fn save_samples(path: &Path, samples: &[Sample], extra: Value) -> Result<(), IoError> {
    samples_to_bundle(samples, extra).save(path)
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>, IoError> {
    samples_from_bundle(&Bundle::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> Bundle {
        let mut b = Bundle::new(serde_json::json!({"layer": 1}));
        b.push("a", Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.1 - 0.25));
        b.push("b", Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap());
        b
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let b = bundle();
        let back = Bundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let b = bundle();
        assert_eq!(Bundle::from_json(&b.to_json()).unwrap(), b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = bundle().to_bytes();
        assert!(Bundle::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Bundle::from_bytes(&bytes[..10]).is_err());
        assert!(Bundle::from_bytes(b"not a bundle at all").is_err());
    }

    #[test]
    fn samples_round_trip() {
        let s = vec![
            Sample::one_hot("a", Tensor::from_fn(vec![3, 2, 2], |i| i as f64), 1, 3, 4).unwrap(),
            Sample::new("b", Tensor::zeros(vec![3, 2, 2]), vec![0.25, 0.75, 0.0], 1).unwrap(),
        ];
        let b = samples_to_bundle(&s, Value::Null);
        assert_eq!(samples_from_bundle(&Bundle::from_bytes(&b.to_bytes()).unwrap()).unwrap(), s);
    }
}
