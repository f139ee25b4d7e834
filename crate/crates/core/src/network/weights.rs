use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 5] = b"CDKW1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Named parameter tensors in spec order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    params: IndexMap<String, Tensor>,
}

impl WeightStore {
    /// Zero-valued parameters with the shapes the spec dictates.
    pub fn zeros(model: &ModelSpec) -> Self {
        let params = model
            .param_shapes()
            .into_iter()
            .map(|p| {
                let t = Tensor::zeros(&p.shape);
                (p.name, t)
            })
            .collect();
        Self { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect()
    }

    /// Errors unless names and shapes match the spec, in order.
    pub fn check_against(&self, model: &ModelSpec) -> Result<()> {
        let expected = model.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Weights(format!(
                "spec expects {} tensors, store has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in expected.iter().zip(&self.params) {
            if &p.name != name || p.shape != t.shape() {
                return Err(Error::Weights(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let payload_len: usize = self.params.values().map(|t| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(WEIGHTS_MAGIC.len() + 4 + manifest.len() + payload_len);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.params.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(model: &ModelSpec, bytes: &[u8]) -> Result<Self> {
        let header = WEIGHTS_MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
            return Err(Error::Weights("missing CDKW1 header".into()));
        }
        let mlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let payload_start = header
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Weights("truncated manifest".into()))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[header..payload_start])
            .map_err(|e| Error::Weights(format!("bad manifest: {e}")))?;
        let payload = &bytes[payload_start..];

        let expected = model.param_shapes();
        if manifest.len() != expected.len() {
            return Err(Error::Weights(format!(
                "manifest lists {} tensors, spec expects {}",
                manifest.len(),
                expected.len()
            )));
        }
        let mut params = IndexMap::with_capacity(manifest.len());
        let mut offset = 0;
        for (entry, want) in manifest.into_iter().zip(expected) {
            if entry.name != want.name || entry.shape != want.shape {
                return Err(Error::Weights(format!(
                    "manifest entry {} {:?} does not match spec {} {:?}",
                    entry.name, entry.shape, want.name, want.shape
                )));
            }
            if entry.offset != offset {
                return Err(Error::Weights(format!("{}: offset {} ≠ {offset}", entry.name, entry.offset)));
            }
            let n: usize = entry.shape.iter().product();
            let end = offset + 4 * n;
            let chunk = payload
                .get(offset..end)
                .ok_or_else(|| Error::Weights(format!("truncated payload in {}", entry.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
            offset = end;
        }
        if offset != payload.len() {
            return Err(Error::Weights(format!(
                "{} trailing payload bytes",
                payload.len() - offset
            )));
        }
        Ok(Self { params })
    }
}

/// Parameters drawn from N(0, 1/fan_in) (std `1/sqrt(fan_in)`), biases zero.
pub fn init_weights(model: &ModelSpec, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model
        .param_shapes()
        .into_iter()
        .map(|p| {
            let mut t = Tensor::zeros(&p.shape);
            if p.fan_in > 0 {
                let normal = Normal::new(0.0, 1.0 / (p.fan_in as f64).sqrt()).expect("positive std");
                for v in t.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            (p.name, t)
        })
        .collect();
    WeightStore { params }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(model: &ModelSpec, path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(model, &bytes)
}
