//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, step, parameter table), then every parameter value as
//! little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::nn::{Param, ParamGroup, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GRNETCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters together with everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Optimiser steps taken when the checkpoint was written.
    pub step: usize,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    group: ParamGroup,
    kind: ParamKind,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(name, p)| Entry {
                    name: name.clone(),
                    shape: p.value.shape(),
                    group: p.group,
                    kind: p.kind,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.params.iter().map(|(_, p)| p.value.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::CheckpointFormat(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
        let raw = &body[hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(fmt("data section is not a whole number of f64 values"));
        }
        let mut data = raw.chunks_exact(8);
        let mut params = ParamStore::new();
        for e in header.params {
            let len: usize = e.shape.iter().product();
            let values: Vec<f64> = data
                .by_ref()
                .take(len)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.len() != len {
                return Err(Error::CheckpointFormat(format!("truncated data for {}", e.name)));
            }
            params.insert(
                e.name,
                Param {
                    value: Tensor::from_vec(e.shape, values),
                    group: e.group,
                    kind: e.kind,
                },
            );
        }
        if data.next().is_some() {
            return Err(fmt("more data than the header declares"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Grnet;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny();
        let net = Grnet::new(&model).unwrap();
        Checkpoint {
            params: net.init_params(3),
            model,
            train: TrainConfig::desk(),
            step: 12,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CheckpointFormat(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CheckpointFormat(_))));
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::CheckpointFormat(_))));
    }
}
