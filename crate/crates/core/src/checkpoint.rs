//! Versioned JSON checkpoints with base64 little-endian `f64` blobs.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, ParamBlob>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("blob of {} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, meta: serde_json::Value, params: &ParamStore) -> Result<Self> {
        let params =
            params.iter().map(|(name, t)| (name.clone(), ParamBlob { shape: t.shape().to_vec(), data: encode_f64s(t.data()) })).collect();
        Ok(Checkpoint { format_version: FORMAT_VERSION, kind: kind.to_string(), config: serde_json::to_value(config)?, meta, params })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format_version {v}, expected {FORMAT_VERSION}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    pub fn meta<M: DeserializeOwned>(&self, field: &str) -> Result<M> {
        let v = self.meta.get(field).ok_or_else(|| Error::Checkpoint(format!("missing meta field `{field}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta `{field}`: {e}")))
    }

    /// Decode every blob, checking each against the parameter layout the
    /// config implies. Nothing is returned unless all parameters match.
    pub fn params_like(&self, expected: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, template) in expected.iter() {
            let blob = self.params.get(name).ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")))?;
            if blob.shape != template.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    blob.shape,
                    template.shape()
                )));
            }
            let data = decode_f64s(&blob.data)?;
            let t = Tensor::new(&blob.shape, data).map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            out.insert(name.clone(), t);
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains(k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}` in checkpoint")));
        }
        Ok(out)
    }
}
