//! Self-describing JSON checkpoints. Parameter data is stored as base64 of
//! little-endian `f64`, so a save/load cycle is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::dsp::{CompressionExponent, StftConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "mixse-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    version: u32,
    model: ModelConfig,
    stft: StftConfig,
    compression: CompressionExponent,
    sample_rate: u32,
    step: u64,
    params: Vec<StoredTensor>,
}

/// Everything needed to run inference with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub stft: StftConfig,
    pub compression: CompressionExponent,
    pub sample_rate: u32,
    pub step: u64,
}

fn encode(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, shape: &[usize], data: &str) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{name}: truncated data")));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(shape.to_vec(), values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            format: FORMAT.into(),
            version: VERSION,
            model: self.params.config().clone(),
            stft: self.stft,
            compression: self.compression,
            sample_rate: self.sample_rate,
            step: self.step,
            params: self
                .params
                .weights
                .named()
                .into_iter()
                .map(|(name, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: encode(t),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if stored.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", stored.format)));
        }
        if stored.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                stored.version
            )));
        }
        stored.model.validate()?;
        stored.stft.validate()?;
        if stored.stft.freq_bins() > stored.model.freq_bins {
            return Err(Error::Checkpoint(format!(
                "STFT has {} bins but the model accepts {}",
                stored.stft.freq_bins(),
                stored.model.freq_bins
            )));
        }
        let template = ModelParams::init(&stored.model, 0)?;
        let names: Vec<String> = template.weights.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != stored.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                stored.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (want, got) in names.iter().zip(&stored.params) {
            if *want != got.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {want}, found {}",
                    got.name
                )));
            }
            tensors.push(decode(&got.name, &got.shape, &got.data)?);
        }
        let weights = template
            .weights
            .zip_from(tensors)
            .expect("count checked above");
        let params = ModelParams::from_weights(stored.model, weights)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            params,
            stft: stored.stft,
            compression: stored.compression,
            sample_rate: stored.sample_rate,
            step: stored.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
