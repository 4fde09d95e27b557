//! Single-file checkpoint container.
//!
//! ```text
//! ICFSR-CKPT\n
//! <manifest: one line of UTF-8 JSON>\n
//! <blobs: little-endian floats, manifest order>
//! ```
//!
//! The manifest records the format version, element dtype, model and
//! training configuration, progress counters, generator state and, for every
//! tensor, its name, shape and byte range inside the blob section. Tensors
//! are the model parameters followed by the ADAM moments (`adam.m.*`,
//! `adam.v.*`). Every field is written in a fixed order, so saving a loaded
//! checkpoint reproduces the original bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelConfig, ModelParameters};
use crate::optim::OptimizerState;
use crate::rng::RngState;
use crate::tensor::Scalar;
use crate::train::TrainConfig;

pub const MAGIC: &[u8] = b"ICFSR-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model_config: ModelConfig,
    pub params: ModelParameters<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub train_config: TrainConfig,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub config_digest: String,
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

/// Element type recorded in a checkpoint file, without decoding it.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(parse_manifest(&bytes)?.0.dtype)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt("missing magic header"))?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("manifest is not terminated"))?;
    let text =
        std::str::from_utf8(&rest[..newline]).map_err(|_| corrupt("manifest is not UTF-8"))?;
    // Peek at the version before enforcing the full schema.
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("manifest has no format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::CheckpointVersion(version as u32));
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    Ok((manifest, &rest[newline + 1..]))
}

impl<T: Scalar> Checkpoint<T> {
    fn manifest(&self) -> Manifest {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let groups = [
            ("", &self.params),
            ("adam.m.", &self.optimizer.m),
            ("adam.v.", &self.optimizer.v),
        ];
        for (prefix, p) in groups {
            for (spec, data) in p.specs().into_iter().zip(p.tensors()) {
                let length = data.len() * T::BYTES;
                tensors.push(TensorEntry {
                    name: format!("{prefix}{}", spec.name),
                    shape: spec.shape,
                    dtype: T::DTYPE.to_string(),
                    offset,
                    length,
                });
                offset += length;
            }
        }
        Manifest {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            config_digest: self.config_digest.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.optimizer.step,
            rng: self.rng.clone(),
            tensors,
            blob_bytes: offset,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
        out.push(b'\n');
        out.reserve(manifest.blob_bytes);
        for p in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for t in p.tensors() {
                for &v in t {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, blobs) = parse_manifest(bytes)?;
        if m.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "dtype {} where {} was expected",
                m.dtype,
                T::DTYPE
            )));
        }
        if blobs.len() != m.blob_bytes {
            return Err(corrupt(format!(
                "blob section holds {} bytes, manifest declares {}",
                blobs.len(),
                m.blob_bytes
            )));
        }
        m.model_config
            .validate()
            .map_err(|e| corrupt(format!("model config: {e}")))?;
        let mut params = ModelParameters::<T>::zeros(&m.model_config)?;
        let mut adam_m = params.zeros_like();
        let mut adam_v = params.zeros_like();
        let specs = params.specs();
        if m.tensors.len() != 3 * specs.len() {
            return Err(corrupt(format!(
                "{} tensors listed, {} expected",
                m.tensors.len(),
                3 * specs.len()
            )));
        }
        let mut entries = m.tensors.iter();
        let mut expected_offset = 0;
        for (prefix, p) in [
            ("", &mut params),
            ("adam.m.", &mut adam_m),
            ("adam.v.", &mut adam_v),
        ] {
            for (spec, dst) in specs.iter().zip(p.tensors_mut()) {
                let e = entries.next().expect("count checked");
                let name = format!("{prefix}{}", spec.name);
                if e.name != name {
                    return Err(corrupt(format!(
                        "tensor {} where {name} was expected",
                        e.name
                    )));
                }
                if e.shape != spec.shape {
                    return Err(corrupt(format!(
                        "{name}: manifest shape {:?} does not match model shape {:?}",
                        e.shape, spec.shape
                    )));
                }
                if e.dtype != T::DTYPE {
                    return Err(corrupt(format!("{name}: dtype {}", e.dtype)));
                }
                let want = e.shape.iter().product::<usize>() * T::BYTES;
                if e.length != want {
                    return Err(corrupt(format!(
                        "{name}: blob length {} does not match shape {:?} ({want} bytes)",
                        e.length, e.shape
                    )));
                }
                if e.offset != expected_offset {
                    return Err(corrupt(format!("{name}: unexpected offset {}", e.offset)));
                }
                expected_offset += e.length;
                let blob = &blobs[e.offset..e.offset + e.length];
                for (v, chunk) in dst.iter_mut().zip(blob.chunks_exact(T::BYTES)) {
                    *v = T::read_le(chunk);
                }
            }
        }
        if expected_offset != m.blob_bytes {
            return Err(corrupt("tensor ranges do not cover the blob section"));
        }
        if m.train_config.model_config() != m.model_config {
            return Err(corrupt("model config disagrees with training config"));
        }
        if m.train_config.digest() != m.config_digest {
            return Err(corrupt("training config digest mismatch"));
        }
        Ok(Checkpoint {
            model_config: m.model_config,
            params,
            optimizer: OptimizerState {
                step: m.adam_step,
                m: adam_m,
                v: adam_v,
            },
            epoch: m.epoch,
            step: m.step,
            rng: m.rng,
            train_config: m.train_config,
            config_digest: m.config_digest,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}
