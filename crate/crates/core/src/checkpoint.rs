//! Checkpoint files.
//!
//! Layout: the magic `LNCK`, a little-endian `u16` version, a little-endian
//! `u32` header length, the UTF-8 JSON header, then every tensor as raw
//! little-endian `f32` in header order. Parameters are stored at 32-bit
//! precision, so a reloaded model reproduces the saved one's outputs up to
//! that quantization.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Architecture, Graph, RngState};
use crate::models::{Manifest, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"LNCK";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub steps: u64,
    /// Slot tensors named `opt.m.*` / `opt.v.*`.
    pub slots: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub architecture: Architecture,
    pub class_names: Vec<String>,
    /// Parameters followed by batch-norm running statistics, as
    /// [`Graph::state`] returns them.
    pub state: Vec<Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub rng: RngState,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: Manifest,
    architecture: Architecture,
    class_names: Vec<String>,
    epoch: usize,
    rng: RngState,
    config: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn capture(
        graph: &Graph,
        spec: &ModelSpec,
        class_names: &[String],
        optimizer: Option<&Optimizer>,
        epoch: usize,
        config: serde_json::Value,
    ) -> Self {
        let names = graph.param_names();
        Checkpoint {
            manifest: Manifest::from_architecture(spec, graph.arch()),
            architecture: graph.arch().clone(),
            class_names: class_names.to_vec(),
            state: graph.state(),
            optimizer: optimizer.map(|o| OptimizerState {
                config: o.config().clone(),
                steps: o.steps(),
                slots: o.state_tensors(&names),
            }),
            epoch,
            rng: graph.rng_state(),
            config,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.manifest.spec
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    /// Rebuilds the graph with the stored weights and dropout stream.
    pub fn graph(&self) -> Result<Graph> {
        let mut g = Graph::new(self.architecture.clone(), self.manifest.spec.seed)?;
        g.load_state(self.state.clone())?;
        g.set_rng_state(self.rng);
        Ok(g)
    }

    pub fn restore_optimizer(&self) -> Result<Option<Optimizer>> {
        self.optimizer
            .as_ref()
            .map(|st| {
                let mut opt = Optimizer::new(st.config.clone())?;
                opt.load_state(st.steps, &st.slots)?;
                Ok(opt)
            })
            .transpose()
    }

    fn all_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.state
            .iter()
            .chain(self.optimizer.iter().flat_map(|o| o.slots.iter()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for t in self.all_tensors() {
            entries.push(TensorEntry {
                name: t.name().unwrap_or_default().to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            manifest: self.manifest.clone(),
            architecture: self.architecture.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            rng: self.rng,
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                steps: o.steps,
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::invalid("checkpoint header exceeds 4 GiB"))?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.all_tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::CorruptHeader(format!(
                "file is {} bytes, shorter than the preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CorruptHeader("missing LNCK magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(PREAMBLE..PREAMBLE + len)
            .ok_or_else(|| Error::CorruptHeader(format!("header of {len} bytes is truncated")))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::CorruptHeader(format!("header JSON: {e}")))?;

        // Shapes are checked against the architecture before any data is read.
        let mut expected = header.architecture.param_shapes();
        expected.extend(header.architecture.buffer_shapes());
        let n_state = expected.len();
        if header.tensors.len() < n_state {
            return Err(Error::CorruptHeader(format!(
                "header lists {} tensors, the architecture needs {n_state}",
                header.tensors.len()
            )));
        }
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name {
                return Err(Error::CorruptHeader(format!(
                    "expected tensor `{name}`, found `{}`",
                    entry.name
                )));
            }
            if &entry.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
        }

        let data = &bytes[PREAMBLE + len..];
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::CorruptHeader(format!(
                    "tensor `{}` has dtype {}",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != offset {
                return Err(Error::CorruptHeader(format!(
                    "tensor `{}` offset {} should be {offset}",
                    entry.name, entry.offset
                )));
            }
            let n = numel(&entry.shape);
            let start = offset as usize;
            let raw = data.get(start..start + 4 * n).ok_or_else(|| {
                Error::CorruptHeader(format!("data for tensor `{}` is truncated", entry.name))
            })?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), values)?.with_name(entry.name.clone()));
            offset += 4 * n as u64;
        }
        if data.len() as u64 != offset {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after tensor data",
                data.len() as u64 - offset
            )));
        }
        let slots = tensors.split_off(n_state);
        let optimizer = match header.optimizer {
            Some(o) => Some(OptimizerState {
                config: o.config,
                steps: o.steps,
                slots,
            }),
            None if slots.is_empty() => None,
            None => {
                return Err(Error::CorruptHeader(
                    "optimizer slots present without optimizer settings".into(),
                ))
            }
        };
        Ok(Checkpoint {
            manifest: header.manifest,
            architecture: header.architecture,
            class_names: header.class_names,
            state: tensors,
            optimizer,
            epoch: header.epoch,
            rng: header.rng,
            config: header.config,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
