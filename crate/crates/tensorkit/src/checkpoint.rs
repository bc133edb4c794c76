//! Self-describing checkpoint files.
//!
//! Layout: one UTF-8 JSON manifest line terminated by `\n` (architecture,
//! layer list, parameter names/shapes, optimizer step count), followed by
//! every parameter's values as little-endian `f32`, concatenated in
//! manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{LayerSpec, Module, Result, TensorError};

pub const FORMAT: &str = "tensorkit-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub arch: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
    pub step_count: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub payload: Vec<f32>,
}

impl Checkpoint {
    /// Snapshots `module`.
    pub fn capture(arch: serde_json::Value, module: &mut dyn Module) -> Self {
        let mut layers = Vec::new();
        module.layer_specs(&mut layers);
        let mut params = Vec::new();
        let mut payload = Vec::new();
        let mut step_count = 0;
        module.visit_params(&mut |p| {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
                trainable: p.is_trainable(),
            });
            payload.extend_from_slice(&p.value);
            step_count = step_count.max(p.step_count());
        });
        Checkpoint {
            manifest: CheckpointManifest {
                format: FORMAT.to_string(),
                arch,
                layers,
                params,
                step_count,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        out.push(b'\n');
        out.reserve(self.payload.len() * 4);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(TensorError::Checkpoint("missing manifest terminator".into()));
        }
        line.pop();
        let manifest: CheckpointManifest =
            serde_json::from_slice(&line).map_err(|e| TensorError::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(TensorError::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != expected * 4 {
            return Err(TensorError::Checkpoint(format!(
                "payload has {} bytes, manifest needs {}",
                bytes.len(),
                expected * 4
            )));
        }
        let payload = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { manifest, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Copies the stored values into `module`, whose parameter list must
    /// match the manifest name-for-name and shape-for-shape. The optimizer
    /// step count is restored so the module reports itself as trained.
    pub fn restore_into(&self, module: &mut dyn Module) -> Result<()> {
        let mut idx = 0;
        let mut offset = 0;
        let mut error = None;
        module.visit_params(&mut |p| {
            if error.is_some() {
                return;
            }
            match self.manifest.params.get(idx) {
                Some(entry) if entry.name == p.name && entry.shape == p.shape() => {
                    let n = p.len();
                    p.value.copy_from_slice(&self.payload[offset..offset + n]);
                    p.zero_grad();
                    if p.is_trainable() {
                        p.step_count = self.manifest.step_count;
                    }
                    offset += n;
                }
                Some(entry) => {
                    error = Some(format!(
                        "parameter {idx}: checkpoint has {} {:?}, model has {} {:?}",
                        entry.name,
                        entry.shape,
                        p.name,
                        p.shape()
                    ))
                }
                None => error = Some(format!("checkpoint ends before parameter {}", p.name)),
            }
            idx += 1;
        });
        if let Some(e) = error {
            return Err(TensorError::Checkpoint(e));
        }
        if idx != self.manifest.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {idx}",
                self.manifest.params.len()
            )));
        }
        Ok(())
    }
}
