//! Binary tensor container.
//!
//! Layout: one UTF-8 JSON manifest line terminated by `\n`, followed by the
//! little-endian `f32` payload of every tensor, concatenated in manifest
//! order. The manifest is
//!
//! ```text
//! {"format":"sgclip-tensors-v1","tensors":[{"name":..,"shape":[..]},..], ..extra}
//! ```
//!
//! where extra top-level fields carry caller metadata (model config,
//! vocabulary, optimizer step). Reading then writing a file reproduces it
//! byte for byte.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "sgclip-tensors-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<TensorEntry>,
    #[serde(flatten)]
    meta: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: Map<String, Value>) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            tensors: self.manifest(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(CheckpointError::Format("missing manifest line".into()));
        }
        let manifest: Manifest = serde_json::from_str(line.trim_end_matches('\n'))?;
        if manifest.format != FORMAT_TAG {
            return Err(CheckpointError::Format(format!(
                "unknown format tag {:?}",
                manifest.format
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|e| {
                CheckpointError::Format(format!("payload for {} truncated: {e}", entry.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Format(
                "trailing bytes after payload".into(),
            ));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
