//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDEM"
//! 4       4     format version, u32 LE
//! 8       4     header length H in bytes, u32 LE
//! 12      H     UTF-8 JSON header {config, metadata, tensors}
//! 12+H    8     value count V, u64 LE
//! 20+H    4V    f32 LE values: trainable tensors in declaration order,
//!               then batch-norm running mean/var per unit
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PDEM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A network snapshot plus free-form training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub metadata: serde_json::Value,
    /// Flat values in blob order.
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: serde_json::Value) -> Self {
        let mut values = Vec::new();
        for p in model.params() {
            values.extend(p.data().iter().map(|&v| v as f32));
        }
        for s in model.running_stats() {
            values.extend(s.mean.iter().map(|&v| v as f32));
            values.extend(s.var.iter().map(|&v| v as f32));
        }
        Self {
            config: *model.config(),
            metadata,
            values,
        }
    }

    /// Rebuilds the model. Values are widened back from f32.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.config, 0)?;
        let expected = expected_len(&model);
        if self.values.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} values, architecture needs {expected}",
                self.values.len()
            )));
        }
        let mut it = self.values.iter().map(|&v| v as f64);
        for p in model.params_mut() {
            for slot in p.data_mut() {
                *slot = it.next().expect("length checked");
            }
        }
        for s in model.running_stats_mut() {
            for slot in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *slot = it.next().expect("length checked");
            }
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let model = Model::build(self.config, 0)?;
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config,
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("checkpoint header too large".into()))?;
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        let mut blob = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = usize::try_from(u64::from_le_bytes(count))
            .map_err(|_| Error::Format("value count overflows".into()))?;
        let mut blob = vec![0u8; count * 4];
        r.read_exact(&mut blob)?;
        let values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn expected_len(model: &Model) -> usize {
    let params: usize = model.params().iter().map(|t| t.numel()).sum();
    let stats: usize = model.running_stats().iter().map(|s| 2 * s.mean.len()).sum();
    params + stats
}
