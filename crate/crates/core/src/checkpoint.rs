//! Self-describing checkpoint container.
//!
//! ```text
//! bytes 0..8    magic "CLPRCKPT"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  header length L, u64 little-endian
//! bytes 20..20+L  UTF-8 JSON header (plane, backbone, training config, history, tensor table)
//! then          every tensor as f32 little-endian, in tensor-table order
//! ```
//!
//! Tensor offsets and counts are in elements relative to the start of the blob section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CaliperError, Result};
use crate::geometry::PlaneConfig;
use crate::model::{BackboneConfig, UNet};
use crate::training::{EpochMetrics, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CLPRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub plane: PlaneConfig,
    pub backbone: BackboneConfig,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    /// Filled in on serialization.
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn new(
        plane: PlaneConfig,
        backbone: BackboneConfig,
        config: TrainConfig,
        history: Vec<EpochMetrics>,
        best_epoch: Option<usize>,
    ) -> Self {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            plane,
            backbone,
            seed: Some(config.seed),
            train_config: Some(config),
            history,
            best_epoch,
            tensors: Vec::new(),
        }
    }

    /// Header for an untrained model.
    pub fn untrained(plane: PlaneConfig, backbone: BackboneConfig) -> Self {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            plane,
            backbone,
            train_config: None,
            seed: None,
            history: Vec::new(),
            best_epoch: None,
            tensors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: UNet<f32>,
}

fn bad(msg: impl Into<String>) -> CaliperError {
    CaliperError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, model: UNet<f32>) -> Result<Self> {
        if &header.backbone != model.config() {
            return Err(bad("header backbone does not match the model"));
        }
        header.backbone.check_plane(&header.plane)?;
        Ok(Checkpoint { header, model })
    }

    pub fn plane(&self) -> &PlaneConfig {
        &self.header.plane
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.named_parameters();
        let mut header = self.header.clone();
        let mut offset = 0;
        header.tensors = params
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    count: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in params {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let blob = &bytes[20 + len..];
        let mut model = UNet::<f32>::new(header.backbone.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>, usize)> = model
            .named_parameters()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.len()))
            .collect();
        if header.tensors.len() != expected.len() {
            return Err(bad(format!(
                "tensor table has {} entries, backbone needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let total: usize = expected.iter().map(|e| e.2).sum();
        if blob.len() != 4 * total {
            return Err(bad(format!("blob is {} bytes, expected {}", blob.len(), 4 * total)));
        }
        let mut values = Vec::with_capacity(expected.len());
        for (t, (name, shape, count)) in header.tensors.iter().zip(&expected) {
            if &t.name != name || &t.shape != shape || t.count != *count || t.offset + t.count > total {
                return Err(bad(format!("tensor {} does not match the backbone", t.name)));
            }
            let raw = &blob[4 * t.offset..4 * (t.offset + t.count)];
            values.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect::<Vec<f32>>(),
            );
        }
        model.load_parameters(&values)?;
        let mut header = header;
        header.tensors.clear();
        Checkpoint::new(header, model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CaliperError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CaliperError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let plane = PlaneConfig::tv();
        let cfg = BackboneConfig {
            depth: 2,
            base_channels: 2,
            ..BackboneConfig::for_plane(&plane, 16, 24)
        };
        let model = UNet::new(cfg.clone(), 4).unwrap();
        Checkpoint::new(CheckpointHeader::untrained(plane, cfg), model).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = small().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }

    #[test]
    fn plane_mismatch_rejected() {
        let c = small();
        let mut h = c.header.clone();
        h.plane = PlaneConfig::tc();
        assert!(Checkpoint::new(h, c.model.clone()).is_err());
    }
}
