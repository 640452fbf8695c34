//! Single-file checkpoints.
//!
//! ```text
//! "TNAFCKPT" | u32 LE header length | JSON header | f32 LE parameter blobs
//! ```
//!
//! The header carries the format version, the run configuration, the
//! standardization statistics, an ordered parameter manifest (name, shape,
//! byte offset into the blob section) and a SHA-256 digest of the blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tnaf_core::data::StandardizationStats;
use tnaf_core::diffcore::{ParamSet, Tensor};
use tnaf_core::flow::FlowModel;

use crate::config::RunConfig;
use crate::CliError;

pub const MAGIC: &[u8; 8] = b"TNAFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub config: RunConfig,
    pub stats: StandardizationStats,
    pub params: Vec<ManifestEntry>,
    pub blob_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stats: StandardizationStats,
    pub model: FlowModel,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Corrupt(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut manifest = Vec::new();
        for (name, p) in self.model.params.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in p.value.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            stats: self.stats.clone(),
            params: manifest,
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(json.len()).expect("header fits in u32").to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    /// Split a file into its parsed header and the raw blob section.
    pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), CliError> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(corrupt("file is shorter than the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[12..];
        if rest.len() < len {
            return Err(corrupt(format!("header needs {len} bytes, {} present", rest.len())));
        }
        let header: Header =
            serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("header is not valid: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", header.version)));
        }
        Ok((header, &rest[len..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let (header, blob) = Self::read_header(bytes)?;
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(corrupt("parameter blob checksum mismatch"));
        }
        let mut expected_offset = 0;
        let mut params = ParamSet::new();
        for entry in &header.params {
            if entry.offset != expected_offset {
                return Err(corrupt(format!("parameter `{}` is not contiguous", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > blob.len() {
                return Err(corrupt(format!("parameter `{}` runs past the end of the file", entry.name)));
            }
            let values: Vec<f64> = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("parameter `{}` holds a non-finite value", entry.name)));
            }
            let t = Tensor::new(&entry.shape, values).map_err(|e| corrupt(e.to_string()))?;
            params.insert(entry.name.clone(), t).map_err(|e| corrupt(e.to_string()))?;
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(corrupt(format!("{} trailing bytes after the last parameter", blob.len() - expected_offset)));
        }
        if header.stats.dim() != header.config.model.dim {
            return Err(corrupt("standardization statistics do not match the model dimension"));
        }
        // The stored parameters must be exactly the set the architecture defines.
        let reference = FlowModel::init(header.config.model.clone(), 0).map_err(|e| corrupt(e.to_string()))?;
        let layout = |p: &ParamSet| -> Vec<(String, Vec<usize>)> {
            p.iter().map(|(n, v)| (n.to_string(), v.value.shape().to_vec())).collect()
        };
        if layout(&reference.params) != layout(&params) {
            return Err(corrupt("parameter manifest does not match the model architecture"));
        }
        Ok(Self {
            model: FlowModel {
                config: header.config.model.clone(),
                params,
            },
            config: header.config,
            stats: header.stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use tnaf_core::flow::HeadType;

    use super::*;

    fn checkpoint(head: HeadType) -> Checkpoint {
        let mut config = RunConfig::from_json(r#"{"data": {"toy": "ring", "n": 100}}"#).unwrap();
        config.model = tnaf_core::flow::FlowConfig {
            embed: 8,
            heads: 2,
            layers: 1,
            mlp_hidden: 8,
            cdf_hidden: 4,
            ..tnaf_core::flow::FlowConfig::new(3, head)
        };
        Checkpoint {
            model: FlowModel::init(config.model.clone(), 9).unwrap(),
            stats: StandardizationStats {
                mean: vec![0.1, -2.0, 1.0 / 3.0],
                std: vec![1.5, 0.25, 7.0],
            },
            config,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for head in HeadType::ALL {
            let ck = checkpoint(head);
            let bytes = ck.to_bytes();
            let loaded = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(loaded.to_bytes(), bytes);
            assert_eq!(loaded.config, ck.config);
            assert_eq!(loaded.stats, ck.stats);
            for ((_, a), (_, b)) in loaded.model.params.iter().zip(ck.model.params.iter()) {
                for (x, y) in a.value.data().iter().zip(b.value.data()) {
                    assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
                }
            }
        }
    }

    #[test]
    fn header_round_trips_and_offsets_are_contiguous() {
        let bytes = checkpoint(HeadType::Cdf).to_bytes();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let (header, blob) = Checkpoint::read_header(&bytes).unwrap();
        assert_eq!(serde_json::to_vec(&header).unwrap(), &bytes[12..12 + len]);
        let mut offset = 0;
        for e in &header.params {
            assert_eq!(e.offset, offset);
            offset += 4 * e.shape.iter().product::<usize>();
        }
        assert_eq!(offset, blob.len());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint(HeadType::Spline).to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(CliError::Corrupt(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 10;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CliError::Corrupt(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CliError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(CliError::Corrupt(_))));
        assert!(matches!(Checkpoint::from_bytes(b""), Err(CliError::Corrupt(_))));
    }
}
