//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` plus one raw file per
//! tensor: little-endian `f32`, row-major, shape given in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::{Architecture, ModelConfig, ModelParams};
use crate::clipping::ClipSpec;
use crate::error::{Error, Result};
use crate::mechanisms::PrivacyParams;
use crate::pruning::PruneMask;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub frozen: bool,
    pub prune_mask: Option<PruneMask>,
    pub clip: Option<ClipSpec>,
    /// Privacy parameters the weights were specialised to (noisy training).
    pub privacy: Option<PrivacyParams>,
    pub tensors: Vec<TensorEntry>,
}

/// Model weights plus the latent settings that travel with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub prune_mask: Option<PruneMask>,
    pub clip: Option<ClipSpec>,
    pub privacy: Option<PrivacyParams>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            prune_mask: None,
            clip: None,
            privacy: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.params;
        let mut tensors = Vec::with_capacity(p.tensors.len());
        for (name, t) in p.names.iter().zip(&p.tensors) {
            let file = format!("{name}.f32");
            let bytes: Vec<u8> = t.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: name.clone(),
                file,
                rows: t.rows,
                cols: t.cols,
            });
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            architecture: p.config.architecture,
            config: p.config.clone(),
            frozen: p.frozen,
            prune_mask: self.prune_mask.clone(),
            clip: self.clip,
            privacy: self.privacy,
            tensors,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::InvalidState(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                m.version
            )));
        }
        if m.architecture != m.config.architecture {
            return Err(Error::InvalidState("manifest architecture disagrees with its config".into()));
        }
        let expected = ModelParams::init(&m.config, 0)?;
        if expected.names.len() != m.tensors.len() {
            return Err(Error::InvalidState(format!(
                "checkpoint has {} tensors, the architecture needs {}",
                m.tensors.len(),
                expected.names.len()
            )));
        }
        let mut names = Vec::with_capacity(m.tensors.len());
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for (entry, (want_name, want)) in m.tensors.iter().zip(expected.names.iter().zip(&expected.tensors)) {
            if &entry.name != want_name || (entry.rows, entry.cols) != (want.rows, want.cols) {
                return Err(Error::InvalidState(format!(
                    "tensor `{}` ({}x{}) does not match expected `{want_name}` ({}x{})",
                    entry.name, entry.rows, entry.cols, want.rows, want.cols
                )));
            }
            let tp = dir.join(&entry.file);
            let bytes = fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
            if bytes.len() != 4 * entry.rows * entry.cols {
                return Err(Error::InvalidState(format!(
                    "{} holds {} bytes, expected {}",
                    tp.display(),
                    bytes.len(),
                    4 * entry.rows * entry.cols
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            names.push(entry.name.clone());
            tensors.push(Matrix::from_vec(entry.rows, entry.cols, data));
        }
        let params = ModelParams::from_parts(m.config, names, tensors, m.frozen);
        if !params.is_finite() {
            return Err(Error::Diagnostic("checkpoint contains non-finite weights".into()));
        }
        Ok(Checkpoint {
            params,
            prune_mask: m.prune_mask,
            clip: m.clip,
            privacy: m.privacy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::Epsilon;

    #[test]
    fn round_trip_is_exact_after_f32_rounding() {
        let cfg = ModelConfig {
            vocab_size: 11,
            max_len: 5,
            d_tok: 4,
            ..ModelConfig::transformer(11)
        };
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        params.round_to_f32();
        params.frozen = true;
        let ck = Checkpoint {
            params,
            prune_mask: Some(PruneMask::new(vec![0, 2], 4).unwrap()),
            clip: Some(ClipSpec::by_value(0.1).unwrap()),
            privacy: Some(PrivacyParams::gaussian(Epsilon::Finite(50.0), 1e-5).unwrap()),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);

        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("\"pruned_indices\""));
        assert!(text.contains("\"epsilon\": 50.0"));
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let params = ModelParams::init(&ModelConfig::recurrent(9), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(params).save(dir.path()).unwrap();
        fs::write(dir.path().join("out.b.f32"), [0u8; 3]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
