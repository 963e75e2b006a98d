//! Binary checkpoints: model parameters plus optional optimizer state.
//!
//! ```text
//! b"SKDCKPT1"
//! 64 ASCII hex bytes       model config checksum
//! u64 step, u64 epoch
//! u32 count, then count x (u32 name length, name, tensor)   parameters
//! u32 count, then count x (u32 name length, name, tensor)   training state
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use skd_autodiff::Tensor;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{CoreError, Result};
use crate::tensor_io::{read_tensor, read_u32, read_u64, write_tensor};

const MAGIC: &[u8; 8] = b"SKDCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_checksum: String,
    pub step: u64,
    pub epoch: u64,
    pub params: ModelParams,
    /// Optimizer moments and other resumable state, by name.
    pub state: Vec<(String, Tensor)>,
}

fn write_named(buf: &mut Vec<u8>, named: &[(&str, &Tensor)]) {
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(buf, t).expect("writing to a Vec cannot fail");
    }
}

fn read_named(r: &mut &[u8]) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| CoreError::contract("truncated checkpoint name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| CoreError::contract("checkpoint name is not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(self.config_checksum.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        let params: Vec<(&str, &Tensor)> = self.params.named().collect();
        write_named(&mut buf, &params);
        let state: Vec<(&str, &Tensor)> = self.state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_named(&mut buf, &state);
        buf
    }

    /// Parse and check against `cfg`; a different config checksum is refused.
    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CoreError::contract("checkpoint too short"))?;
        if &magic != MAGIC {
            return Err(CoreError::contract("not a checkpoint file"));
        }
        let mut sum = [0u8; 64];
        r.read_exact(&mut sum)
            .map_err(|_| CoreError::contract("checkpoint too short"))?;
        let found = String::from_utf8_lossy(&sum).into_owned();
        let expected = cfg.checksum();
        if found != expected {
            return Err(CoreError::Checksum {
                what: "checkpoint model config".into(),
                expected,
                found,
            });
        }
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let params = ModelParams::from_named(cfg, read_named(&mut r)?)?;
        let state = read_named(&mut r)?;
        if !r.is_empty() {
            return Err(CoreError::contract("trailing bytes in checkpoint"));
        }
        Ok(Self {
            config_checksum: found,
            step,
            epoch,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CoreError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, cfg)
    }

    pub fn state_tensor(&self, name: &str) -> Option<&Tensor> {
        self.state.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// sha256 of a file's bytes, hex encoded.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
