//! Checkpoint container:
//!
//! ```text
//! magic     8 bytes   "SPLTLRM\0"
//! version   u32 LE
//! header    u32 LE length + JSON {"config": LrmConfig, "params": count, "step": n}
//! blob      params × f32 LE
//! checksum  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LrmConfig, LrmModel};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPLTLRM\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: LrmConfig,
    params: usize,
    step: u64,
}

/// Serializes the model together with the number of training steps it has seen.
pub fn write_checkpoint(model: &LrmModel<f32>, step: u64) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        params: model.params.len(),
        step,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * model.params.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &model.params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses a checkpoint, returning the model and its step count.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(LrmModel<f32>, u64)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 + 32 {
        return Err(bad(format!("{} bytes is too short", bytes.len())));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(bad("checksum mismatch".into()));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    let blob = &body[header_end..];
    if blob.len() != 4 * header.params {
        return Err(bad(format!(
            "{} blob bytes for {} parameters",
            blob.len(),
            header.params
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((LrmModel::from_params(header.config, params)?, header.step))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(model: &LrmModel<f32>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(model, step)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(LrmModel<f32>, u64)> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LrmModel<f32> {
        LrmModel::new(LrmConfig {
            image_size: 16,
            patch: 8,
            dim: 16,
            layers: 1,
            heads: 2,
            views: 2,
            ..LrmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, 42, &path).unwrap();
        let (back, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.config, m.config);
        assert!(back
            .params
            .iter()
            .zip(&m.params)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_checkpoint(&small(), 0).unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            read_checkpoint(&flipped),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong = bytes[..bytes.len() - 32].to_vec();
        wrong[0] = b'X';
        let d = Sha256::digest(&wrong);
        wrong.extend_from_slice(&d);
        assert!(
            matches!(read_checkpoint(&wrong), Err(Error::Checkpoint(m)) if m.contains("magic"))
        );
    }
}
