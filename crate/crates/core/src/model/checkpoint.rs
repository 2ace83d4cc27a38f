//! Binary checkpoint for one network.
//!
//! Layout (all integers little-endian):
//!
//! | field | bytes |
//! |---|---|
//! | magic `NCLCKPT\0` | 8 |
//! | format version (`u32`) | 4 |
//! | config length `n` (`u32`) | 4 |
//! | resolved training config, UTF-8 JSON | n |
//! | `d_img_in`, `d_word`, `d_joint`, `vocab_size`, `n_classes` (`u32` each) | 20 |
//! | image_proj, image_bias, token_embedding, text_proj, text_bias, classifier, classifier_bias (`f32` each, row-major) | 4 per value |
//! | SHA-256 of every preceding byte | 32 |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{ModelDims, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NCLCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_json: String,
}

pub fn encode_checkpoint(params: &ModelParams, config_json: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + config_json.len() + 4 * params.num_parameters());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    let d = params.dims;
    for v in [d.d_img_in, d.d_word, d.d_joint, d.vocab_size, d.n_classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 32 {
        return Err(corrupt("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(8).map_err(corrupt)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch".into()));
    }
    let n = r.u32().map_err(corrupt)? as usize;
    let config_json = String::from_utf8(r.take(n).map_err(corrupt)?.to_vec())
        .map_err(|e| corrupt(format!("config is not UTF-8: {e}")))?;
    let mut dim = || r.u32().map(|v| v as usize).map_err(corrupt);
    let dims = ModelDims {
        d_img_in: dim()?,
        d_word: dim()?,
        d_joint: dim()?,
        vocab_size: dim()?,
        n_classes: dim()?,
    };
    let mut params = ModelParams::zeros(dims);
    for t in params.tensors_mut() {
        let raw = r.take(4 * t.len()).map_err(corrupt)?;
        for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        params,
        config_json,
    })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config_json: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config_json))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let p = ModelParams::init(ModelDims::default(), 11);
        let bytes = encode_checkpoint(&p, "{\"seed\":1}");
        let ck = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(ck.params, p.rounded_to_f32());
        assert_eq!(ck.config_json, "{\"seed\":1}");
    }

    #[test]
    fn corruption_detected() {
        let p = ModelParams::init(ModelDims::default(), 11);
        let mut bytes = encode_checkpoint(&p, "{}");
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("x")),
            Err(Error::CorruptCheckpoint { .. })
        ));
        let bytes = encode_checkpoint(&p, "{}");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 100], Path::new("x")).is_err());
        assert!(decode_checkpoint(b"short", Path::new("x")).is_err());
    }

    #[test]
    fn future_version_rejected() {
        let p = ModelParams::zeros(ModelDims::default());
        let mut bytes = encode_checkpoint(&p, "{}");
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("x")),
            Err(Error::Version {
                found: 7,
                supported: 1
            })
        ));
    }
}
