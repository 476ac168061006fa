//! Binary checkpoint:
//!
//! ```text
//! "SCKP" | version u32 | sha256(config json) [32] | config_len u32 | config json
//! n_tensors u32 | { name_len u16 | name | rank u32 | dims u32[rank] | f32[] }*
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{HeadParams, ModelConfig, ModelError};
use crate::manifest::write_atomic;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCKP";
const VERSION: u32 = 1;

fn config_json(cfg: &ModelConfig) -> Vec<u8> {
    serde_json::to_vec(cfg).expect("model config serializes")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn checkpoint_to_bytes(p: &HeadParams) -> Vec<u8> {
    let json = config_json(p.config());
    let digest = Sha256::digest(&json);
    let tensors = p.tensors();
    let mut out = Vec::with_capacity(64 + json.len() + 4 * p.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in &p.data[t.range.clone()] {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            ModelError::Malformed(format!("truncated at byte {} (need {n} more)", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<HeadParams, ModelError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    let stored = r.take(32)?.to_vec();
    let json_len = r.u32()? as usize;
    let json = r.take(json_len)?;
    let found = Sha256::digest(json);
    if found.as_slice() != stored.as_slice() {
        return Err(ModelError::DigestMismatch { expected: hex(&stored), found: hex(&found) });
    }
    let cfg: ModelConfig =
        serde_json::from_slice(json).map_err(|e| ModelError::Malformed(format!("config: {e}")))?;
    let mut p = HeadParams::zeros(cfg)?;
    let specs = p.tensors();
    let n = r.u32()? as usize;
    if n != specs.len() {
        return Err(ModelError::Malformed(format!("expected {} tensors, found {n}", specs.len())));
    }
    for spec in &specs {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Malformed("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(ModelError::Malformed(format!("expected tensor {:?}, found {name:?}", spec.name)));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if dims != spec.shape {
            return Err(ModelError::Malformed(format!("{name}: shape {dims:?}, expected {:?}", spec.shape)));
        }
        let raw = r.take(4 * spec.range.len())?;
        for (x, c) in p.data[spec.range.clone()].iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    }
    if r.at != bytes.len() {
        return Err(ModelError::Malformed(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(p)
}

pub fn save_checkpoint(path: impl AsRef<Path>, p: &HeadParams) -> Result<(), ModelError> {
    let path = path.as_ref();
    write_atomic(path, &checkpoint_to_bytes(p))
        .map_err(|e| ModelError::CheckpointIo { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HeadParams, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::CheckpointIo { path: path.display().to_string(), message: e.to_string() })?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> HeadParams {
        let cfg = ModelConfig {
            speech_layers: 2,
            speech_dim: 3,
            text_layers: 1,
            text_dim: 2,
            conv_channels: 4,
            mlp_hidden: 3,
            secondary_head: true,
            attribute_head: false,
            last_layer_only: false,
        };
        let mut p = HeadParams::init(cfg, 5).unwrap();
        p.tensor_mut("speech.layer_logits").unwrap().copy_from_slice(&[0.25, -0.5]);
        p
    }

    #[test]
    fn roundtrip_is_exact_after_f32() {
        let p = params();
        let bytes = checkpoint_to_bytes(&p);
        assert_eq!(&bytes[..4], b"SCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let q = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(q.config(), p.config());
        for (a, b) in p.data.iter().zip(&q.data) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert_eq!(checkpoint_to_bytes(&q), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint_to_bytes(&params());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&b), Err(ModelError::BadMagic(_))));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&b), Err(ModelError::VersionMismatch(9))));
        let mut b = bytes.clone();
        b[8] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&b), Err(ModelError::DigestMismatch { .. })));
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]), Err(ModelError::Malformed(_))));
        let mut b = bytes;
        b.push(0);
        assert!(matches!(checkpoint_from_bytes(&b), Err(ModelError::Malformed(_))));
    }
}
