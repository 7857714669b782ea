//! Binary checkpoints.
//!
//! Layout: the magic bytes `RTCK`, a little-endian `u32` format version, a
//! `u32` length followed by the JSON config, then tensor records until end
//! of file. A record is a `u32` name length, the name bytes, a `u32` rank,
//! one `u64` per dimension and the little-endian `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::adapter::AdapterConfig;
use super::{AdapterRewardHead, ModelConfig, RewardTransformer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTCK";
pub const VERSION: u32 = 1;

fn write_all<C: Serialize>(w: &mut impl Write, config: &C, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_all<C: DeserializeOwned>(bytes: &[u8]) -> Result<(C, Vec<(String, Tensor)>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let config = serde_json::from_slice(c.take(len)?)?;
    let mut tensors = Vec::new();
    while !c.done() {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok((config, tensors))
}

pub fn save_model(model: &RewardTransformer, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let tensors: Vec<_> = model.params().iter().map(|p| (p.name.clone(), &p.tensor)).collect();
    write_all(&mut buf, model.config(), &tensors)?;
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RewardTransformer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (config, tensors): (ModelConfig, _) = read_all(&bytes)?;
    RewardTransformer::from_named_tensors(config, tensors)
}

pub fn save_adapter(head: &AdapterRewardHead, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_all(&mut buf, head.config(), &head.named_tensors())?;
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<AdapterRewardHead> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (config, tensors): (AdapterConfig, _) = read_all(&bytes)?;
    AdapterRewardHead::from_named_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ffn: 8,
            d_reward: 2,
            max_seq_len: 5,
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("rtck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.rtck");
        let m = RewardTransformer::new(small(), 5).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RTCK");

        let head = AdapterRewardHead::new(4, 4, 3, 1).unwrap();
        let hp = dir.join("a.rtck");
        save_adapter(&head, &hp).unwrap();
        let back = load_adapter(&hp).unwrap();
        assert_eq!(back.parameter_count(), head.parameter_count());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = RewardTransformer::new(small(), 5).unwrap();
        let mut buf = Vec::new();
        let mut cfg = small();
        cfg.d_model = 6;
        let tensors: Vec<_> = m.params().iter().map(|p| (p.name.clone(), &p.tensor)).collect();
        write_all(&mut buf, &cfg, &tensors).unwrap();
        let (config, tensors): (ModelConfig, _) = read_all(&buf).unwrap();
        let err = RewardTransformer::from_named_tensors(config, tensors).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_and_bad_magic() {
        assert!(read_all::<ModelConfig>(b"XXXX").is_err());
        assert!(read_all::<ModelConfig>(b"RTCK\x01\x00").is_err());
    }
}
