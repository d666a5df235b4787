//! Binary checkpoint: magic, format version, `key=value` metadata, then
//! named little-endian `f32` tensors. Optimizer velocities are stored under
//! a `momentum/` prefix.

use std::path::Path;

use ndarray::Array2;

use super::{OptimizerState, ParameterSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SC3DCKPT";
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut meta = format!("optimizer_step={}\n", self.optimizer.step);
        for (k, v) in &self.meta {
            if k != "optimizer_step" {
                meta.push_str(&format!("{k}={v}\n"));
            }
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let tensors: Vec<(String, &Array2<f32>)> = self
            .params
            .iter()
            .map(|(n, a)| (n.to_owned(), a))
            .chain(
                self.optimizer
                    .velocity
                    .iter()
                    .map(|(n, a)| (format!("{MOMENTUM_PREFIX}{n}"), a)),
            )
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, a) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format(meta_at, "metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        let mut step = 0;
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(meta_at, format!("bad metadata line {line:?}")))?;
            if k == "optimizer_step" {
                step = v
                    .parse()
                    .map_err(|_| Error::format(meta_at, "bad optimizer_step"))?;
            }
            meta.push((k.to_owned(), v.to_owned()));
        }
        let count = r.u32()?;
        let mut params = ParameterSet::new();
        let mut velocity = ParameterSet::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()?;
            if rank != 2 {
                return Err(Error::format(
                    at,
                    format!("tensor {name} has rank {rank}, expected 2"),
                ));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|l| l.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(r.pos, format!("tensor {name} exceeds the file")))?;
            let data: Vec<f32> = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(
                    at,
                    format!("tensor {name} holds non-finite values"),
                ));
            }
            let a = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            let (set, key) = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(base) => (&mut velocity, base.to_owned()),
                None => (&mut params, name.clone()),
            };
            if set.contains(&key) {
                return Err(Error::format(at, format!("duplicate tensor {name}")));
            }
            set.insert(key, a);
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos, "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            meta,
            params,
            optimizer: OptimizerState { velocity, step },
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.pos,
                format!("truncated: wanted {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelConfig};

    fn sample() -> Checkpoint {
        let params: ParameterSet<f32> = init_params(&ModelConfig::default(), 9, None).unwrap();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.velocity.get_mut("enc.0.w").unwrap()[[1, 2]] = 0.25;
        optimizer.step = 17;
        Checkpoint {
            meta: vec![
                ("optimizer_step".into(), "17".into()),
                ("epoch".into(), "3".into()),
            ],
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_value("epoch"), Some("3"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut b = sample().to_bytes();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(matches!(
            e,
            Error::VersionMismatch {
                found: 7,
                expected: 1
            }
        ));
        let msg = e.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn corrupt_header_and_truncation() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Format { offset: 0, .. })
        ));
        let b = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
