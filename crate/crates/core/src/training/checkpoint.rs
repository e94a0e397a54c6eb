//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"VIAPT\x01"
//! version    u16
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count × {  name_len u16, name bytes, dtype u8 (1 = f32, 2 = f64),
//!            rank u8, rank × u64 dims, payload }
//! crc32      u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Real, RngState, Tensor};

pub const MAGIC: &[u8; 6] = b"VIAPT\x01";
pub const FORMAT_VERSION: u16 = 1;

/// Archive metadata block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the tensors describe, e.g. `prompt_model` or `backbone`.
    pub kind: String,
    pub format_version: u16,
    pub dtype: DType,
    pub epoch: usize,
    pub step: u64,
    /// Sampler state; its `algorithm` field identifies the generator.
    pub rng: RngState,
    /// Snapshot of the configuration that produced the archive.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| too_big("metadata"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| too_big("count"))?.to_le_bytes());
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            out.extend_from_slice(&u16::try_from(bytes.len()).map_err(|_| too_big("name"))?.to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(T::DTYPE.code());
            out.push(u8::try_from(t.rank()).map_err(|_| too_big("rank"))?);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses an archive. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format("magic", "not a checkpoint archive"));
        }
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 + 4 {
            return Err(Error::format("length", format!("archive truncated at {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                "crc32",
                format!("stored {stored:#010x}, computed {actual:#010x} (truncated or corrupted)"),
            ));
        }

        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        if meta.dtype != T::DTYPE {
            return Err(Error::format(
                "dtype",
                format!("archive holds {} tensors, run uses {}", meta.dtype.name(), T::DTYPE.name()),
            ));
        }
        let count = r.u32("entry count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = |what: &str| format!("entry {i} {what}");
            let name_len = r.u16(&field("name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field("name"))?)
                .map_err(|_| Error::format(field("name"), "not UTF-8"))?
                .to_string();
            let code = r.u8(&field("dtype"))?;
            match DType::from_code(code) {
                Some(dt) if dt == T::DTYPE => {}
                Some(dt) => {
                    return Err(Error::format(
                        format!("entry `{name}` dtype"),
                        format!("{} tensor in a {} run", dt.name(), T::DTYPE.name()),
                    ))
                }
                None => return Err(Error::format(format!("entry `{name}` dtype"), format!("unknown code {code}"))),
            }
            let rank = r.u8(&field("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64(&field("dims"))?).map_err(|_| too_big("dims"))?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_needed = len.and_then(|n| n.checked_mul(T::DTYPE.size()));
            let Some(bytes_needed) = bytes_needed else {
                return Err(Error::format(format!("entry `{name}` dims"), "overflow"));
            };
            let payload = r.take(bytes_needed, &format!("entry `{name}` payload"))?;
            let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::format("trailer", format!("{} unexpected bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Reads only the metadata block, so callers can pick the precision before
/// decoding tensors.
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("magic", "not a checkpoint archive"));
    }
    let mut r = Reader { buf: &bytes, pos: MAGIC.len() };
    r.u16("version")?;
    let meta_len = r.u32("metadata length")? as usize;
    serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::format("metadata", e.to_string()))
}

fn too_big(field: &str) -> Error {
    Error::format(field, "value does not fit the archive field")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(field, "runs past end of archive"));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample<T: Real>() -> Checkpoint<T> {
        let mut rng = RngState::new(5);
        Checkpoint {
            meta: CheckpointMeta {
                kind: "test".into(),
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE,
                epoch: 3,
                step: 17,
                rng: RngState::at(9, 123),
                config: serde_json::json!({"lr": 0.001, "name": "x"}),
            },
            tensors: vec![
                ("a".into(), rng.sample_gaussian(&[3, 4])),
                ("b".into(), Tensor::scalar(T::lit(2.5))),
                ("empty".into(), Tensor::zeros(&[0, 4])),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample::<f32>();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = sample::<f64>().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::<f64>::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        let err = Checkpoint::<f64>::from_bytes(&flipped).unwrap_err();
        assert!(err.to_string().contains("crc32"));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad_magic).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn cross_precision_is_rejected() {
        let bytes = sample::<f64>().to_bytes().unwrap();
        let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}
