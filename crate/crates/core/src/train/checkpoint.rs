//! Binary checkpoints: magic "CPCS", a version word, the mode byte, then
//! length-prefixed named tensor records, closed by a CRC32 of everything
//! before it. A single flipped byte anywhere fails the checksum; nothing is
//! partially loaded.
//!
//! Record layout (all integers little-endian): u32 name length, name bytes,
//! u32 rank, one u64 per dimension, then the f64 payload. Run counters ride
//! in a reserved `meta` record; the seed is stored bit-exactly through
//! `f64::from_bits`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::{AdamState, Mode};

pub const MAGIC: [u8; 4] = *b"CPCS";
pub const VERSION: u32 = 1;

const META_NAME: &str = "meta";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub mode: Mode,
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots the full training state.
    pub fn capture(
        mode: Mode,
        epoch: u64,
        global_step: u64,
        seed: u64,
        params: &ParamSet,
        adam: &AdamState,
    ) -> Self {
        let named = |ts: &[Tensor]| -> Vec<(String, Tensor)> {
            params
                .iter()
                .map(|(id, n, _)| (n.to_string(), ts[id.index()].clone()))
                .collect()
        };
        let (m, v) = adam.moments();
        Self {
            mode,
            epoch,
            global_step,
            seed,
            adam_step: adam.step,
            params: params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam_m: named(m),
            adam_v: named(v),
        }
    }

    /// Writes the stored values back into a freshly initialized model's
    /// parameter set and optimizer state. Every name and shape must match.
    pub fn restore(&self, params: &mut ParamSet, adam: &mut AdamState) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::CheckpointIncompatible {
                detail: format!(
                    "checkpoint has {} parameters, model has {}",
                    self.params.len(),
                    params.len()
                ),
            });
        }
        for (name, tensor) in &self.params {
            let id = params.id_of(name).ok_or_else(|| Error::CheckpointIncompatible {
                detail: format!("model has no parameter named '{name}'"),
            })?;
            if params.get(id).shape() != tensor.shape() {
                return Err(Error::CheckpointIncompatible {
                    detail: format!("parameter '{name}' shape mismatch"),
                });
            }
            *params.get_mut(id) = tensor.clone();
        }
        adam.step = self.adam_step;
        let (m, v) = adam.moments_mut();
        for (name, tensor) in &self.adam_m {
            let id = params.id_of(name).ok_or_else(|| Error::CheckpointIncompatible {
                detail: format!("moment for unknown parameter '{name}'"),
            })?;
            m[id.index()] = tensor.clone();
        }
        for (name, tensor) in &self.adam_v {
            let id = params.id_of(name).ok_or_else(|| Error::CheckpointIncompatible {
                detail: format!("moment for unknown parameter '{name}'"),
            })?;
            v[id.index()] = tensor.clone();
        }
        Ok(())
    }
}

fn push_record(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ckpt.mode.to_byte());
    let meta = Tensor::vector(vec![
        ckpt.epoch as f64,
        ckpt.global_step as f64,
        ckpt.adam_step as f64,
        f64::from_bits(ckpt.seed),
    ]);
    push_record(&mut buf, META_NAME, &meta);
    for (name, t) in &ckpt.params {
        push_record(&mut buf, &format!("param.{name}"), t);
    }
    for (name, t) in &ckpt.adam_m {
        push_record(&mut buf, &format!("adam.m.{name}"), t);
    }
    for (name, t) in &ckpt.adam_v {
        push_record(&mut buf, &format!("adam.v.{name}"), t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                detail: format!("wanted {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?.to_vec()).map_err(|_| {
            Error::CheckpointTruncated {
                detail: "record name is not UTF-8".into(),
            }
        })?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 1 + 4 {
        return Err(Error::CheckpointTruncated {
            detail: "file shorter than the fixed header".into(),
        });
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CheckpointChecksum);
    }
    if body[..4] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            got: version,
        });
    }
    let mode = Mode::from_byte(body[8])?;
    let mut r = Reader { buf: body, pos: 9 };
    let (meta_name, meta) = r.record()?;
    if meta_name != META_NAME || meta.len() != 4 {
        return Err(Error::CheckpointTruncated {
            detail: "missing meta record".into(),
        });
    }
    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    while r.pos < body.len() {
        let (name, tensor) = r.record()?;
        if let Some(n) = name.strip_prefix("param.") {
            params.push((n.to_string(), tensor));
        } else if let Some(n) = name.strip_prefix("adam.m.") {
            adam_m.push((n.to_string(), tensor));
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            adam_v.push((n.to_string(), tensor));
        } else {
            return Err(Error::CheckpointTruncated {
                detail: format!("unknown record '{name}'"),
            });
        }
    }
    Ok(Checkpoint {
        mode,
        epoch: meta.data()[0] as u64,
        global_step: meta.data()[1] as u64,
        seed: meta.data()[3].to_bits(),
        adam_step: meta.data()[2] as u64,
        params,
        adam_m,
        adam_v,
    })
}
