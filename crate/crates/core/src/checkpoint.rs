//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AKGP1"
//! u32 config_len, config_len bytes of UTF-8 JSON
//! u32 n_tensors, n_tensors records
//! u32 n_buffers, n_buffers records            (optimizer moments)
//! u8 stage, u64 adam_step, u64 sampler_step,
//! u64 pretrain_epochs_done, u64 finetune_epochs_done
//! 4 x u64 PRNG state
//! ```
//!
//! A record is `u32 name_len, name bytes, u32 rank, rank x u64 dims, f64 payload`.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AKGP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub stage: u8,
    pub adam_step: u64,
    pub sampler_step: u64,
    pub pretrain_epochs_done: u64,
    pub finetune_epochs_done: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
    pub counters: Counters,
    pub rng_state: [u64; 4],
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> std::result::Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> std::result::Result<(), CheckpointError> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, ck.config_json.len())?;
    out.extend_from_slice(ck.config_json.as_bytes());
    for section in [&ck.tensors, &ck.optimizer] {
        put_u32(&mut out, section.len())?;
        for (name, t) in section {
            put_record(&mut out, name, t)?;
        }
    }
    let c = &ck.counters;
    out.push(c.stage);
    for v in [c.adam_step, c.sampler_step, c.pretrain_epochs_done, c.finetune_epochs_done] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in ck.rng_state {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, CheckpointError> {
        let n = self.u32()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn record(&mut self) -> std::result::Result<(String, Tensor), CheckpointError> {
        let name = self.string("record name")?;
        let rank = self.u32()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u64()?;
            let d = usize::try_from(d).map_err(|_| CheckpointError::DimOverflow { name: name.clone() })?;
            count = count.checked_mul(d).ok_or_else(|| CheckpointError::DimOverflow { name: name.clone() })?;
            dims.push(d);
        }
        let bytes = count.checked_mul(8).ok_or_else(|| CheckpointError::DimOverflow { name: name.clone() })?;
        let payload = self.take(bytes)?;
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("record `{name}`: {e}")))?;
        Ok((name, t))
    }

    fn section(&mut self) -> std::result::Result<Vec<(String, Tensor)>, CheckpointError> {
        let n = self.u32()?;
        (0..n).map(|_| self.record()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(CheckpointError::Truncated { offset: 0, needed: MAGIC.len() });
        }
        return Err(CheckpointError::BadMagic);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let config_json = r.string("config")?;
    let tensors = r.section()?;
    let optimizer = r.section()?;
    let counters = Counters {
        stage: r.u8()?,
        adam_step: r.u64()?,
        sampler_step: r.u64()?,
        pretrain_epochs_done: r.u64()?,
        finetune_epochs_done: r.u64()?,
    };
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_json, tensors, optimizer, counters, rng_state })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?).map_err(Error::from)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}
