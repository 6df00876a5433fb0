//! Binary checkpoint format.
//!
//! ```text
//! "STOI" | version u32
//! config_len u32 | config bytes | seed u64 | step u64 | adam_t u64 | record_count u32 | sha256(header)
//! record*: path_len u32 | path | dtype u8 | rank u32 | dims u64* | payload (LE) | sha256(record)
//! ```
//! All integers little-endian. Optimizer moments are records under `adam_m/` and `adam_v/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::arch::ParamStore;
use crate::config::RunConfig;
use crate::error::{CheckpointError, Result, StoicError};
use crate::numerics::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STOI";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Training seed; with `step` it fixes every later random draw.
    pub seed: u64,
    pub step: u64,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        let bits = |a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, va), (kb, vb))| {
                    ka == kb
                        && va.len() == vb.len()
                        && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
                })
        };
        self.config_text == other.config_text
            && self.seed == other.seed
            && self.step == other.step
            && self.adam.t == other.adam.t
            && self.params.bit_eq(&other.params)
            && bits(&self.adam.m, &other.adam.m)
            && bits(&self.adam.v, &other.adam.v)
    }
}

fn put_record(out: &mut Vec<u8>, path: &str, shape: &[usize], data: &[f32]) {
    let start = out.len();
    out.extend_from_slice(&(path.len() as u32).to_le_bytes());
    out.extend_from_slice(path.as_bytes());
    out.push(DType::F32 as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
    let digest = Sha256::digest(&out[start..]);
    out.extend_from_slice(&digest[..]);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn verify(&mut self, start: usize, what: &str) -> std::result::Result<(), CheckpointError> {
        let expected = Sha256::digest(&self.bytes[start..self.pos]);
        let stored = self.take(DIGEST_LEN, "digest")?;
        if stored != &expected[..] {
            return Err(CheckpointError::Digest(what.to_string()));
        }
        Ok(())
    }
}

struct Record {
    path: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_record(r: &mut Reader<'_>) -> std::result::Result<Record, CheckpointError> {
    let start = r.pos;
    let path_len = r.u32("record path length")? as usize;
    let path = String::from_utf8(r.take(path_len, "record path")?.to_vec())
        .map_err(|_| CheckpointError::Malformed("record path is not UTF-8".into()))?;
    let tag = r.take(1, "record dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| {
        CheckpointError::Malformed(format!("unknown dtype tag {tag} in `{path}`"))
    })?;
    let rank = r.u32("record rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(
            usize::try_from(r.u64("record dims")?)
                .map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?,
        );
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let bytes_len = numel
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| CheckpointError::Malformed(format!("record `{path}` is too large")))?;
    let payload = r.take(bytes_len, "record payload")?;
    let data = match dtype {
        DType::F32 => payload.chunks_exact(4).map(f32::read_le).collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::read_le(c) as f32)
            .collect(),
    };
    r.verify(start, &path)?;
    Ok(Record { path, shape, data })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = out.len();
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let count = self.params.len() + self.adam.m.len() + self.adam.v.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let digest = Sha256::digest(&out[header..]);
        out.extend_from_slice(&digest[..]);

        for (path, t) in self.params.iter() {
            put_record(&mut out, path, t.shape(), t.data());
        }
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (path, v) in moments {
                put_record(&mut out, &format!("{prefix}{path}"), &[v.len()], v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let header = r.pos;
        let config_len = r.u32("config length")? as usize;
        let config_text = String::from_utf8(r.take(config_len, "config text")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let adam_t = r.u64("optimizer step")?;
        let count = r.u32("record count")?;
        r.verify(header, "header")?;

        let mut params = ParamStore::new();
        let mut adam = AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: adam_t,
        };
        for _ in 0..count {
            let rec = read_record(&mut r)?;
            if let Some(p) = rec.path.strip_prefix(ADAM_M) {
                adam.m.insert(p.to_string(), rec.data);
            } else if let Some(p) = rec.path.strip_prefix(ADAM_V) {
                adam.v.insert(p.to_string(), rec.data);
            } else {
                let t = Tensor::from_vec(rec.data, &rec.shape)?;
                if params.insert(rec.path.clone(), t).is_some() {
                    return Err(CheckpointError::Malformed(format!(
                        "duplicate record `{}`",
                        rec.path
                    ))
                    .into());
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        Ok(Checkpoint {
            config_text,
            params,
            adam,
            seed,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| StoicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| StoicError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
