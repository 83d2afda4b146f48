//! Checkpoint format "GATC": parameters, EMA, optimizer moments and random
//! stream positions, closed by a SHA-256 checksum.
//!
//! Layout (little endian): magic, version `u32`, dtype tag `u8`, config
//! JSON (`u32` length + bytes), step `u64`, the generator, EMA,
//! discriminator and projector stores, the three optimizers (step `u64`,
//! lr `f64`, then first and second moments per tensor), five random
//! streams (seed, stream `u64`, word position `u128`), and the digest of
//! everything before it. A store is a `u32` tensor count followed by its
//! tensors; every tensor is a `u64` length followed by values.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::trainer::{TrainError, TrainState};

pub const MAGIC: &[u8; 4] = b"GATC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found:?} parameters, expected {expected:?}")]
    DType { found: Option<DType>, expected: DType },
    #[error("checkpoint ends early")]
    Truncated,
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid embedded configuration: {0}")]
    Config(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn tensor<T: Scalar>(&mut self, into: &mut [T], what: &str) -> Result<(), CheckpointError> {
        let n = self.u64()? as usize;
        if n != into.len() {
            return Err(CheckpointError::Geometry(format!("{what} has {n} values, the configured model expects {}", into.len())));
        }
        let w = std::mem::size_of::<T>();
        let raw = self.take(n.checked_mul(w).ok_or(CheckpointError::Truncated)?)?;
        for (dst, chunk) in into.iter_mut().zip(raw.chunks_exact(w)) {
            *dst = T::read_le(chunk);
        }
        Ok(())
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        v.write_le(out);
    }
}

fn put_store<T: Scalar>(out: &mut Vec<u8>, s: &ParamStore<T>) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    for t in s.tensors() {
        put_tensor(out, &t.data);
    }
}

fn put_opt<T: Scalar>(out: &mut Vec<u8>, o: &AdamW<T>) {
    out.extend_from_slice(&o.step.to_le_bytes());
    out.extend_from_slice(&o.lr.to_le_bytes());
    for (m, v) in o.m.iter().zip(&o.v) {
        put_tensor(out, m);
        put_tensor(out, v);
    }
}

fn read_store<T: Scalar>(r: &mut Reader<'_>, s: &mut ParamStore<T>, what: &str) -> Result<(), CheckpointError> {
    let n = r.u32()? as usize;
    if n != s.len() {
        return Err(CheckpointError::Geometry(format!("{what} has {n} tensors, expected {}", s.len())));
    }
    for t in s.tensors_mut() {
        r.tensor(&mut t.data, &t.name)?;
    }
    Ok(())
}

fn read_opt<T: Scalar>(r: &mut Reader<'_>, o: &mut AdamW<T>, what: &str) -> Result<(), CheckpointError> {
    o.step = r.u64()?;
    o.lr = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    for (m, v) in o.m.iter_mut().zip(o.v.iter_mut()) {
        r.tensor(m, what)?;
        r.tensor(v, what)?;
    }
    Ok(())
}

pub fn encode<T: Scalar>(s: &TrainState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    let cfg = serde_json::to_vec(&s.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&s.step.to_le_bytes());
    for store in [&s.g, &s.ema, &s.d, &s.p] {
        put_store(&mut out, store);
    }
    for o in [&s.g_opt, &s.d_opt, &s.p_opt] {
        put_opt(&mut out, o);
    }
    for r in s.rng.all() {
        out.extend_from_slice(&r.get_seed());
        out.extend_from_slice(&r.get_stream().to_le_bytes());
        out.extend_from_slice(&r.get_word_pos().to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = r.u8()?;
    if tag != T::DTYPE.tag() {
        return Err(CheckpointError::DType { found: DType::from_tag(tag), expected: T::DTYPE });
    }
    let n = r.u32()? as usize;
    let cfg: RunConfig = serde_json::from_slice(r.take(n)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut s = TrainState::<T>::new(&cfg).map_err(|e| match e {
        TrainError::Config(m) => CheckpointError::Config(m),
        other => CheckpointError::Config(other.to_string()),
    })?;
    s.step = r.u64()?;
    read_store(&mut r, &mut s.g, "generator")?;
    read_store(&mut r, &mut s.ema, "ema")?;
    read_store(&mut r, &mut s.d, "discriminator")?;
    read_store(&mut r, &mut s.p, "projector")?;
    read_opt(&mut r, &mut s.g_opt, "generator optimizer")?;
    read_opt(&mut r, &mut s.d_opt, "discriminator optimizer")?;
    read_opt(&mut r, &mut s.p_opt, "projector optimizer")?;
    for rng in s.rng.all_mut() {
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let pos = r.u128()?;
        let mut fresh = ChaCha8Rng::from_seed(seed);
        fresh.set_stream(stream);
        fresh.set_word_pos(pos);
        *rng = fresh;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Geometry(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    Ok(s)
}

pub fn save_checkpoint<T: Scalar>(s: &TrainState<T>, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    fs::write(&tmp, encode(s)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}
