//! Binary checkpoints of a complete [`Trainer`].
//!
//! Layout (integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "TPCK"
//! version    u32      1
//! config     u64 length + UTF-8 TOML of the RunConfig
//! step       u64
//! epoch      u64
//! rng        32-byte ChaCha seed, u64 stream, u128 word position
//! models     u32 count (1, or 2 for teacher then student)
//!   params   u32 count, then per parameter:
//!              u32 name length + UTF-8 name
//!              u32 rank, u64 per dimension
//!              f64 values, row-major
//!   adam     u64 step count, then per parameter the first-moment f64
//!            values followed by the second-moment f64 values
//! ```
//!
//! Nothing else is stored, so identical training runs give identical files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::{Adam, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = trainer.config.to_toml();
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&trainer.step.to_le_bytes());
    out.extend_from_slice(&(trainer.epoch as u64).to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_seed());
    out.extend_from_slice(&trainer.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());

    let stores = trainer.models.stores();
    out.extend_from_slice(&(stores.len() as u32).to_le_bytes());
    for (store, adam) in stores.iter().zip(&trainer.optimizers) {
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (name, tensor) in store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            push_f64s(&mut out, tensor.values());
        }
        out.extend_from_slice(&adam.t.to_le_bytes());
        for (m, v) in adam.m.iter().zip(&adam.v) {
            push_f64s(&mut out, m);
            push_f64s(&mut out, v);
        }
    }
    out
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            });
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

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(8 * out.len())?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }

    fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

/// Rebuilds a trainer. `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TPCK",
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.malformed("config is not UTF-8"))?;
    let config = RunConfig::from_toml(text)?;
    let step = r.u64()?;
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut models = Trainer::build_models(&config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let count = r.u32()? as usize;
    if count != models.stores().len() {
        return Err(r.malformed(format!("{count} models stored, configuration needs {}", models.stores().len())));
    }
    let mut optimizers = Vec::with_capacity(count);
    for store in models.stores_mut() {
        let n = r.u32()? as usize;
        if n != store.len() {
            return Err(r.malformed(format!("{n} parameters stored, model has {}", store.len())));
        }
        for i in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.malformed("name is not UTF-8"))?;
            if name != store.names()[i] {
                return Err(r.malformed(format!("parameter {i} is `{name}`, expected `{}`", store.names()[i])));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let tensor = &mut store.tensors_mut()[i];
            if shape != tensor.shape() {
                return Err(r.malformed(format!("`{name}` has shape {shape:?}, expected {:?}", tensor.shape())));
            }
            r.f64s(tensor.values_mut())?;
        }
        let mut adam = Adam::from_config(store, &config.training);
        adam.t = r.u64()?;
        for (m, v) in adam.m.iter_mut().zip(adam.v.iter_mut()) {
            r.f64s(m)?;
            r.f64s(v)?;
        }
        optimizers.push(adam);
    }
    if r.pos != bytes.len() {
        return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Trainer {
        config,
        models,
        optimizers,
        rng,
        step,
        epoch,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(trainer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
