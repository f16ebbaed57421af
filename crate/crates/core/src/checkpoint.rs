//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `CAMSECKP`, `u32` version, the run
//! configuration as TOML text, the vocabulary, then one record per parameter:
//! name, dtype (`0` = f32, `1` = f64), trainable flag, shape and values.
//! Strings are `u32` byte length plus UTF-8.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::qa::CamseModel;
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"CAMSECKP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn checkpoint_bytes(config: &RunConfig, model: &CamseModel, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut snapshot = config.clone();
    snapshot.model = model.config.clone();
    put_str(&mut out, &snapshot.to_toml());
    let tokens = model.vocab.tokens();
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        put_str(&mut out, t);
    }
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        out.push(match precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        out.push(p.trainable as u8);
        let v = p.value();
        out.extend_from_slice(&(v.shape().len() as u32).to_le_bytes());
        for &d in v.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in v.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &RunConfig, model: &CamseModel, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(config, model, precision)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RunConfig, CamseModel)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(RunConfig, CamseModel)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::from_toml(&r.string()?)?;
    let n_tokens = r.u32()? as usize;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let n_params = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let dtype = r.u8()?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => r.take(n.checked_mul(4).ok_or_else(too_big)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            1 => r.take(n.checked_mul(8).ok_or_else(too_big)?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            d => return Err(Error::Corrupt(format!("parameter {name}: unknown dtype {d}"))),
        };
        if store.id(&name).is_some() {
            return Err(Error::Corrupt(format!("duplicate parameter {name}")));
        }
        let value = Tensor::new(shape, data)?;
        if trainable {
            store.add(name, value);
        } else {
            store.add_frozen(name, value);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = CamseModel::from_parts(config.model.clone(), vocab, store)?;
    Ok((config, model))
}

fn too_big() -> Error {
    Error::Corrupt("tensor size overflows".into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8 string".into()))
    }
}
