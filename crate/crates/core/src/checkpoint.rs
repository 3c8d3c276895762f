//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTC1"
//! u32            format version
//! u64 + bytes    TOML header: version, precision, config hash, vocab hash, [model]
//! u32            array count
//! per array:     u16 name length, name, u8 element width, u8 rank,
//!                u64 × rank dims, elements
//! ```
//!
//! Arrays are the model parameters in enumeration order followed by
//! `bn.{j}.running_mean` / `bn.{j}.running_var` for every conv block.
//! Trailing bytes are rejected.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtcnnModel};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MTC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub precision: String,
    pub config_hash: String,
    pub vocab_hash: String,
    pub model: ModelConfig,
}

/// A restored model and the vocabulary it was trained against.
pub struct Checkpoint<T: Scalar> {
    pub model: MtcnnModel<T>,
    pub header: Header,
}

impl<T: Scalar> Checkpoint<T> {
    /// Rejects a checkpoint whose config or vocabulary differs from the
    /// expected one.
    pub fn ensure_compatible(&self, config: Option<&ModelConfig>, vocab_hash: Option<&str>) -> Result<()> {
        if let Some(c) = config {
            if c.hash() != self.header.config_hash {
                return Err(Error::Compatibility(format!(
                    "checkpoint config {} does not match requested config {}",
                    self.header.config_hash,
                    c.hash()
                )));
            }
        }
        if let Some(v) = vocab_hash {
            if v != self.header.vocab_hash {
                return Err(Error::Compatibility(format!(
                    "checkpoint was trained with vocabulary {}, got {v}",
                    self.header.vocab_hash
                )));
            }
        }
        Ok(())
    }
}

fn put_array<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::WIDTH as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(model: &MtcnnModel<T>, vocab_hash: &str) -> Vec<u8> {
    let header = Header {
        version: VERSION,
        precision: T::NAME.into(),
        config_hash: model.config().hash(),
        vocab_hash: vocab_hash.into(),
        model: model.config().clone(),
    };
    let text = toml::to_string(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text.as_bytes());
    let bn = model.bn_states();
    out.extend(((model.params().len() + 2 * bn.len()) as u32).to_le_bytes());
    for (name, t) in model.named_params() {
        put_array(&mut out, &name, t.shape(), t.data());
    }
    for (j, s) in bn.iter().enumerate() {
        put_array(&mut out, &format!("bn.{j}.running_mean"), &[s.running_mean.len()], &s.running_mean);
        put_array(&mut out, &format!("bn.{j}.running_var"), &[s.running_var.len()], &s.running_var);
    }
    out
}

pub fn save<T: Scalar>(model: &MtcnnModel<T>, vocab_hash: &str, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, vocab_hash))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != version {
        return Err(Error::Format("header version disagrees with preamble".into()));
    }
    if header.model.hash() != header.config_hash {
        return Err(Error::Format("header config hash does not match its config".into()));
    }
    Ok(header)
}

/// Reads only the header, e.g. to pick the element type before loading.
pub fn peek_header(path: &Path) -> Result<Header> {
    let buf = fs::read(path)?;
    read_header(&mut Reader { buf: &buf, pos: 0 })
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    let header = read_header(&mut r)?;
    if header.precision != T::NAME {
        return Err(Error::Compatibility(format!(
            "checkpoint stores {} parameters, requested {}",
            header.precision,
            T::NAME
        )));
    }
    header.model.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let width = r.u8()? as usize;
        if width != T::WIDTH {
            return Err(Error::Format(format!("array {name} has element width {width}, expected {}", T::WIDTH)));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
        let bytes = r.take(len.checked_mul(width).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }

    // Initial values are overwritten below; the seed is irrelevant.
    let mut model = MtcnnModel::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_params = model.params().len();
    let blocks = model.bn_states().len();
    if arrays.len() != n_params + 2 * blocks {
        return Err(Error::Format(format!(
            "checkpoint holds {} arrays, config implies {}",
            arrays.len(),
            n_params + 2 * blocks
        )));
    }
    let stats = arrays.split_off(n_params);
    model.load_params(arrays).map_err(|e| Error::Format(e.to_string()))?;
    for (j, (state, pair)) in model.bn_states_mut().iter_mut().zip(stats.chunks(2)).enumerate() {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        let c = state.running_mean.len();
        if *mean_name != format!("bn.{j}.running_mean") || *var_name != format!("bn.{j}.running_var") {
            return Err(Error::Format(format!("unexpected arrays {mean_name}, {var_name}")));
        }
        if mean.len() != c || var.len() != c {
            return Err(Error::Format(format!("batch-norm statistics {j} have the wrong length")));
        }
        state.running_mean = mean.data().to_vec();
        state.running_var = var.data().to_vec();
    }
    Ok(Checkpoint { model, header })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}
