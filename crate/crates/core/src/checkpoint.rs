//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `PMVT1`, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u8` dtype tag (0 = f32, 1 = f64), `u8` rank,
//! `rank × u32` dims, raw values. A trailing `u64` FNV-1a hash covers every
//! preceding byte.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamStore, Parameter};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 5] = b"PMVT1";

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn to_bytes<E: Element>(store: &ParamStore<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(E::DTYPE.tag());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
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
                offset: self.pos as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, converting every record to `E`. `group_of` assigns
/// each parameter its accounting group from its name.
pub fn from_bytes<E: Element>(
    bytes: &[u8],
    path: &Path,
    group_of: impl Fn(&str) -> ParamGroup,
) -> Result<ParamStore<E>> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
            });
        }
        return Err(corrupt("bad magic".into()));
    }
    let body_len = bytes.len().saturating_sub(8).max(MAGIC.len());
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: MAGIC.len(),
        path,
    };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(format!("unknown dtype tag {tag}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data: Vec<E> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| E::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| E::of(f64::read_le(c))).collect(),
        };
        let value = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        let group = group_of(&name);
        store
            .insert(Parameter::new(name, value, group))
            .map_err(|e| corrupt(e.to_string()))?;
    }
    if bytes.len() < r.pos + 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
        });
    }
    if r.pos + 8 != bytes.len() {
        return Err(corrupt("trailing bytes after records".into()));
    }
    let stored = u64::from_le_bytes(bytes[r.pos..].try_into().unwrap());
    if stored != fnv1a(&bytes[..r.pos]) {
        return Err(corrupt("checksum mismatch".into()));
    }
    Ok(store)
}

pub fn save<E: Element>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load<E: Element>(path: &Path, group_of: impl Fn(&str) -> ParamGroup) -> Result<ParamStore<E>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, path, group_of)
}
