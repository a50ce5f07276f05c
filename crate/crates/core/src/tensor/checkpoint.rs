//! Flat parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AFWPARAM"
//! version  u32
//! meta_len u64, then meta_len bytes of UTF-8 text (may be empty)
//! count    u32
//! count × { name_len u32, name, ndim u32, ndim × u64 extent, numel × f64 }
//! ```
//!
//! Entries are written in name order, so identical stores produce identical
//! bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Tensor, TensorError};
use crate::Scalar;

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AFWPARAM";

/// Named parameter tensors, ordered by name.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Decoded archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub version: u32,
    pub meta: String,
    pub params: ParamStore<T>,
}

pub fn write_archive<T: Scalar, W: Write>(
    mut out: W,
    params: &ParamStore<T>,
    meta: &str,
) -> Result<(), TensorError> {
    out.write_all(MAGIC)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(meta.as_bytes())?;
    let count = u32::try_from(params.len())
        .map_err(|_| TensorError::Format("too many parameters".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_f64_lossless().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, TensorError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TensorError::Format(format!("invalid UTF-8: {e}")))
}

pub fn read_archive<T: Scalar, R: Read>(mut r: R) -> Result<Archive<T>, TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("not a parameter archive".into()));
    }
    let version = read_u32(&mut r)?;
    if version != ARCHIVE_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(T::from_f64_lossy(f64::from_le_bytes(b)));
        }
        if params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(TensorError::Format(format!("duplicate parameter {name}")));
        }
    }
    Ok(Archive {
        version,
        meta,
        params,
    })
}
