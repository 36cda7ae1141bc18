//! Little-endian weight container:
//!
//! ```text
//! "SSWN" | version u32 | spec hash u64 | record count u32 | records…
//! record = name len u32 | name | dtype u8 | rank u8 | dims u64… | values
//! ```
//!
//! Parameters come first in graph order, then batch-norm running statistics.

use std::io::{Read, Write};
use std::path::Path;

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};

pub const MAGIC: &[u8; 4] = b"SSWN";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    values.iter().for_each(|v| v.write_le(out));
}

/// Cursor over a byte slice with truncation errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated stream: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    /// Reads one record into `dst`, checking name, dtype and dims.
    pub(crate) fn record_into<T: Real>(&mut self, name: &str, dims: &[usize], dst: &mut [T]) -> Result<()> {
        let len = self.u32()? as usize;
        let stored = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        if stored != name {
            return Err(Error::Format(format!("expected record `{name}`, found `{stored}`")));
        }
        let tag = self.u8()?;
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::Format(format!(
                    "record `{name}` holds {d:?} values, model uses {:?}",
                    T::DTYPE
                )))
            }
            None => return Err(Error::Format(format!("record `{name}`: unknown dtype tag {tag}"))),
        }
        let rank = self.u8()? as usize;
        let stored_dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if stored_dims != dims {
            return Err(Error::ParamShapeMismatch {
                name: name.to_string(),
                stored: stored_dims,
                model: dims.to_vec(),
            });
        }
        let raw = self.take(dst.len() * T::BYTES)?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        Ok(())
    }
}

fn record_count<T: Real>(model: &Model<T>) -> usize {
    let mut n = 0;
    model.graph.visit_params(&mut |_| n += 1);
    model.graph.visit_buffers(&mut |_, _| n += 1);
    n
}

pub(crate) fn write_body<T: Real>(model: &Model<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.spec.hash().to_le_bytes());
    out.extend_from_slice(&(record_count(model) as u32).to_le_bytes());
    model.graph.visit_params(&mut |p| write_record(out, &p.name, &p.dims, p.value.data()));
    model
        .graph
        .visit_buffers(&mut |name, data| write_record(out, name, &[data.len()], data));
}

pub fn serialize_weights<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_body(model, &mut out);
    out
}

/// Loads every record into `model`. Shapes are checked record by record
/// before the spec hash, so a differently sized model reports the offending
/// parameter.
pub(crate) fn read_body<T: Real>(model: &mut Model<T>, r: &mut Reader<'_>) -> Result<()> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hash = r.u64()?;
    let count = r.u32()? as usize;
    let expected = record_count(model);
    let mut status = Ok(());
    model.graph.visit_params_mut(&mut |p| {
        if status.is_ok() {
            status = r.record_into(&p.name, &p.dims, p.value.data_mut());
        }
    });
    std::mem::replace(&mut status, Ok(()))?;
    model.graph.visit_buffers_mut(&mut |name, data| {
        if status.is_ok() {
            let dims = [data.len()];
            status = r.record_into(name, &dims, data);
        }
    });
    status?;
    if count != expected {
        return Err(Error::Format(format!("stream has {count} records, model has {expected}")));
    }
    if hash != model.spec.hash() {
        return Err(Error::SpecHashMismatch {
            found: hash,
            expected: model.spec.hash(),
        });
    }
    Ok(())
}

/// Overwrites the parameters and running statistics of `model`.
pub fn deserialize_weights<T: Real>(model: &mut Model<T>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader::new(bytes);
    // Load into a copy so a failed read leaves the model untouched.
    let mut staged = model.clone();
    read_body(&mut staged, &mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    *model = staged;
    Ok(())
}

/// Builds a model for `spec` and fills it from `bytes`.
pub fn load_weights<T: Real>(spec: &ModelSpec, bytes: &[u8]) -> Result<Model<T>> {
    let mut model = build_model(spec, 0)?;
    deserialize_weights(&mut model, bytes)?;
    Ok(model)
}

pub fn write_weights<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&serialize_weights(model))?;
    Ok(())
}

pub fn read_weights<T: Real>(model: &mut Model<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    deserialize_weights(model, &bytes)
}
