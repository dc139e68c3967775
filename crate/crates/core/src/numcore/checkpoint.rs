//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "NSRL"
//! version u32      currently 1
//! meta    u64 length + UTF-8 JSON blob (caller-defined, may be empty)
//! adam_t  u64      optimizer step count
//! count   u64      number of parameters
//! entry*  name (u64 length + UTF-8)
//!         ndims (u64) + dims (u64 each)
//!         value f64 * numel
//!         adam m f64 * numel
//!         adam v f64 * numel
//! ```
//!
//! Entries are written in name order, so identical stores serialize to
//! identical bytes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::params::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use super::NumError;

const MAGIC: &[u8; 4] = b"NSRL";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NumError + '_ {
    move |source| NumError::Io {
        path: PathBuf::from(path),
        source,
    }
}

/// Write the store plus a caller-supplied metadata JSON string.
pub fn save_checkpoint(store: &ParamStore, meta: &str, path: &Path) -> Result<(), NumError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&store.adam_t.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u64).to_le_bytes());
    for (name, entry) in &store.entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = entry.value.shape();
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in [&entry.value, &entry.m, &entry.v] {
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8], NumError> {
        if self.pos + n > self.data.len() {
            return Err(NumError::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NumError> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| NumError::Format(format!("invalid UTF-8 in checkpoint: {e}")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, NumError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Load a checkpoint; returns the restored store and the metadata blob.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String), NumError> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut data)
        .map_err(io_err(path))?;
    let mut r = Reader { data, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(NumError::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta = r.string()?;
    let adam_t = r.u64()?;
    let count = r.u64()? as usize;

    let mut store = ParamStore::new();
    store.adam_t = adam_t;
    for _ in 0..count {
        let name = r.string()?;
        let ndims = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let value = Tensor::from_vec(&shape, r.f64_vec(numel)?)?;
        let m = Tensor::from_vec(&shape, r.f64_vec(numel)?)?;
        let v = Tensor::from_vec(&shape, r.f64_vec(numel)?)?;
        if store.entries.contains_key(&name) {
            return Err(NumError::Format(format!("duplicate parameter {name:?}")));
        }
        store.entries.insert(
            name,
            ParamEntry {
                grad: Tensor::zeros(&shape),
                value,
                m,
                v,
            },
        );
    }
    Ok((store, meta))
}
