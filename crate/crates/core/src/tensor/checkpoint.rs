//! Flat named-tensor archive.
//!
//! Layout: the header line [`CHECKPOINT_HEADER`] followed by entries until
//! end of file. Each entry is a name length (u64 LE), UTF-8 name bytes, axis
//! count (u64 LE), axis lengths (u64 LE each) and the values as f32 LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "HSTMIXER-CHECKPOINT v1\n";

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    for (_, name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads every entry of a checkpoint file in stored order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(CHECKPOINT_HEADER.as_bytes()) {
        return Err(Error::Data(format!(
            "{}: missing checkpoint header",
            path.display()
        )));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: CHECKPOINT_HEADER.len(),
        path,
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: non UTF-8 entry name", path.display())))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values in `store` from a checkpoint. Every stored
/// parameter must be present with a matching shape.
pub fn load_checkpoint<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
        let dst = store.get_mut(id);
        if t.shape() != dst.shape() {
            return Err(Error::shape("load_checkpoint", dst.shape(), t.shape()));
        }
        for (d, &v) in dst.data_mut().iter_mut().zip(t.data()) {
            *d = S::of(v as f64);
        }
    }
    Ok(())
}
