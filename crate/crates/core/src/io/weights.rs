//! `NSVT` weights: magic, little-endian u32 version, then per tensor
//! `u32 name length, name, u32 rank, u64 dims, f64 values`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"NSVT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub version: u32,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of(store: &ParamStore) -> Self {
        Manifest {
            format: "NSVT".into(),
            version: VERSION,
            tensors: store.entries().iter().map(|e| ManifestEntry { name: e.name.clone(), shape: e.shape.clone() }).collect(),
        }
    }
}

pub fn write_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos, msg: format!("truncated {what}") });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<WeightsFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "missing NSVT magic".into() });
    }
    let mut r = Reader { b: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| Error::Format { offset: at + 4, msg: "name is not UTF-8".into() })?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format { offset: r.pos - 4, msg: format!("rank {rank} too large") });
        }
        let shape = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format { offset: at, msg: "shape overflows".into() })?;
        let bytes_needed = count.checked_mul(8).ok_or_else(|| Error::Format { offset: at, msg: "shape overflows".into() })?;
        let raw = r.take(bytes_needed, "values")?;
        let vals = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, vals)?));
    }
    Ok(WeightsFile { version, tensors })
}

/// Copies every tensor into `store`; names and shapes must match exactly.
pub fn load_weights(store: &mut ParamStore, file: &WeightsFile) -> Result<()> {
    if file.tensors.len() != store.len() {
        return Err(Error::Format { offset: 0, msg: format!("file has {} tensors, model has {}", file.tensors.len(), store.len()) });
    }
    for (name, t) in &file.tensors {
        let id = store.find(name).ok_or_else(|| Error::Format { offset: 0, msg: format!("unknown tensor '{name}'") })?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Format { offset: 0, msg: format!("'{name}' has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape()) });
        }
        store.set(id, t.clone())?;
    }
    Ok(())
}

/// Writes `path` and a `path.json` manifest next to it.
pub fn save_weights(store: &ParamStore, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, write_weights(store))?;
    let mut m = path.as_os_str().to_owned();
    m.push(".json");
    std::fs::write(m, serde_json::to_string_pretty(&Manifest::of(store))? + "\n")?;
    Ok(())
}
