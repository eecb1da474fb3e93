//! Versioned binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TCOPILOT"
//! version    u32
//! step       u64      optimizer steps applied
//! config     u32 length + UTF-8 key=value text
//! count      u32
//! records    path (u32 length + UTF-8), dtype u8, rank u32, dims u64 * rank, payload
//! ```
//!
//! Records are written in path order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::numerics::{DType, ParameterSet, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TCOPILOT";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(config: &KvMap, params: &ParameterSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.step.to_le_bytes());
    let text = config.render();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(S::DTYPE.code());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| format!("{what} is not UTF-8"))
    }
}

/// Decodes a container; tensors stored in another precision are converted.
pub fn decode<S: Scalar>(bytes: &[u8]) -> std::result::Result<(KvMap, ParameterSet<S>), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("format version {version}, expected {VERSION}"));
    }
    let step = r.u64("step")?;
    let config = KvMap::parse(&r.string("config block")?).map_err(|e| e.to_string())?;
    let count = r.u32("record count")?;
    let mut params = ParameterSet::new();
    params.step = step;
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let path = r.string("record path")?;
        if prev.as_ref().is_some_and(|p| *p >= path) {
            return Err(format!("record {path:?} out of order"));
        }
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let payload = r.take(n * size, "payload")?;
        let data: Vec<S> = payload
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => S::from_f64(f32::read_le(c) as f64),
                DType::F64 => S::from_f64(f64::read_le(c)),
            })
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(path.clone(), t).map_err(|e| e.to_string())?;
        prev = Some(path);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((config, params))
}

pub fn save<S: Scalar>(path: &Path, config: &KvMap, params: &ParameterSet<S>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, encode(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(KvMap, ParameterSet<S>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
