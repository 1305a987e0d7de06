//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "MLNT" | version | config_len | config (UTF-8 key=value lines)
//! repeated until EOF:
//!     name_len | name | rank | dims[rank] | f32 values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MlnetParams, ModelConfig};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MLNT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(params: &MlnetParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config: String = params
        .config()
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<MlnetParams<T>> {
    let fail = |reason: String| Error::format("checkpoint", path, reason);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(fail)? != MAGIC {
        return Err(fail("bad magic, not an MLNT checkpoint".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let len = r.u32().map_err(fail)? as usize;
    let text = std::str::from_utf8(r.take(len).map_err(fail)?).map_err(|e| fail(e.to_string()))?;
    let kv = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| fail(format!("config line `{l}` lacks '='")))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig::from_kv(&kv)?;

    let mut named = Vec::new();
    while !r.at_end() {
        let n = r.u32().map_err(fail)? as usize;
        let name = std::str::from_utf8(r.take(n).map_err(fail)?)
            .map_err(|e| fail(e.to_string()))?
            .to_string();
        let rank = r.u32().map_err(fail)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4).map_err(fail)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        named.push((name, Tensor::new(&dims, data)?));
    }
    MlnetParams::from_parts(config, named)
}

pub fn save<T: Real>(path: &Path, params: &MlnetParams<T>) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<MlnetParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and rejects it unless its config equals `expected`.
pub fn load_expecting<T: Real>(path: &Path, expected: &ModelConfig) -> Result<MlnetParams<T>> {
    let params = load(path)?;
    if params.config() != expected {
        return Err(Error::ConfigMismatch {
            expected: expected.to_string(),
            found: params.config().to_string(),
        });
    }
    Ok(params)
}
