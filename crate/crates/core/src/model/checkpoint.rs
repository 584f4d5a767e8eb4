//! Checkpoint container. All integers and floats little-endian:
//!
//! ```text
//! magic         4 bytes  "IMCK"
//! version       u32      1
//! config_len    u32      byte length of the JSON config
//! config        UTF-8 JSON ModelConfig
//! param_count   u32
//! per parameter, in registry order:
//!   name_len    u16
//!   name        UTF-8
//!   rank        u8
//!   dims        rank × u32
//!   values      product(dims) × f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{InterMulti, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &InterMulti) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(model: &InterMulti, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&checkpoint_bytes(model))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::data(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<InterMulti> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    let mut model = InterMulti::new(config)?;

    let count = c.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(Error::data(format!(
            "checkpoint has {count} parameters, architecture expects {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let n = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8, &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::data(format!("unknown parameter `{name}` in checkpoint")))?;
        let expected = model.params().get(id).shape().to_vec();
        if expected != shape {
            return Err(Error::shape("load_checkpoint", &expected, &shape));
        }
        *model.params_mut().get_mut(id) = Tensor::new(shape, values)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint parameters"));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<InterMulti> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
