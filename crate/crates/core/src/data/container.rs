//! Binary feature container (`.imft`) and the line-delimited JSON manifest.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes   "IMFT"
//! version      u32       1
//! count        u32       number of samples
//! per sample:
//!   label kind u8        0 = intensity, 1 = class
//!   label      f64 | u16
//!   per modality in (text, visual, acoustic) order:
//!     L        u32       sequence length
//!     D        u32       feature width
//!     values   L·D × f64 row-major
//! ```
//!
//! A manifest is one JSON object per line, `{"file": "...", "split": "..."}`,
//! with `file` relative to the manifest's directory.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureDataset, Label, Sequence, Split, UtteranceSample};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IMFT";
pub const VERSION: u32 = 1;

const LABEL_INTENSITY: u8 = 0;
const LABEL_CLASS: u8 = 1;

pub fn write_samples<W: Write>(w: &mut W, samples: &[UtteranceSample]) -> io::Result<()> {
    let count = u32::try_from(samples.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "too many samples"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for s in samples {
        match s.label {
            Label::Intensity(y) => {
                w.write_all(&[LABEL_INTENSITY])?;
                w.write_all(&y.to_le_bytes())?;
            }
            Label::Class(c) => {
                w.write_all(&[LABEL_CLASS])?;
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for seq in &s.sequences {
            w.write_all(&(seq.len() as u32).to_le_bytes())?;
            w.write_all(&(seq.dim() as u32).to_le_bytes())?;
            for v in seq.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    sample: Option<usize>,
}

impl<R: Read> Reader<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Data {
            sample: self.sample,
            msg: msg.into(),
        }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => self.fail(format!("truncated while reading {what}")),
            _ => self.fail(format!("read error in {what}: {e}")),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.bytes::<4>(what).map(u32::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.bytes::<8>(what).map(f64::from_le_bytes)
    }
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<UtteranceSample>> {
    let mut rd = Reader {
        inner: r,
        sample: None,
    };
    let magic = rd.bytes::<4>("magic")?;
    if &magic != MAGIC {
        return Err(rd.fail(format!("malformed header: bad magic {magic:?}")));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(rd.fail(format!("malformed header: unsupported version {version}")));
    }
    let count = rd.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        rd.sample = Some(i);
        let label = match rd.bytes::<1>("label kind")?[0] {
            LABEL_INTENSITY => Label::Intensity(rd.f64("label")?),
            LABEL_CLASS => Label::Class(u16::from_le_bytes(rd.bytes::<2>("label")?)),
            k => return Err(rd.fail(format!("unknown label kind {k}"))),
        };
        let mut seqs = Vec::with_capacity(3);
        for m in super::Modality::ALL {
            let len = rd.u32("sequence length")? as usize;
            let dim = rd.u32("feature width")? as usize;
            if len == 0 || dim == 0 {
                return Err(rd.fail(format!("empty {m} sequence ({len}×{dim})")));
            }
            let n = len
                .checked_mul(dim)
                .ok_or_else(|| rd.fail("sequence size overflows"))?;
            let mut values = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                values.push(rd.f64("feature values")?);
            }
            seqs.push(Sequence::new(len, dim, values).map_err(|e| rd.fail(e.to_string()))?);
        }
        let sequences: [Sequence; 3] = seqs.try_into().expect("three modalities");
        samples.push(UtteranceSample { sequences, label });
    }
    rd.sample = None;
    let mut probe = [0u8; 1];
    match rd.inner.read(&mut probe) {
        Ok(0) => Ok(samples),
        Ok(_) => Err(rd.fail(format!("trailing bytes after {count} samples"))),
        Err(e) => Err(rd.fail(e.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: PathBuf,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::data(format!("{}:{}: bad manifest entry: {e}", path.display(), n + 1))
            })
        })
        .collect()
}

/// Loads every file listed for `split`, in manifest order.
pub fn load_dataset(manifest: &Path, split: Split) -> Result<FeatureDataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<_> = read_manifest(manifest)?
        .into_iter()
        .filter(|e| e.split == split)
        .collect();
    if entries.is_empty() {
        return Err(Error::data(format!(
            "{}: no files for split `{split}`",
            manifest.display()
        )));
    }
    let mut samples = Vec::new();
    for entry in entries {
        let path = base.join(&entry.file);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let offset = samples.len();
        let mut part = read_samples(BufReader::new(file)).map_err(|e| match e {
            Error::Data { sample, msg } => Error::Data {
                sample: sample.map(|i| i + offset),
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        samples.append(&mut part);
    }
    FeatureDataset::new(samples, split)
}

/// Writes each dataset to `<dir>/<split>.imft` and a `manifest.jsonl`
/// listing them. Returns the manifest path.
pub fn write_dataset(dir: &Path, datasets: &[&FeatureDataset]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for d in datasets {
        let name = format!("{}.imft", d.split());
        let path = dir.join(&name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_samples(&mut w, d.samples())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            file: name.into(),
            split: d.split(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
