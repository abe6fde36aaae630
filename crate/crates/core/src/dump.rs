//! ULNS activation dumps: per-layer probe activations in a small
//! little-endian binary container, so activations captured from an external
//! model can be diagnosed. Layout in `docs/formats.md`.

use std::path::Path;

use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::Matrix;

pub const DUMP_MAGIC: &[u8; 4] = b"ULNS";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpLayer {
    pub index: u32,
    pub rows: u32,
    pub cols: u32,
    /// Row-major payload.
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub version: u32,
    pub label: String,
    pub source: Domain,
    pub layers: Vec<DumpLayer>,
}

impl ActivationDump {
    /// Converts f64 activations (one matrix per layer, layer indices
    /// `0..L`) to a dump.
    pub fn from_activations(label: &str, source: Domain, acts: &[Matrix]) -> Result<Self> {
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, m)| DumpLayer {
                index: i as u32,
                rows: m.rows() as u32,
                cols: m.cols() as u32,
                data: m.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let dump = Self {
            version: DUMP_VERSION,
            label: label.to_string(),
            source,
            layers,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.label.len() > u16::MAX as usize {
            return Err(Error::Invalid("dump label longer than 65535 bytes".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Invalid("dump has no layers".into()));
        }
        let expected = self.layers[0].rows;
        let mut prev: Option<u32> = None;
        for l in &self.layers {
            if l.data.len() as u64 != l.rows as u64 * l.cols as u64 {
                return Err(Error::Invalid(format!(
                    "layer {}: payload length does not match {}x{}",
                    l.index, l.rows, l.cols
                )));
            }
            if l.rows != expected {
                return Err(Error::RowMismatch {
                    layer: l.index,
                    rows: l.rows,
                    expected,
                });
            }
            if prev.is_some_and(|p| l.index <= p) {
                return Err(Error::Invalid(format!(
                    "layer indices must increase (saw {} after {})",
                    l.index,
                    prev.unwrap_or(0)
                )));
            }
            prev = Some(l.index);
        }
        Ok(())
    }

    /// Layers as f64 matrices.
    pub fn to_matrices(&self) -> Result<Vec<Matrix>> {
        self.layers
            .iter()
            .map(|l| {
                if l.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("dump layer {}", l.index)));
                }
                Matrix::new(
                    l.rows as usize,
                    l.cols as usize,
                    l.data.iter().map(|&v| f64::from(v)).collect(),
                )
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let payload: usize = self.layers.iter().map(|l| 12 + 4 * l.data.len()).sum();
        let mut out = Vec::with_capacity(15 + self.label.len() + payload);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.label.len() as u16).to_le_bytes());
        out.extend_from_slice(self.label.as_bytes());
        out.push(self.source.tag());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&l.index.to_le_bytes());
            out.extend_from_slice(&l.rows.to_le_bytes());
            out.extend_from_slice(&l.cols.to_le_bytes());
            for v in &l.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != DUMP_MAGIC {
            return Err(Error::BadMagic { expected: "ULNS" });
        }
        let version = r.u32("header")?;
        if version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let label_len = u16::from_le_bytes(r.take(2, "header")?.try_into().expect("2 bytes"));
        let label = std::str::from_utf8(r.take(label_len as usize, "label")?)
            .map_err(|_| Error::Invalid("dump label is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "header")?[0];
        let source = Domain::from_tag(tag)
            .ok_or_else(|| Error::Invalid(format!("unknown probe source tag {tag}")))?;
        let n_layers = r.u32("header")?;
        let mut layers = Vec::new();
        let mut expected_rows = None;
        for i in 0..n_layers {
            let what = format!("layer {i}");
            let index = r.u32(&what)?;
            let rows = r.u32(&what)?;
            let cols = r.u32(&what)?;
            let expected = *expected_rows.get_or_insert(rows);
            if rows != expected {
                return Err(Error::RowMismatch {
                    layer: index,
                    rows,
                    expected,
                });
            }
            let n = rows as u64 * cols as u64;
            let len = n
                .checked_mul(4)
                .filter(|&b| b <= (r.bytes.len() - r.pos) as u64)
                .ok_or_else(|| Error::Truncated(format!("layer {index}")))?;
            let data = r
                .take(len as usize, &what)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            layers.push(DumpLayer {
                index,
                rows,
                cols,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Invalid(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        let dump = Self {
            version,
            label,
            source,
            layers,
        };
        dump.validate()?;
        Ok(dump)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_dump(path: &Path) -> Result<ActivationDump> {
    ActivationDump::from_bytes(&std::fs::read(path)?)
}

pub fn write_dump(dump: &ActivationDump, path: &Path) -> Result<()> {
    write_atomic(path, &dump.to_bytes()?)
}
