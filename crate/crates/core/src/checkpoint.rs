//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!   magic `CLKD` | version u32 | entry count u32
//!   per entry: name length u32 | UTF-8 name | rank u32 | dims u64 each |
//!   row-major f64 payload.
//!
//! Round-trips are bit-exact: values are stored as raw f64 little-endian
//! bytes and entry order is preserved.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CLKD";
pub const VERSION: u32 = 1;

pub fn save(params: &Parameters, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Write through a temp file and rename so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&display, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))
}

/// Load a checkpoint; tensors come back trainable (callers freeze teachers).
pub fn load(path: &Path) -> Result<Parameters> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&display, e))?;
    let mut reader = Cursor {
        bytes: &bytes,
        offset: 0,
        path: &display,
    };

    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: display.clone(),
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            path: display.clone(),
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = reader.u32()? as usize;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name_len = reader.u32()? as usize;
        let name_at = reader.offset;
        let name_bytes = reader.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| reader.format_err(name_at, format!("invalid UTF-8 name: {e}")))?
            .to_string();
        let rank = reader.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data_at = reader.offset;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(reader.take(8)?.try_into().unwrap()));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| reader.format_err(data_at, format!("invalid tensor {name:?}: {e}")))?
            .with_requires_grad();
        params.insert(name, tensor);
    }
    if reader.offset as usize != bytes.len() {
        return Err(reader.format_err(
            reader.offset,
            format!("{} trailing bytes", bytes.len() as u64 - reader.offset),
        ));
    }
    Ok(params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: u64,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        let end = start + n;
        if end > self.bytes.len() {
            return Err(self.format_err(
                self.offset,
                format!(
                    "truncated payload: wanted {n} bytes, {} left",
                    self.bytes.len() - start
                ),
            ));
        }
        self.offset = end as u64;
        Ok(&self.bytes[start..end])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn format_err(&self, offset: u64, detail: String) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset,
            detail,
        }
    }
}

/// Read a file written by [`save`] without interpreting it; used by tests
/// that compare checkpoints byte for byte.
pub fn read_bytes(path: &Path) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Convenience used by report writers that stream rather than buffer.
pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let display = path.display().to_string();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&display, e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&display, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))
}
