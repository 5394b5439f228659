//! Binary parameter container.
//!
//! Layout (little-endian): `b"CGRT"`, version `u32`, count `u32`, then per
//! entry a `u16` name length, the UTF-8 name, `u32` rows, `u32` cols and
//! `rows * cols` row-major `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"CGRT";
pub const VERSION: u32 = 1;

pub type Entry = (String, Matrix<f64>);

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, m) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for x in m.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rows = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    write_entries(BufWriter::new(File::create(path)?), entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    read_entries(BufReader::new(File::open(path)?))
}
