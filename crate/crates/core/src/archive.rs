//! Single-file tensor archives. One layout serves both checkpoints (magic
//! "RDDM") and image containers (magic "RDDI"):
//!
//! ```text
//! magic[4] | version u32 | tensor count u32
//! per tensor: name-len u16 | name UTF-8 | rank u8 | dims u32 × rank | payload f32 LE
//! trailer: CRC32 of everything prior, u32 LE
//! ```
//!
//! Payloads are f32; training state lives on the f32 grid (see `optim`), so
//! save → load is lossless for it. Malformed files fail with the byte offset
//! where parsing stopped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::Dataset;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDDM";
pub const IMAGE_MAGIC: [u8; 4] = *b"RDDI";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes named tensors in the given order.
pub fn write_tensor_table(path: &Path, magic: [u8; 4], entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::contract("too many tensors for archive"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::contract(format!("tensor rank too high: {name}")))?;
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::contract(format!("dimension too large in {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file while reading {what}"),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Reads a full archive, validating magic, version, structure, and checksum.
/// Payloads are widened to f64.
pub fn read_tensor_table(path: &Path, magic: [u8; 4]) -> Result<Vec<(String, Tensor)>> {
    let data = fs::read(path)?;
    if data.len() < 4 {
        return Err(Error::format(0, "file too short for magic"));
    }
    if data[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&data[..4.min(data.len())])
            ),
        ));
    }
    if data.len() < 8 {
        return Err(Error::format(4, "file too short for checksum trailer"));
    }
    let body = &data[..data.len() - 4];
    let stored_crc =
        u32::from_le_bytes(data[data.len() - 4..].try_into().expect("4 trailer bytes"));
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::format(
            (data.len() - 4) as u64,
            format!("checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"),
        ));
    }

    let mut cur = Cursor { data: body, pos: 4 };
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16("tensor name length")? as usize;
        let name_off = cur.pos as u64;
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(name_off, "tensor name is not valid UTF-8"))?
            .to_string();
        let rank = cur.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = cur.u32("tensor dimension")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::format(cur.pos as u64, "tensor size overflows"))?;
            shape.push(d);
        }
        let payload = cur.take(len * 4, &format!("payload of {name}"))?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(values, &shape)?));
    }
    if cur.pos != body.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after last tensor", body.len() - cur.pos),
        ));
    }
    Ok(out)
}

/// Writes a dataset as an image archive holding "x" and "y" [N,1,H,W].
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let (x, y, _) = ds.stack()?;
    write_tensor_table(path, IMAGE_MAGIC, &[("x", &x), ("y", &y)])
}

/// Loads an image archive; residuals are recomputed from the stored pair.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let table = read_tensor_table(path, IMAGE_MAGIC)?;
    let find = |name: &str| -> Result<&Tensor> {
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(0, format!("image archive is missing tensor {name:?}")))
    };
    Dataset::from_stacked(find("x")?, find("y")?)
}
