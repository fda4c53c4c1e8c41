//! `SQSCKPT1` parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "SQSCKPT1"
//! count       u32      number of records
//! record*     name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!             values f64 × product(dims)
//! ```
//!
//! Records are written in ascending name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQSCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &BTreeMap<String, Array>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, arr) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(arr.rank() as u32)?;
        for &d in arr.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in arr.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn corrupt(pos: u64, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "checkpoint",
        position: pos,
        detail: detail.into(),
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<BTreeMap<String, Array>> {
    let mut r = Counting { inner: r, pos: 0 };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(r.pos, "truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt(r.pos, "truncated record count"))?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let at = r.pos;
        let trunc = |what: &str, pos: u64| corrupt(pos, format!("record {i}: truncated {what}"));
        let len = r.read_u32::<LittleEndian>().map_err(|_| trunc("name length", at))? as usize;
        if len > 1 << 16 {
            return Err(corrupt(at, format!("record {i}: implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| trunc("name", at))?;
        let name = String::from_utf8(name).map_err(|_| corrupt(at, format!("record {i}: name not UTF-8")))?;
        let rank = r.read_u32::<LittleEndian>().map_err(|_| trunc("rank", at))? as usize;
        if rank > 8 {
            return Err(corrupt(at, format!("record `{name}`: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| trunc("shape", at))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| corrupt(r.pos, format!("record `{name}`: truncated values")))?;
        let arr = Array::new(shape, data).map_err(|e| corrupt(at, e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Array>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Array>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let arr = Array::matrix(rows, cols, values[..rows * cols].to_vec());
            let mut m = BTreeMap::new();
            m.insert("a.w".to_string(), arr);
            m.insert("b".to_string(), Array::scalar(1.5));
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &m).unwrap();
            prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn truncated_file_names_record() {
        let mut m = BTreeMap::new();
        m.insert("encoder.w".to_string(), Array::zeros(&[4, 4]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }

    #[test]
    fn bad_magic() {
        assert!(read_checkpoint(&b"SQSCKPT0\0\0\0\0"[..]).is_err());
    }
}
