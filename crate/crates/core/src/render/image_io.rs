//! Image writers.
//!
//! * RGB: binary PPM, `P6\n<W> <H>\n255\n` followed by `W·H·3` bytes, rows top
//!   to bottom, each channel `round(clamp(v, 0, 1) · 255)`.
//! * Depth: PFM, `Pf\n<W> <H>\n-1.0\n` followed by `W·H` little-endian `f32`
//!   values, rows bottom to top as the format requires.
//! * Masks: `u32 W`, `u32 H` (little-endian) then `W·H` bytes of 0/1, rows top
//!   to bottom.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub fn encode_ppm(rgb: &Array, width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(path: &Path, rgb: &Array, width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_ppm(rgb, width, height))?;
    Ok(())
}

pub fn encode_pfm(depth: &Array, width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for x in 0..width {
            out.write_f32::<LittleEndian>(depth.data()[y * width + x] as f32)
                .expect("vec write");
        }
    }
    out
}

pub fn write_pfm(path: &Path, depth: &Array, width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_pfm(depth, width, height))?;
    Ok(())
}

fn header_fields(bytes: &[u8], n: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Corrupt {
                kind: "image",
                position: i as u64,
                detail: "truncated header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((fields, i + 1))
}

/// Reads a `P6` file back into `[H, W, 3]` values in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Array> {
    let (f, off) = header_fields(bytes, 4)?;
    let bad = |d: &str| Error::Corrupt {
        kind: "ppm",
        position: 0,
        detail: d.into(),
    };
    if f[0] != "P6" || f[3] != "255" {
        return Err(bad("not an 8-bit P6 file"));
    }
    let w: usize = f[1].parse().map_err(|_| bad("width"))?;
    let h: usize = f[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(off..off + w * h * 3).ok_or_else(|| bad("truncated pixels"))?;
    Array::new(vec![h, w, 3], body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Reads a little-endian grayscale PFM into `[H, W]`, top row first.
pub fn read_pfm(bytes: &[u8]) -> Result<Array> {
    let (f, off) = header_fields(bytes, 4)?;
    let bad = |d: &str| Error::Corrupt {
        kind: "pfm",
        position: 0,
        detail: d.into(),
    };
    if f[0] != "Pf" || !f[3].starts_with('-') {
        return Err(bad("not a little-endian grayscale PFM"));
    }
    let w: usize = f[1].parse().map_err(|_| bad("width"))?;
    let h: usize = f[2].parse().map_err(|_| bad("height"))?;
    let mut body = bytes.get(off..off + w * h * 4).ok_or_else(|| bad("truncated pixels"))?;
    let mut data = vec![0.0; w * h];
    for y in (0..h).rev() {
        for x in 0..w {
            data[y * w + x] = body.read_f32::<LittleEndian>()? as f64;
        }
    }
    Array::new(vec![h, w], data)
}

pub fn encode_mask(mask: &[bool], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.len());
    out.write_u32::<LittleEndian>(width as u32).expect("vec write");
    out.write_u32::<LittleEndian>(height as u32).expect("vec write");
    out.extend(mask.iter().map(|&m| m as u8));
    out
}

pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_mask(mask, width, height))?;
    Ok(())
}

pub fn read_mask(mut bytes: &[u8]) -> Result<(Vec<bool>, usize, usize)> {
    let bad = |p: u64, d: &str| Error::Corrupt {
        kind: "mask",
        position: p,
        detail: d.into(),
    };
    let w = bytes
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(0, "truncated header"))? as usize;
    let h = bytes
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(4, "truncated header"))? as usize;
    if bytes.len() < w * h {
        return Err(bad(8 + bytes.len() as u64, "truncated mask body"));
    }
    let mut mask = Vec::with_capacity(w * h);
    for (i, &b) in bytes[..w * h].iter().enumerate() {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(bad(8 + i as u64, "mask byte is not 0 or 1")),
        }
    }
    Ok((mask, w, h))
}
