//! PFM reader/writer.
//!
//! Single-channel (`Pf`) maps carry depth and cost; three-channel (`PF`)
//! maps carry normals. Scanlines are stored bottom-to-top as the format
//! prescribes, and the scale header is negative (little-endian payload).
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MvsError, Result};
use crate::grid::Grid;

/// Write a single-channel float map.
pub fn write_gray(path: &Path, map: &Grid<f32>) -> Result<()> {
    write_inner(path, map.width(), map.height(), 1, |buf| {
        push_rows(buf, map.width(), map.height(), |x, y| [*map.get(x, y)]);
    })
}

/// Write a three-channel float map.
pub fn write_rgb(path: &Path, map: &Grid<[f32; 3]>) -> Result<()> {
    write_inner(path, map.width(), map.height(), 3, |buf| {
        push_rows(buf, map.width(), map.height(), |x, y| *map.get(x, y));
    })
}

fn push_rows<const C: usize>(
    buf: &mut Vec<u8>,
    width: usize,
    height: usize,
    mut pix: impl FnMut(usize, usize) -> [f32; C],
) {
    for y in (0..height).rev() {
        for x in 0..width {
            for v in pix(x, y) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn write_inner(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    fill: impl FnOnce(&mut Vec<u8>),
) -> Result<()> {
    let mut payload = Vec::with_capacity(width * height * channels * 4);
    fill(&mut payload);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(MvsError::format(path, "refusing to write non-finite value"));
        }
    }
    let file = File::create(path).map_err(|e| MvsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{magic}\n{width} {height}\n-1.0\n").map_err(|e| MvsError::io(path, e))?;
    w.write_all(&payload).map_err(|e| MvsError::io(path, e))?;
    Ok(())
}

/// Read a single-channel float map.
pub fn read_gray(path: &Path) -> Result<Grid<f32>> {
    let (width, height, channels, data) = read_inner(path)?;
    if channels != 1 {
        return Err(MvsError::format(path, "expected single-channel map"));
    }
    Ok(Grid::from_fn(width, height, |x, y| {
        data[(height - 1 - y) * width + x]
    }))
}

/// Read a three-channel float map.
pub fn read_rgb(path: &Path) -> Result<Grid<[f32; 3]>> {
    let (width, height, channels, data) = read_inner(path)?;
    if channels != 3 {
        return Err(MvsError::format(path, "expected three-channel map"));
    }
    Ok(Grid::from_fn(width, height, |x, y| {
        let i = ((height - 1 - y) * width + x) * 3;
        [data[i], data[i + 1], data[i + 2]]
    }))
}

fn read_inner(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| MvsError::io(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(MvsError::format(path, format!("bad magic {other:?}"))),
    };
    let width: usize = parse_token(&mut r, path, "width")?;
    let height: usize = parse_token(&mut r, path, "height")?;
    let scale: f64 = parse_token(&mut r, path, "scale")?;
    if width == 0 || height == 0 {
        return Err(MvsError::format(path, "zero dimension"));
    }
    let little_endian = scale < 0.0;

    let mut payload = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut payload)
        .map_err(|e| MvsError::io(path, e))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    Ok((width, height, channels, data))
}

fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    // Skip leading whitespace, then read to next whitespace.
    loop {
        r.read_exact(&mut byte).map_err(|e| MvsError::io(path, e))?;
        if !byte[0].is_ascii_whitespace() {
            break;
        }
    }
    token.push(byte[0] as char);
    loop {
        r.read_exact(&mut byte).map_err(|e| MvsError::io(path, e))?;
        if byte[0].is_ascii_whitespace() {
            return Ok(token);
        }
        token.push(byte[0] as char);
    }
}

fn parse_token<T: std::str::FromStr>(r: &mut impl Read, path: &Path, what: &str) -> Result<T> {
    read_token(r, path)?
        .parse()
        .map_err(|_| MvsError::format(path, format!("invalid {what}")))
}
