//! PLY point-cloud reader/writer (ascii and binary little-endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{MvsError, Result};

/// One oriented, colored point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write(path: &Path, points: &[PlyPoint], format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| MvsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
        points.len()
    )
    .map_err(|e| MvsError::io(path, e))?;
    match format {
        PlyFormat::Ascii => {
            for p in points {
                writeln!(
                    w,
                    "{} {} {} {} {} {} {} {} {}",
                    p.position.x as f32,
                    p.position.y as f32,
                    p.position.z as f32,
                    p.normal.x as f32,
                    p.normal.y as f32,
                    p.normal.z as f32,
                    p.color[0],
                    p.color[1],
                    p.color[2]
                )
                .map_err(|e| MvsError::io(path, e))?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(points.len() * 27);
            for p in points {
                for v in [
                    p.position.x, p.position.y, p.position.z, p.normal.x, p.normal.y, p.normal.z,
                ] {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                buf.extend_from_slice(&p.color);
            }
            w.write_all(&buf).map_err(|e| MvsError::io(path, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn size(self) -> usize {
        match self {
            Scalar::F32 | Scalar::I32 | Scalar::U32 => 4,
            Scalar::F64 => 8,
            Scalar::U8 => 1,
        }
    }
}

fn scalar_of(name: &str) -> Option<Scalar> {
    match name {
        "float" | "float32" => Some(Scalar::F32),
        "double" | "float64" => Some(Scalar::F64),
        "uchar" | "uint8" | "char" | "int8" => Some(Scalar::U8),
        "int" | "int32" => Some(Scalar::I32),
        "uint" | "uint32" => Some(Scalar::U32),
        _ => None,
    }
}

pub fn read(path: &Path) -> Result<Vec<PlyPoint>> {
    let file = File::open(path).map_err(|e| MvsError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| MvsError::io(path, e))?;
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut r)? != "ply" {
        return Err(MvsError::format(path, "missing ply magic"));
    }
    let mut format = None;
    let mut vertex_count = 0usize;
    let mut props: Vec<(Scalar, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = read_line(&mut r)?;
        if l.is_empty() && format.is_none() {
            return Err(MvsError::format(path, "truncated header"));
        }
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(MvsError::format(path, format!("unsupported format {other}")))
                    }
                });
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = n
                    .parse()
                    .map_err(|_| MvsError::format(path, "bad vertex count"))?;
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(MvsError::format(path, "list property on vertices"));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    let sc = scalar_of(ty).ok_or_else(|| {
                        MvsError::format(path, format!("unsupported property type {ty}"))
                    })?;
                    props.push((sc, (*name).to_string()));
                }
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let format = format.ok_or_else(|| MvsError::format(path, "missing format line"))?;

    let idx = |name: &str| props.iter().position(|(_, n)| n == name);
    let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(MvsError::format(path, "missing x/y/z properties")),
    };
    let normals = match (idx("nx"), idx("ny"), idx("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let colors = match (idx("red"), idx("green"), idx("blue")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut points = Vec::with_capacity(vertex_count);
    match format {
        PlyFormat::Ascii => {
            let mut text = String::new();
            r.read_to_string(&mut text)
                .map_err(|e| MvsError::io(path, e))?;
            let mut values = text.split_whitespace();
            for _ in 0..vertex_count {
                let mut row = Vec::with_capacity(props.len());
                for _ in &props {
                    let tok = values
                        .next()
                        .ok_or_else(|| MvsError::format(path, "truncated vertex data"))?;
                    row.push(
                        tok.parse::<f64>()
                            .map_err(|_| MvsError::format(path, "bad vertex value"))?,
                    );
                }
                points.push(assemble(&row, ix, iy, iz, normals, colors));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let row_size: usize = props.iter().map(|(s, _)| s.size()).sum();
            let mut buf = vec![0u8; row_size * vertex_count];
            r.read_exact(&mut buf).map_err(|e| MvsError::io(path, e))?;
            for v in 0..vertex_count {
                let mut off = v * row_size;
                let mut row = Vec::with_capacity(props.len());
                for (sc, _) in &props {
                    let val = match sc {
                        Scalar::F32 => {
                            f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
                        }
                        Scalar::F64 => f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()),
                        Scalar::U8 => buf[off] as f64,
                        Scalar::I32 => {
                            i32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
                        }
                        Scalar::U32 => {
                            u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
                        }
                    };
                    off += sc.size();
                    row.push(val);
                }
                points.push(assemble(&row, ix, iy, iz, normals, colors));
            }
        }
    }
    Ok(points)
}

fn assemble(
    row: &[f64],
    ix: usize,
    iy: usize,
    iz: usize,
    normals: Option<(usize, usize, usize)>,
    colors: Option<(usize, usize, usize)>,
) -> PlyPoint {
    let normal = normals
        .map(|(a, b, c)| Vector3::new(row[a], row[b], row[c]))
        .unwrap_or_else(Vector3::zeros);
    let color = colors
        .map(|(a, b, c)| [row[a] as u8, row[b] as u8, row[c] as u8])
        .unwrap_or([128, 128, 128]);
    PlyPoint {
        position: Vector3::new(row[ix], row[iy], row[iz]),
        normal,
        color,
    }
}
