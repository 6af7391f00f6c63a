//! PLY point clouds, CSV traces, PGM depth images and JSON documents.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>], format: PlyFormat) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    encode_ply(&mut w, points, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_ply(w: &mut impl Write, points: &[Vector3<f64>], format: PlyFormat) -> std::io::Result<()> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        name,
        points.len()
    )?;
    for p in points {
        match format {
            // `{:?}` prints the shortest string that parses back to the same
            // bits.
            PlyFormat::Ascii => writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?,
            PlyFormat::BinaryLittleEndian => {
                for c in p.iter() {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex positions of a PLY file. Handles ASCII and little-endian binary
/// with scalar vertex properties; other elements must come after the
/// vertices.
pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn decode_ply(r: &mut impl BufRead) -> Result<Vec<Vector3<f64>>> {
    let bad = |m: &str| Error::Format(format!("malformed PLY: {}", m));
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line).map_err(|e| Error::io("<ply>", e))? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        next(&mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(bad(&format!("unsupported format {}", other))),
                })
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(bad("vertices must be the first element"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list property on vertices")),
            ["property", t, name] if in_vertex => {
                let s = Scalar::parse(t).ok_or_else(|| bad(&format!("property type {}", t)))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| bad("no format line"))?;
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let col = |n: &str| {
        props
            .iter()
            .position(|p| p.0 == n)
            .ok_or_else(|| bad(&format!("no {} property", n)))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut out = Vec::with_capacity(count.min(1 << 24));
    match format {
        PlyFormat::Ascii => {
            for _ in 0..count {
                next(&mut line)?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>().map_err(|_| bad("vertex value")))
                    .collect::<Result<_>>()?;
                if vals.len() < props.len() {
                    return Err(bad("short vertex line"));
                }
                out.push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let offsets: Vec<usize> = props
                .iter()
                .scan(0, |o, p| {
                    let at = *o;
                    *o += p.1.size();
                    Some(at)
                })
                .collect();
            let stride: usize = props.iter().map(|p| p.1.size()).sum();
            let mut buf = vec![0u8; stride];
            for _ in 0..count {
                r.read_exact(&mut buf).map_err(|_| bad("truncated vertex data"))?;
                let get = |i: usize| props[i].1.read_le(&buf[offsets[i]..]);
                out.push(Vector3::new(get(ix), get(iy), get(iz)));
            }
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain PGM (P2) of a depth map scaled to 16 bits; invalid pixels are 0.
pub fn depth_to_pgm(width: u32, height: u32, depths: &[f64]) -> String {
    let max = depths.iter().copied().filter(|d| *d > 0.0).fold(0.0, f64::max);
    let mut s = format!("P2\n{} {}\n65535\n", width, height);
    for row in depths.chunks(width as usize) {
        let line: Vec<String> = row
            .iter()
            .map(|d| {
                if *d > 0.0 && max > 0.0 {
                    ((d / max) * 65535.0).round() as u32
                } else {
                    0
                }
                .to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
