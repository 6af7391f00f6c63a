//! Little-endian tile file: `CFTL`, version, flags, tile index, point count,
//! then `count` xyz triples of f64 and, when flag bit 0 is set, `count` RGB
//! byte triples.

use alloc::vec::Vec;

use nalgebra::Vector3;

use super::TileIndex;
use crate::{Error, Result};

pub const TILE_MAGIC: [u8; 4] = *b"CFTL";
pub const TILE_VERSION: u32 = 1;
pub const TILE_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;
const FLAG_RGB: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTile {
    pub index: TileIndex,
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

pub fn encode_tile(index: TileIndex, points: &[Vector3<f64>], colors: Option<&[[u8; 3]]>) -> Result<Vec<u8>> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::Contract("one colour per point".into()));
        }
    }
    let mut out = Vec::with_capacity(TILE_HEADER_LEN + points.len() * 27);
    out.extend_from_slice(&TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(if colors.is_some() { FLAG_RGB } else { 0 }).to_le_bytes());
    out.extend_from_slice(&index.0.to_le_bytes());
    out.extend_from_slice(&index.1.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for c in p.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(colors) = colors {
        for c in colors {
            out.extend_from_slice(c);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self
            .at
            .checked_add(N)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Decode {
                offset: self.at,
                reason: alloc::format!("truncated {}", what),
            })?;
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.at..end]);
        self.at = end;
        Ok(buf)
    }
}

pub fn decode_tile(bytes: &[u8]) -> Result<DecodedTile> {
    let mut r = Reader { bytes, at: 0 };
    if r.take::<4>("magic")? != TILE_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(r.take("version")?);
    if version != TILE_VERSION {
        return Err(Error::Decode {
            offset: 4,
            reason: alloc::format!("unsupported version {}", version),
        });
    }
    let flags = u32::from_le_bytes(r.take("flags")?);
    if flags & !FLAG_RGB != 0 {
        return Err(Error::Decode {
            offset: 8,
            reason: alloc::format!("unknown flags {:#x}", flags),
        });
    }
    let ix = i64::from_le_bytes(r.take("tile index")?);
    let iy = i64::from_le_bytes(r.take("tile index")?);
    let count = u64::from_le_bytes(r.take("count")?);
    let per_point = 24 + if flags & FLAG_RGB != 0 { 3 } else { 0 };
    let expect = (count as u128) * per_point as u128 + TILE_HEADER_LEN as u128;
    if expect != bytes.len() as u128 {
        return Err(Error::Decode {
            offset: TILE_HEADER_LEN - 8,
            reason: alloc::format!(
                "count {} does not match {} payload bytes",
                count,
                bytes.len() - TILE_HEADER_LEN
            ),
        });
    }
    let count = count as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.at;
        let p = Vector3::new(
            f64::from_le_bytes(r.take("x")?),
            f64::from_le_bytes(r.take("y")?),
            f64::from_le_bytes(r.take("z")?),
        );
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Decode {
                offset: at,
                reason: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }
    let colors = if flags & FLAG_RGB != 0 {
        let mut c = Vec::with_capacity(count);
        for _ in 0..count {
            c.push(r.take::<3>("colour")?);
        }
        Some(c)
    } else {
        None
    };
    Ok(DecodedTile {
        index: (ix, iy),
        points,
        colors,
    })
}
