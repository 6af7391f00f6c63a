//! Tile persistence on disk: one encoded file per tile plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clusterfusion_core::fusion::{TileBackend, TileIndex, TileSummary};
use serde::{Deserialize, Serialize};

use crate::io::write_json;
use crate::Result;

#[derive(Debug)]
pub struct DirBackend {
    root: PathBuf,
    pub writes: usize,
}

impl DirBackend {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| crate::Error::io(&root, e))?;
        Ok(Self { root, writes: 0 })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file_name(index: TileIndex) -> String {
        format!("tile_{}_{}.cftl", index.0, index.1)
    }

    pub fn path(&self, index: TileIndex) -> PathBuf {
        self.root.join(Self::file_name(index))
    }
}

fn backend_err(path: &Path, e: std::io::Error) -> clusterfusion_core::Error {
    clusterfusion_core::Error::Backend(format!("{}: {}", path.display(), e))
}

impl TileBackend for DirBackend {
    fn write(&mut self, index: TileIndex, bytes: &[u8]) -> clusterfusion_core::Result<()> {
        let path = self.path(index);
        // Write-then-rename so a crash never leaves a half tile behind.
        let tmp = path.with_extension("cftl.tmp");
        fs::write(&tmp, bytes).map_err(|e| backend_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| backend_err(&path, e))?;
        self.writes += 1;
        Ok(())
    }

    fn read(&mut self, index: TileIndex) -> clusterfusion_core::Result<Vec<u8>> {
        let path = self.path(index);
        fs::read(&path).map_err(|e| backend_err(&path, e))
    }

    fn remove(&mut self, index: TileIndex) -> clusterfusion_core::Result<()> {
        let path = self.path(index);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(backend_err(&path, e)),
            _ => Ok(()),
        }
    }

    fn locate(&self, index: TileIndex) -> String {
        Self::file_name(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ind_x: i64,
    pub ind_y: i64,
    pub points: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_c: f64,
    pub voxel: f64,
    pub tiles: Vec<ManifestEntry>,
}

/// Manifest of a store whose tiles have all been flushed to `backend`.
pub fn write_manifest(backend: &DirBackend, d_c: f64, voxel: f64, tiles: &[TileSummary]) -> Result<PathBuf> {
    let manifest = Manifest {
        d_c,
        voxel,
        tiles: tiles
            .iter()
            .map(|t| ManifestEntry {
                ind_x: t.index.0,
                ind_y: t.index.1,
                points: t.count,
                file: DirBackend::file_name(t.index),
            })
            .collect(),
    };
    let path = backend.root.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clusterfusion_core::fusion::{decode_tile, encode_tile};
    use nalgebra::Vector3;

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = DirBackend::create(dir.path().join("tiles")).unwrap();
        let pts = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-0.5, 1e-300, 7.25)];
        let bytes = encode_tile((3, -4), &pts, None).unwrap();
        b.write((3, -4), &bytes).unwrap();
        assert!(b.path((3, -4)).exists());
        assert_eq!(b.read((3, -4)).unwrap(), bytes);
        assert_eq!(decode_tile(&b.read((3, -4)).unwrap()).unwrap().points, pts);
        b.remove((3, -4)).unwrap();
        b.remove((3, -4)).unwrap();
        assert!(b.read((3, -4)).is_err());
    }
}
