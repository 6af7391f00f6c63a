use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;
use nalgebra::Vector3;
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

use super::codec::{decode_tile, encode_tile};
use super::{tile_index, voxel_key, Centroid, TileIndex, VoxelKey};
use crate::{Error, Result};

/// Centroid sums are kept in fixed point so compaction gives the same bits
/// whatever order the points arrived in.
const FIXED_SCALE: f64 = (1u64 << 30) as f64;

fn to_fixed(p: &Vector3<f64>) -> [i128; 3] {
    [
        (p.x * FIXED_SCALE).round() as i128,
        (p.y * FIXED_SCALE).round() as i128,
        (p.z * FIXED_SCALE).round() as i128,
    ]
}

/// Where evicted tiles go. Keys are tile indices, values encoded tiles.
pub trait TileBackend {
    fn write(&mut self, index: TileIndex, bytes: &[u8]) -> Result<()>;
    fn read(&mut self, index: TileIndex) -> Result<Vec<u8>>;
    fn remove(&mut self, index: TileIndex) -> Result<()>;
    /// Location description for manifests.
    fn locate(&self, index: TileIndex) -> String;
}

impl<T: TileBackend + ?Sized> TileBackend for &mut T {
    fn write(&mut self, index: TileIndex, bytes: &[u8]) -> Result<()> {
        (**self).write(index, bytes)
    }

    fn read(&mut self, index: TileIndex) -> Result<Vec<u8>> {
        (**self).read(index)
    }

    fn remove(&mut self, index: TileIndex) -> Result<()> {
        (**self).remove(index)
    }

    fn locate(&self, index: TileIndex) -> String {
        (**self).locate(index)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryBackend {
    pub files: BTreeMap<TileIndex, Vec<u8>>,
    pub writes: usize,
}

impl TileBackend for MemoryBackend {
    fn write(&mut self, index: TileIndex, bytes: &[u8]) -> Result<()> {
        self.files.insert(index, bytes.to_vec());
        self.writes += 1;
        Ok(())
    }

    fn read(&mut self, index: TileIndex) -> Result<Vec<u8>> {
        self.files
            .get(&index)
            .cloned()
            .ok_or_else(|| Error::Backend(alloc::format!("tile {:?} not stored", index)))
    }

    fn remove(&mut self, index: TileIndex) -> Result<()> {
        self.files.remove(&index);
        Ok(())
    }

    fn locate(&self, index: TileIndex) -> String {
        alloc::format!("mem:tile_{}_{}", index.0, index.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    /// Tile width, metres.
    pub d_c: f64,
    /// Voxel edge, metres.
    pub voxel: f64,
    /// Seconds of inactivity before a tile is written out.
    pub activity_horizon: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            d_c: 50.0,
            voxel: 0.2,
            activity_horizon: 30.0,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_c > 0.0 && self.d_c.is_finite()) {
            return Err(Error::Config("tile width must be positive".into()));
        }
        if !(self.voxel > 0.0 && self.voxel <= self.d_c) {
            return Err(Error::Config("voxel size must be in (0, d_c]".into()));
        }
        if !(self.activity_horizon >= 0.0) {
            return Err(Error::Config("activity horizon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Voxel {
    point: usize,
    sum: [i128; 3],
    centroid: Centroid,
    touched: bool,
}

#[derive(Debug, Clone)]
pub struct CloudTile {
    pub index: TileIndex,
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    voxels: HashMap<VoxelKey, Voxel, FxBuildHasher>,
    pub active: bool,
    pub dirty: bool,
    pub last_touched: f64,
    /// Bumped on every change; readers compare it to detect a stale copy.
    pub version: u64,
}

impl PartialEq for CloudTile {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.points == other.points && self.colors == other.colors
    }
}

impl CloudTile {
    fn new(index: TileIndex, now: f64) -> Self {
        Self {
            index,
            points: Vec::new(),
            colors: None,
            voxels: HashMap::default(),
            active: true,
            dirty: false,
            last_touched: now,
            version: 0,
        }
    }

    fn from_points(
        index: TileIndex,
        points: Vec<Vector3<f64>>,
        colors: Option<Vec<[u8; 3]>>,
        voxel: f64,
        now: f64,
    ) -> Self {
        let mut t = Self::new(index, now);
        for (i, p) in points.iter().enumerate() {
            if let Some(k) = voxel_key(p, voxel) {
                t.voxels.insert(
                    k,
                    Voxel {
                        point: i,
                        sum: to_fixed(p),
                        centroid: Centroid::new(p),
                        touched: false,
                    },
                );
            }
        }
        t.points = points;
        t.colors = colors;
        t
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Moves each voxel touched since the last pass to the centroid of every
    /// point it absorbed.
    pub fn compact(&mut self, voxel: f64) {
        if !self.dirty {
            return;
        }
        for (key, vx) in self.voxels.iter_mut() {
            if !vx.touched {
                continue;
            }
            vx.touched = false;
            if vx.centroid.count() > 1 {
                let sum = Vector3::from_fn(|k, _| vx.sum[k] as f64 / FIXED_SCALE);
                let c = vx.centroid.mean_with(&sum);
                if voxel_key(&c, voxel) == Some(*key) {
                    self.points[vx.point] = c;
                }
            }
        }
        self.dirty = false;
        self.version += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InsertReport {
    /// New points (newly occupied voxels) per tile.
    pub added: BTreeMap<TileIndex, usize>,
    pub merged: usize,
    pub rejected: usize,
}

impl InsertReport {
    pub fn total_added(&self) -> usize {
        self.added.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub index: TileIndex,
    pub count: usize,
    pub resident: bool,
    pub location: Option<String>,
}

/// Tiles of the fused map, resident or written to the backend. Evicted tiles
/// come back on first access.
#[derive(Debug)]
pub struct TileStore<B: TileBackend> {
    pub config: StoreConfig,
    tiles: BTreeMap<TileIndex, CloudTile>,
    persisted: BTreeMap<TileIndex, usize>,
    backend: B,
    now: f64,
    pub reloads: usize,
    pub evictions: usize,
}

impl<B: TileBackend> TileStore<B> {
    pub fn new(config: StoreConfig, backend: B) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tiles: BTreeMap::new(),
            persisted: BTreeMap::new(),
            backend,
            now: 0.0,
            reloads: 0,
            evictions: 0,
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    fn ensure_resident(&mut self, index: TileIndex) -> Result<bool> {
        if self.tiles.contains_key(&index) {
            return Ok(true);
        }
        if !self.persisted.contains_key(&index) {
            return Ok(false);
        }
        let bytes = self.backend.read(index)?;
        let d = decode_tile(&bytes)?;
        if d.index != index {
            return Err(Error::Backend(alloc::format!("tile {:?} holds {:?}", index, d.index)));
        }
        let tile = CloudTile::from_points(index, d.points, d.colors, self.config.voxel, self.now);
        self.tiles.insert(index, tile);
        self.persisted.remove(&index);
        self.backend.remove(index)?;
        self.reloads += 1;
        Ok(true)
    }

    /// Routes each point to its tile; a point whose voxel is already occupied
    /// only feeds that voxel's centroid.
    pub fn insert(&mut self, points: &[Vector3<f64>], colors: Option<&[[u8; 3]]>, now: f64) -> Result<InsertReport> {
        if let Some(c) = colors {
            if c.len() != points.len() {
                return Err(Error::Contract("one colour per point".into()));
            }
        }
        self.now = self.now.max(now);
        let mut report = InsertReport::default();
        let (d_c, v) = (self.config.d_c, self.config.voxel);
        for (i, p) in points.iter().enumerate() {
            let (Some(ti), Some(vk)) = (tile_index(p, d_c), voxel_key(p, v)) else {
                report.rejected += 1;
                continue;
            };
            self.ensure_resident(ti)?;
            let tile = self.tiles.entry(ti).or_insert_with(|| CloudTile::new(ti, now));
            tile.active = true;
            tile.dirty = true;
            tile.last_touched = self.now;
            tile.version += 1;
            let fixed = to_fixed(p);
            match tile.voxels.get_mut(&vk) {
                Some(vx) => {
                    for k in 0..3 {
                        vx.sum[k] += fixed[k];
                    }
                    vx.centroid.add(p);
                    vx.touched = true;
                    report.merged += 1;
                }
                None => {
                    let idx = tile.points.len();
                    tile.points.push(*p);
                    match (&mut tile.colors, colors) {
                        (Some(tc), Some(c)) => tc.push(c[i]),
                        (None, Some(c)) => {
                            let mut tc = alloc::vec![[0, 0, 0]; idx];
                            tc.push(c[i]);
                            tile.colors = Some(tc);
                        }
                        (Some(tc), None) => tc.push([0, 0, 0]),
                        _ => {}
                    }
                    tile.voxels.insert(
                        vk,
                        Voxel {
                            point: idx,
                            sum: fixed,
                            centroid: Centroid::new(p),
                            touched: true,
                        },
                    );
                    *report.added.entry(ti).or_default() += 1;
                }
            }
        }
        if !self.check_memory_bound() {
            return Err(Error::Invariant(
                "resident points exceed the voxel capacity of active tiles".into(),
            ));
        }
        Ok(report)
    }

    pub fn compact(&mut self) {
        let v = self.config.voxel;
        for t in self.tiles.values_mut() {
            t.compact(v);
        }
    }

    /// Writes out tiles untouched for longer than the horizon. On a backend
    /// failure the tile stays resident and the error is returned.
    pub fn evict_inactive(&mut self, now: f64) -> Result<usize> {
        self.now = self.now.max(now);
        let horizon = self.config.activity_horizon;
        let stale: Vec<TileIndex> = self
            .tiles
            .values()
            .filter(|t| self.now - t.last_touched > horizon)
            .map(|t| t.index)
            .collect();
        let mut n = 0;
        for index in stale {
            let v = self.config.voxel;
            let tile = self.tiles.get_mut(&index).expect("listed above");
            tile.compact(v);
            tile.active = false;
            let bytes = encode_tile(index, &tile.points, tile.colors.as_deref())?;
            self.backend.write(index, &bytes)?;
            let tile = self.tiles.remove(&index).expect("listed above");
            self.persisted.insert(index, tile.len());
            n += 1;
        }
        self.evictions += n;
        Ok(n)
    }

    /// The tile, reloading it if it was evicted.
    pub fn tile(&mut self, index: TileIndex) -> Result<Option<&CloudTile>> {
        if !self.ensure_resident(index)? {
            return Ok(None);
        }
        Ok(self.tiles.get(&index))
    }

    pub fn resident_tile(&self, index: TileIndex) -> Option<&CloudTile> {
        self.tiles.get(&index)
    }

    pub fn is_resident(&self, index: TileIndex) -> bool {
        self.tiles.contains_key(&index)
    }

    pub fn is_persisted(&self, index: TileIndex) -> bool {
        self.persisted.contains_key(&index)
    }

    pub fn tile_indices(&self) -> BTreeSet<TileIndex> {
        self.tiles.keys().chain(self.persisted.keys()).copied().collect()
    }

    pub fn resident_points(&self) -> usize {
        self.tiles.values().map(|t| t.len()).sum()
    }

    pub fn total_points(&self) -> usize {
        self.resident_points() + self.persisted.values().sum::<usize>()
    }

    pub fn active_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// `active tiles · (d_c / v)² · height layers`, layers spanning the
    /// resident voxels' z range.
    pub fn memory_bound(&self) -> usize {
        let mut zmin = i64::MAX;
        let mut zmax = i64::MIN;
        for t in self.tiles.values() {
            for k in t.voxels.keys() {
                zmin = zmin.min(k[2]);
                zmax = zmax.max(k[2]);
            }
        }
        let layers = if zmin > zmax { 0 } else { (zmax - zmin + 1) as usize };
        let per_side = (self.config.d_c / self.config.voxel).ceil() as usize + 1;
        self.tiles.len() * per_side * per_side * layers
    }

    pub fn check_memory_bound(&self) -> bool {
        self.resident_points() <= self.memory_bound()
    }

    pub fn summaries(&self) -> Vec<TileSummary> {
        self.tile_indices()
            .into_iter()
            .map(|i| match self.tiles.get(&i) {
                Some(t) => TileSummary {
                    index: i,
                    count: t.len(),
                    resident: true,
                    location: None,
                },
                None => TileSummary {
                    index: i,
                    count: self.persisted[&i],
                    resident: false,
                    location: Some(self.backend.locate(i)),
                },
            })
            .collect()
    }

    /// Every point of the map, tile by tile, without changing residency.
    pub fn all_points(&mut self) -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::with_capacity(self.total_points());
        for i in self.tile_indices() {
            match self.tiles.get(&i) {
                Some(t) => out.extend_from_slice(&t.points),
                None => out.extend(decode_tile(&self.backend.read(i)?)?.points),
            }
        }
        Ok(out)
    }

    /// Writes every resident tile to the backend while keeping it resident.
    pub fn flush(&mut self) -> Result<usize> {
        self.compact();
        for t in self.tiles.values() {
            self.backend
                .write(t.index, &encode_tile(t.index, &t.points, t.colors.as_deref())?)?;
        }
        Ok(self.tiles.len())
    }
}
