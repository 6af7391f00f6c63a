//! Central-node cloud fusion: the cross-agent transform, planar tile
//! indexing, voxel downsampling, outlier removal and the tile store.

mod codec;
mod store;

pub use codec::{decode_tile, encode_tile, DecodedTile, TILE_HEADER_LEN, TILE_MAGIC, TILE_VERSION};
pub use store::{CloudTile, InsertReport, MemoryBackend, StoreConfig, TileBackend, TileStore, TileSummary};

use alloc::vec::Vec;

use hashbrown::HashMap;
use nalgebra::Vector3;
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rustc_hash::FxBuildHasher;

use crate::geom::Pose;
use crate::kdtree::KdTree;
use crate::{Error, Result};

pub type TileIndex = (i64, i64);
pub type VoxelKey = [i64; 3];

/// Floor division of x and y by the tile width. Points on a boundary belong
/// to the upper tile. `None` for non-finite coordinates.
pub fn tile_index(p: &Vector3<f64>, d_c: f64) -> Option<TileIndex> {
    if !(p.x.is_finite() && p.y.is_finite()) {
        return None;
    }
    Some(((p.x / d_c).floor() as i64, (p.y / d_c).floor() as i64))
}

pub fn voxel_key(p: &Vector3<f64>, v: f64) -> Option<VoxelKey> {
    if !p.iter().all(|c| c.is_finite()) {
        return None;
    }
    Some([
        (p.x / v).floor() as i64,
        (p.y / v).floor() as i64,
        (p.z / v).floor() as i64,
    ])
}

/// `p^0 = T⁻¹ p^k` for every point.
pub fn transform_to_central(points: &[Vector3<f64>], t_k: &Pose) -> Vec<Vector3<f64>> {
    let inv = t_k.inverse();
    points.iter().map(|p| inv.transform_point(p)).collect()
}

/// Running mean of a voxel's points. Coordinates on which every point agrees
/// come back bit-exact.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Centroid {
    sum: Vector3<f64>,
    min: Vector3<f64>,
    max: Vector3<f64>,
    count: u32,
}

impl Centroid {
    pub(crate) fn new(p: &Vector3<f64>) -> Self {
        Self {
            sum: *p,
            min: *p,
            max: *p,
            count: 1,
        }
    }

    pub(crate) fn add(&mut self, p: &Vector3<f64>) {
        self.sum += p;
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
        self.count += 1;
    }

    pub(crate) fn count(&self) -> u32 {
        self.count
    }

    /// `sum` may be replaced by an order-independent total.
    pub(crate) fn mean_with(&self, sum: &Vector3<f64>) -> Vector3<f64> {
        let n = self.count as f64;
        Vector3::from_fn(|k, _| {
            if self.min[k] == self.max[k] {
                self.min[k]
            } else {
                (sum[k] / n).clamp(self.min[k], self.max[k])
            }
        })
    }

    pub(crate) fn mean(&self) -> Vector3<f64> {
        self.mean_with(&self.sum)
    }
}

/// One centroid per occupied voxel, ordered by voxel key. A centroid that
/// rounds across its voxel boundary is replaced by the voxel's first point.
pub fn voxel_downsample(points: &[Vector3<f64>], v: f64) -> Result<Vec<Vector3<f64>>> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::domain("voxel size must be positive"));
    }
    let mut acc: HashMap<VoxelKey, (Centroid, Vector3<f64>), FxBuildHasher> = HashMap::default();
    for p in points {
        let Some(k) = voxel_key(p, v) else { continue };
        acc.entry(k)
            .and_modify(|e| e.0.add(p))
            .or_insert((Centroid::new(p), *p));
    }
    let mut keyed: Vec<(VoxelKey, Vector3<f64>)> = acc
        .into_iter()
        .map(|(k, (c, first))| {
            let c = c.mean();
            (k, if voxel_key(&c, v) == Some(k) { c } else { first })
        })
        .collect();
    keyed.sort_unstable_by_key(|e| e.0);
    Ok(keyed.into_iter().map(|e| e.1).collect())
}

/// Keep-mask of statistical outlier removal: a point goes when its mean
/// distance to its `k` nearest neighbours exceeds `mean + std_mult · std`
/// of that statistic over the cloud. The limit never drops below twice the
/// mean, so the thinner neighbourhoods at the rim of a regular grid (about
/// 1.5 times the mean) survive.
pub fn outlier_mask(points: &[Vector3<f64>], k: usize, std_mult: f64) -> Vec<bool> {
    let n = points.len();
    if k == 0 || n < k + 1 {
        return alloc::vec![true; n];
    }
    let tree = KdTree::new(points.iter().map(|p| [p.x, p.y, p.z]).collect());
    let stat: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.nearest(&[p.x, p.y, p.z], k + 1);
            let d: f64 = nn
                .iter()
                .filter(|m| m.index != i)
                .take(k)
                .map(|m| m.distance_squared.sqrt())
                .sum();
            d / k as f64
        })
        .collect();
    let mean = stat.iter().sum::<f64>() / n as f64;
    let std = (stat.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64).sqrt();
    let limit = (mean + std_mult * std).max(2.0 * mean);
    stat.iter().map(|s| *s <= limit).collect()
}

pub fn filter_outliers(points: &[Vector3<f64>], k: usize, std_mult: f64) -> Vec<Vector3<f64>> {
    points
        .iter()
        .zip(outlier_mask(points, k, std_mult))
        .filter_map(|(p, keep)| keep.then_some(*p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tile_index_examples() {
        assert_eq!(tile_index(&Vector3::new(0.0, 0.0, 0.0), 10.0), Some((0, 0)));
        assert_eq!(tile_index(&Vector3::new(25.0, -3.0, 0.0), 10.0), Some((2, -1)));
        assert_eq!(tile_index(&Vector3::new(10.0, 10.0, 0.0), 10.0), Some((1, 1)));
        assert_eq!(tile_index(&Vector3::new(f64::NAN, 0.0, 0.0), 10.0), None);
        assert_eq!(tile_index(&Vector3::new(0.0, f64::INFINITY, 0.0), 10.0), None);
    }

    proptest! {
        #[test]
        fn tile_contains_its_points(x in -1e5..1e5f64, y in -1e5..1e5f64, d in 0.5..200.0f64) {
            let (ix, iy) = tile_index(&Vector3::new(x, y, 0.0), d).unwrap();
            prop_assert_eq!((x / d).floor() as i64, ix);
            prop_assert_eq!((y / d).floor() as i64, iy);
        }
    }

    #[test]
    fn transform_round_trip() {
        let pts = alloc::vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-4.0, 0.5, 9.0)];
        assert_eq!(transform_to_central(&pts, &Pose::identity()), pts);
        let t = Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.1, -0.2, 1.3),
            Vector3::new(30.0, -12.0, 4.0),
        );
        for (a, b) in transform_to_central(&pts, &t).iter().zip(&pts) {
            assert!((t.transform_point(a) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn downsample_examples() {
        let v = 0.25;
        let one_per: Vec<_> = (0..20).map(|i| Vector3::new(i as f64 * 0.25 + 0.1, 0.1, 0.1)).collect();
        assert_eq!(voxel_downsample(&one_per, v).unwrap(), one_per);
        let same = alloc::vec![Vector3::new(1.1, 2.2, 3.3); 7];
        assert_eq!(
            voxel_downsample(&same, v).unwrap(),
            alloc::vec![Vector3::new(1.1, 2.2, 3.3)]
        );
        assert!(voxel_downsample(&same, 0.0).is_err());
        for v in [0.25, 0.2] {
            let grid: Vec<_> = (0..100)
                .flat_map(|i| (0..100).map(move |j| Vector3::new(i as f64 * v / 2.0, j as f64 * v / 2.0, 0.0)))
                .collect();
            let mut keys: Vec<_> = grid.iter().map(|p| voxel_key(p, v).unwrap()).collect();
            keys.sort_unstable();
            keys.dedup();
            let out = voxel_downsample(&grid, v).unwrap();
            assert_eq!(out.len(), keys.len());
            if v == 0.25 {
                assert_eq!(out.len(), 50 * 50);
            }
        }
    }

    proptest! {
        #[test]
        fn downsample_leaves_one_point_per_voxel(seed in 0u64..10_000, v in 0.05..2.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..500)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
                .collect();
            let out = voxel_downsample(&pts, v).unwrap();
            let mut keys: Vec<_> = out.iter().map(|p| voxel_key(p, v).unwrap()).collect();
            let n = keys.len();
            keys.dedup();
            prop_assert_eq!(keys.len(), n);
            let mut input: Vec<_> = pts.iter().map(|p| voxel_key(p, v).unwrap()).collect();
            input.sort_unstable();
            input.dedup();
            prop_assert_eq!(keys, input);
        }
    }

    fn grid(n: usize, spacing: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| Vector3::new(i as f64 * spacing, j as f64 * spacing, 0.0)))
            .collect()
    }

    #[test]
    fn outlier_examples() {
        for n in [5, 15, 50] {
            let g = grid(n, 0.2);
            assert_eq!(filter_outliers(&g, 8, 3.0), g);
        }
        let g = grid(15, 0.5);
        let mut with = g.clone();
        with.push(Vector3::new(3.5, 3.5, 50.0));
        let kept = filter_outliers(&with, 8, 3.0);
        assert_eq!(kept, g);
        assert!(filter_outliers(&[], 8, 3.0).is_empty());
        let few = grid(2, 1.0);
        assert_eq!(filter_outliers(&few, 8, 0.0), few);
    }
}
