//! Evaluation: absolute trajectory error with optional alignment, and the
//! point-to-plane accuracy CDF of a cloud against a reference.

use alloc::vec::Vec;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    Rigid,
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub ate_rmse: f64,
    pub per_frame: Vec<f64>,
    /// Applied to the estimate: `s R p + t`.
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

/// Umeyama: the `s, R, t` minimizing `Σ ‖y − (s R x + t)‖²`.
pub fn umeyama(
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(UnitQuaternion<f64>, Vector3<f64>, f64)> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Contract(
            "alignment needs equally many points, at least one".into(),
        ));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / nf;
    let my = y.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let s = if with_scale && var_x > 0.0 {
        (svd.singular_values.component_mul(&d.diagonal())).sum() / var_x
    } else {
        1.0
    };
    let rot = UnitQuaternion::from_matrix(&r);
    let t = my - rot * mx * s;
    Ok((rot, t, s))
}

/// Pairs estimate and truth by timestamp (within 1 µs) and reports RMSE of
/// translation differences after the requested alignment.
pub fn trajectory_error(
    estimate: &[(f64, Vector3<f64>)],
    truth: &[(f64, Vector3<f64>)],
    alignment: Alignment,
) -> Result<TrajectoryError> {
    if estimate.len() != truth.len() {
        return Err(Error::Contract(alloc::format!(
            "cannot pair {} estimates with {} truth samples",
            estimate.len(),
            truth.len()
        )));
    }
    if let Some((i, _)) = estimate
        .iter()
        .zip(truth)
        .enumerate()
        .find(|(_, (e, t))| (e.0 - t.0).abs() > 1e-6)
    {
        return Err(Error::Contract(alloc::format!(
            "timestamp mismatch at {}: {} vs {}",
            i,
            estimate[i].0,
            truth[i].0
        )));
    }
    let x: Vec<_> = estimate.iter().map(|e| e.1).collect();
    let y: Vec<_> = truth.iter().map(|e| e.1).collect();
    let (rotation, translation, scale) = match alignment {
        Alignment::None => (UnitQuaternion::identity(), Vector3::zeros(), 1.0),
        Alignment::Rigid => umeyama(&x, &y, false)?,
        Alignment::Similarity => umeyama(&x, &y, true)?,
    };
    let per_frame: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (rotation * a * scale + translation - b).norm())
        .collect();
    let ate_rmse = if per_frame.is_empty() {
        0.0
    } else {
        (per_frame.iter().map(|e| e * e).sum::<f64>() / per_frame.len() as f64).sqrt()
    };
    Ok(TrajectoryError {
        ate_rmse,
        per_frame,
        rotation,
        translation,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCdf {
    /// Sorted unsigned distances, metres.
    pub distances: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Fraction of distances `<=` each threshold.
    pub fractions: Vec<f64>,
    /// Queries whose neighbourhood was collinear and fell back to the
    /// nearest-point distance.
    pub fallbacks: usize,
}

impl AccuracyCdf {
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        if self.distances.is_empty() {
            return 1.0;
        }
        let n = self.distances.partition_point(|d| *d <= threshold);
        n as f64 / self.distances.len() as f64
    }

    pub fn median(&self) -> Option<f64> {
        (!self.distances.is_empty()).then(|| self.distances[self.distances.len() / 2])
    }

    pub fn mean(&self) -> f64 {
        if self.distances.is_empty() {
            0.0
        } else {
            self.distances.iter().sum::<f64>() / self.distances.len() as f64
        }
    }
}

/// Least-squares plane of a neighbourhood as `(centroid, unit normal)`;
/// `None` when the points are (nearly) collinear.
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let (mid, big) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    if !(big > 0.0) || mid <= 1e-12 * big {
        return None;
    }
    Some((c, eig.eigenvectors.column(idx[0]).normalize()))
}

pub fn cloud_accuracy(
    query: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    k: usize,
    thresholds: &[f64],
) -> Result<AccuracyCdf> {
    if k < 3 {
        return Err(Error::domain("plane fitting needs k >= 3"));
    }
    if reference.len() < k {
        return Err(Error::domain("reference has fewer than k points"));
    }
    let tree = KdTree::new(reference.iter().map(|p| [p.x, p.y, p.z]).collect());
    let mut fallbacks = 0;
    let mut distances: Vec<f64> = query
        .iter()
        .map(|q| {
            let nn = tree.nearest(&[q.x, q.y, q.z], k);
            let hood: Vec<_> = nn.iter().map(|n| reference[n.index]).collect();
            match fit_plane(&hood) {
                Some((c, n)) => (q - c).dot(&n).abs(),
                None => {
                    fallbacks += 1;
                    nn[0].distance_squared.sqrt()
                }
            }
        })
        .collect();
    distances.sort_unstable_by(f64::total_cmp);
    let mut cdf = AccuracyCdf {
        distances,
        thresholds: thresholds.to_vec(),
        fractions: Vec::new(),
        fallbacks,
    };
    cdf.fractions = thresholds.iter().map(|t| cdf.fraction_below(*t)).collect();
    Ok(cdf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_exp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn traj(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, Vector3<f64>)> {
        (0..n)
            .map(|i| {
                (
                    i as f64,
                    Vector3::new(
                        i as f64 * 3.0,
                        rng.random_range(-20.0..20.0),
                        100.0 + rng.random_range(-2.0..2.0),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn ate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = traj(&mut rng, 50);
        assert_eq!(trajectory_error(&t, &t, Alignment::None).unwrap().ate_rmse, 0.0);
        let shifted: Vec<_> = t.iter().map(|(s, p)| (*s, p + Vector3::new(4.0, -2.0, 7.0))).collect();
        assert!(trajectory_error(&shifted, &t, Alignment::Rigid).unwrap().ate_rmse < 1e-9);
        let moved: Vec<_> = t
            .iter()
            .map(|(s, p)| {
                (
                    *s,
                    quat_exp(&Vector3::new(0.1, 0.2, 0.3)) * p * 0.4 + Vector3::new(1.0, 2.0, 3.0),
                )
            })
            .collect();
        let e = trajectory_error(&moved, &t, Alignment::Similarity).unwrap();
        assert!(e.ate_rmse < 1e-9 && (e.scale - 2.5).abs() < 1e-9);
        assert!(trajectory_error(&t[..3], &t, Alignment::None).is_err());
        let mut off = t.clone();
        off[4].0 += 0.5;
        assert!(trajectory_error(&off, &t, Alignment::None).is_err());
    }

    #[test]
    fn ate_of_isotropic_noise() {
        let sigma = 0.3;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = traj(&mut rng, 400);
            let n = Normal::new(0.0, sigma).unwrap();
            let noisy: Vec<_> = t
                .iter()
                .map(|(s, p)| {
                    (
                        *s,
                        p + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)),
                    )
                })
                .collect();
            let e = trajectory_error(&noisy, &t, Alignment::None).unwrap().ate_rmse;
            let expect = sigma * 3f64.sqrt();
            assert!(e >= 0.8 * expect && e <= 1.2 * expect, "{}", e);
        }
    }

    fn grid(z: f64) -> Vec<Vector3<f64>> {
        (0..30)
            .flat_map(|i| (0..30).map(move |j| Vector3::new(i as f64 * 0.5, j as f64 * 0.5, z)))
            .collect()
    }

    #[test]
    fn accuracy_examples() {
        let g = grid(0.0);
        let c = cloud_accuracy(&g, &g, 8, &[1e-12, 0.1]).unwrap();
        assert_eq!(c.fractions, [1.0, 1.0]);
        let up = grid(0.5);
        let c = cloud_accuracy(&up, &g, 8, &[0.49, 0.51]).unwrap();
        assert!(c.distances.iter().all(|d| (d - 0.5).abs() < 1e-9));
        assert_eq!(c.fractions, [0.0, 1.0]);
        assert!(cloud_accuracy(&up, &g[..5], 8, &[]).is_err());
        assert!(cloud_accuracy(&up, &g, 2, &[]).is_err());
    }

    #[test]
    fn sloped_plane_offset() {
        let r = quat_exp(&Vector3::new(0.3, -0.2, 0.7));
        let n = r * Vector3::z();
        let reference: Vec<_> = grid(0.0).iter().map(|p| r * p + Vector3::new(5.0, 1.0, -2.0)).collect();
        let query: Vec<_> = reference.iter().map(|p| p + n * 0.37).collect();
        let c = cloud_accuracy(&query, &reference, 8, &[0.3, 0.4]).unwrap();
        assert!(c.distances.iter().all(|d| (d - 0.37).abs() < 1e-6));
    }

    #[test]
    fn collinear_neighbourhoods_fall_back() {
        let line: Vec<_> = (0..20).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = cloud_accuracy(&[Vector3::new(3.0, 2.0, 0.0)], &line, 8, &[2.0]).unwrap();
        assert_eq!(c.fallbacks, 1);
        assert!((c.distances[0] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cdf_is_rigid_invariant_and_monotone(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference: Vec<_> = (0..400)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
                    Vector3::new(x, y, (x * 0.3).sin() + 0.1 * y)
                })
                .collect();
            let query: Vec<_> = reference.iter().take(150).map(|p| p + Vector3::new(0.0, 0.0, rng.random_range(-0.5..0.5))).collect();
            let th = [0.05, 0.1, 0.2, 0.4, f64::INFINITY];
            let a = cloud_accuracy(&query, &reference, 8, &th).unwrap();
            let r = quat_exp(&Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let t = Vector3::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
            let tf = |v: &Vec<Vector3<f64>>| v.iter().map(|p| r * p + t).collect::<Vec<_>>();
            let b = cloud_accuracy(&tf(&query), &tf(&reference), 8, &th).unwrap();
            for (x, y) in a.distances.iter().zip(&b.distances) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!(a.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*a.fractions.last().unwrap(), 1.0);
        }
    }
}
