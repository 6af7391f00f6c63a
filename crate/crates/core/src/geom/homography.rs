use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

use crate::{Error, Result};

/// One `(R, T, n)` factorization of a normalized homography
/// `H = R + T nᵀ`, where `T = t / d` and `d` is the plane distance in the
/// first camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyCandidate {
    pub rotation: UnitQuaternion<f64>,
    /// Plane-distance-scaled translation `t / d`.
    pub translation: Vector3<f64>,
    /// Unit translation direction, or zero for a pure rotation.
    pub translation_direction: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Plane lies in front of both cameras (for all supplied points, or on
    /// the optical axis when none were supplied).
    pub cheirality: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyDecomposition {
    pub candidates: Vec<HomographyCandidate>,
    /// True for the zero-parallax case: one candidate with zero translation
    /// and an arbitrary normal.
    pub degenerate: bool,
    /// Signed factor the input was divided by so that its middle singular
    /// value is one.
    pub normalization: f64,
}

impl HomographyDecomposition {
    pub fn admissible(&self) -> impl Iterator<Item = &HomographyCandidate> {
        self.candidates.iter().filter(|c| c.cheirality)
    }
}

fn lift(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

fn rotation_from_orthonormal(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}

/// Analytic decomposition of a homography between normalized image planes
/// (`x2 ~ H x1`).
///
/// `points` are optional correspondences `(x1, x2)` used to fix the overall
/// sign of `H` and to evaluate cheirality. All four sign/branch candidates are
/// returned; the ones violating cheirality are flagged, not removed.
pub fn decompose_homography(
    h: &Matrix3<f64>,
    points: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<HomographyDecomposition> {
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::degenerate("homography has non-finite entries"));
    }
    let svd = h.svd(false, true);
    let s = svd.singular_values;
    if s[0] <= 0.0 || s[2] <= 1e-12 * s[0] {
        return Err(Error::degenerate("singular homography"));
    }
    let sign = if points.is_empty() {
        h.determinant().signum()
    } else {
        let score: f64 = points.iter().map(|(a, b)| lift(b).dot(&(h * lift(a)))).sum();
        if score < 0.0 {
            -1.0
        } else {
            1.0
        }
    };
    let scale = sign * s[1];
    let hn = h / scale;
    let (s1, s3) = (s[0] / s[1], s[2] / s[1]);

    let front = |n: &Vector3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>| -> bool {
        let rn = r * n;
        if 1.0 + rn.dot(t) <= 0.0 {
            return false;
        }
        if points.is_empty() {
            return n.z > 0.0;
        }
        points
            .iter()
            .all(|(a, b)| n.dot(&lift(a)) > 0.0 && rn.dot(&lift(b)) > 0.0)
    };

    if s1 - s3 < 1e-9 {
        // Zero parallax: H is a rotation up to numerical noise.
        let o = hn.svd(true, true);
        let (u, v_t) = (o.u.unwrap(), o.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * v_t;
        let candidate = HomographyCandidate {
            rotation: rotation_from_orthonormal(&r),
            translation: Vector3::zeros(),
            translation_direction: Vector3::zeros(),
            normal: Vector3::z(),
            cheirality: true,
        };
        return Ok(HomographyDecomposition {
            candidates: alloc::vec![candidate],
            degenerate: true,
            normalization: scale,
        });
    }

    let v = svd.v_t.unwrap().transpose();
    let (v1, v2, v3) = (
        v.column(0).into_owned(),
        v.column(1).into_owned(),
        v.column(2).into_owned(),
    );
    let a = (1.0 - s3 * s3).max(0.0).sqrt();
    let b = (s1 * s1 - 1.0).max(0.0).sqrt();
    let c = (s1 * s1 - s3 * s3).sqrt();
    let mut candidates = Vec::with_capacity(4);
    for u in [(v1 * a + v3 * b) / c, (v1 * a - v3 * b) / c] {
        let hv2 = hn * v2;
        let hu = hn * u;
        let uu = Matrix3::from_columns(&[v2, u, v2.cross(&u)]);
        let ww = Matrix3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = ww * uu.transpose();
        let n = v2.cross(&u).normalize();
        let t = (hn - r) * n;
        for sgn in [1.0, -1.0] {
            let (n, t) = (n * sgn, t * sgn);
            let norm = t.norm();
            let dir = if norm > 0.0 { t / norm } else { Vector3::zeros() };
            candidates.push(HomographyCandidate {
                rotation: rotation_from_orthonormal(&r),
                translation: t,
                translation_direction: dir,
                normal: n,
                cheirality: front(&n, &r, &t),
            });
        }
    }
    Ok(HomographyDecomposition {
        candidates,
        degenerate: false,
        normalization: scale,
    })
}
