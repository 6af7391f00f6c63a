//! Rigid transforms, quaternion helpers, WGS-84 geodesy and homography
//! decomposition.

mod geodesy;
mod homography;
mod pose;

pub use geodesy::{
    ecef_from_geodetic, enu_frame_rotation, enu_from_geodetic, enu_rotation, geodetic_from_ecef, geodetic_from_enu,
    geodetic_resolution, EnuPoint, GnssFix, WGS84_A, WGS84_B, WGS84_E2, WGS84_F,
};
pub use homography::{decompose_homography, HomographyCandidate, HomographyDecomposition};
pub use pose::{quat_boxminus, quat_exp, quat_log, Pose};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Rotation that best maps `from` directions onto `to` directions in the
/// weighted least-squares sense (Kabsch without translation).
///
/// Returns `None` when the cross-covariance has rank below two.
pub fn procrustes_rotation(
    pairs: impl IntoIterator<Item = (Vector3<f64>, Vector3<f64>, f64)>,
) -> Option<(UnitQuaternion<f64>, [f64; 3])> {
    let mut cov = Matrix3::<f64>::zeros();
    for (from, to, w) in pairs {
        cov += w * to * from.transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    if s[0] <= 0.0 || s[1] <= 1e-12 * s[0] {
        return None;
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    Some((rot, [s[0], s[1], s[2]]))
}
