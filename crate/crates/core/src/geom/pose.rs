use core::ops::Mul;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;

/// Rigid transform: unit quaternion rotation plus translation in metres.
///
/// A pose maps points from its own frame into its parent frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Relative pose `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Manifold retraction: rotation is left-perturbed by `exp(delta[0..3])`,
    /// translation is shifted by `delta[3..6]`.
    pub fn boxplus(&self, delta: &Vector6<f64>) -> Pose {
        let dr = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(quat_exp(&dr) * self.rotation, self.translation + dt)
    }

    /// Spherical-linear rotation and linear translation blend, `alpha ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Pose, alpha: f64) -> Pose {
        let rel = quat_log(&(self.rotation.inverse() * other.rotation));
        Pose::new(
            self.rotation * quat_exp(&(rel * alpha)),
            self.translation + (other.translation - self.translation) * alpha,
        )
    }

    /// Rotation angle (radians) between the two orientations.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        quat_boxminus(&self.rotation, &other.rotation).norm()
    }

    pub fn is_finite(&self) -> bool {
        let q = self.rotation.quaternion();
        q.coords.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(*q.quaternion())
}

/// Exponential map from a rotation vector (axis times angle) to a unit quaternion.
pub fn quat_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = v.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < 1e-8 {
        // Taylor terms of cos(θ/2) and sin(θ/2)/θ.
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * v.x, k * v.y, k * v.z))
}

/// Logarithm map on the shorter arc: the returned angle lies in `[0, π]`.
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, xyz) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = xyz.norm();
    if n < f64::MIN_POSITIVE {
        return Vector3::zeros();
    }
    let angle = 2.0 * n.atan2(w);
    xyz * (angle / n)
}

/// Rotation vector of `a ⊗ b⁻¹`.
pub fn quat_boxminus(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Vector3<f64> {
    let a = renormalize(*a);
    let b = renormalize(*b);
    quat_log(&(a * b.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn rot_z(a: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a)
    }

    #[test]
    fn boxminus_identity_case() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        assert_eq!(quat_boxminus(&q, &q), Vector3::zeros());
    }

    #[test]
    fn boxminus_of_z_rotation() {
        // Oracle: axis-angle construction, axis z and angle 0.1.
        let v = quat_boxminus(&rot_z(0.1), &UnitQuaternion::identity());
        assert!((v - Vector3::new(0.0, 0.0, 0.1)).norm() < 1e-10);
    }

    #[test]
    fn boxminus_takes_shorter_arc() {
        let v = quat_boxminus(&rot_z(PI + 0.2), &UnitQuaternion::identity());
        assert!((v - Vector3::new(0.0, 0.0, -(PI - 0.2))).norm() < 1e-12);
        let v = quat_boxminus(&rot_z(PI), &UnitQuaternion::identity());
        assert!((v.norm() - PI).abs() < 1e-12);
    }

    #[test]
    fn log_is_accurate_for_tiny_angles() {
        let d = Vector3::new(3e-9, -1e-9, 2e-9);
        assert!((quat_log(&quat_exp(&d)) - d).norm() < 1e-20);
    }

    #[test]
    fn homogeneous_matches_transform() {
        let p = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(1.0, -2.0, 3.0),
        );
        let x = Vector3::new(0.5, 0.25, -4.0);
        let h = p.to_homogeneous() * x.push(1.0);
        assert!((h.xyz() - p.transform_point(&x)).norm() < 1e-12);
    }

    fn arb_rotvec(max: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-max..max, -max..max, -max..max).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_rotvec(3.0), arb_rotvec(100.0)).prop_map(|(r, t)| Pose::new(quat_exp(&r), t))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!(id.rotation.angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!((p.compose(&p).rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn boxminus_recovers_small_perturbation(d in arb_rotvec(0.3), b in arb_rotvec(3.0)) {
            // Oracle: compose then log.
            let qb = quat_exp(&b);
            let qa = quat_exp(&d) * qb;
            prop_assert!((quat_boxminus(&qa, &qb) - d).norm() < 1e-9);
        }

        #[test]
        fn boxplus_then_boxminus(p in arb_pose(), d in arb_rotvec(0.5)) {
            let delta = Vector6::new(d.x, d.y, d.z, 1.0, 2.0, 3.0);
            let q = p.boxplus(&delta);
            prop_assert!((quat_boxminus(&q.rotation, &p.rotation) - d).norm() < 1e-9);
            prop_assert!((q.translation - p.translation - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
        }
    }
}
