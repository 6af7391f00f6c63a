//! Pinhole camera without distortion.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for PinholeCamera {
    fn default() -> Self {
        Self::new(640, 480, 500.0, 500.0, 320.0, 240.0)
    }
}

impl PinholeCamera {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("camera intrinsics must be positive and finite".into()))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn pixel_to_normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn normalized_to_pixel(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(n.x * self.fx + self.cx, n.y * self.fy + self.cy)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 1e-12 {
            return None;
        }
        Some(self.normalized_to_pixel(&Vector2::new(p.x / p.z, p.y / p.z)))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Ray through a pixel with unit z component.
    pub fn ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let n = self.pixel_to_normalized(px);
        Vector3::new(n.x, n.y, 1.0)
    }

    /// Horizontal extent of the normalized image plane, `width / fx`.
    pub fn normalized_width(&self) -> f64 {
        self.width as f64 / self.fx
    }

    pub fn normalized_height(&self) -> f64 {
        self.height as f64 / self.fy
    }
}

/// Orientation of a downward-looking camera in an East-North-Up frame:
/// image x to the east, image y to the south, optical axis down. `yaw`
/// rotates the camera about the vertical.
pub fn nadir_rotation(yaw: f64) -> UnitQuaternion<f64> {
    let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    yaw * UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(base))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip() {
        let c = PinholeCamera::default();
        let px = Vector2::new(12.5, 300.25);
        assert!((c.normalized_to_pixel(&c.pixel_to_normalized(&px)) - px).norm() < 1e-12);
        assert_eq!(
            c.project(&Vector3::new(0.0, 0.0, 4.0)).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert!(c.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn nadir_axes() {
        let r = nadir_rotation(0.0);
        assert!((r * Vector3::z() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((r * Vector3::x() - Vector3::x()).norm() < 1e-15);
        assert!((r * Vector3::y() + Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(PinholeCamera::new(0, 10, 1.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(PinholeCamera::new(10, 10, -1.0, 1.0, 0.0, 0.0).validate().is_err());
    }
}
