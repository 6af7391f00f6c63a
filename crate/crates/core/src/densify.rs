//! Per-agent densification: virtual stereo pairs from two moments of one
//! camera, a pluggable depth source, and back-projection into metric clouds.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::geom::{quat_exp, quat_log, Pose};
use crate::scenario::SyntheticWorld;
use crate::vo::FrameId;
use crate::{Error, Result};

/// Marker for pixels with no depth.
pub const INVALID_DEPTH: f64 = 0.0;

/// Two views rectified to a common orientation whose x axis runs along the
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualStereoPair {
    pub frames: (FrameId, FrameId),
    /// Maps camera-i coordinates into the rectified frame of view i.
    pub rect_i: UnitQuaternion<f64>,
    pub rect_j: UnitQuaternion<f64>,
    /// Signed x offset of view j's centre in the rectified frame.
    pub baseline: f64,
    pub camera: PinholeCamera,
    pub center_i: Vector3<f64>,
    pub center_j: Vector3<f64>,
}

impl VirtualStereoPair {
    /// Orientation shared by both rectified views.
    pub fn rectified_rotation(&self, pose_i: &Pose) -> UnitQuaternion<f64> {
        pose_i.rotation * self.rect_i.inverse()
    }

    pub fn rectified_pose_i(&self, pose_i: &Pose) -> Pose {
        Pose::new(self.rectified_rotation(pose_i), self.center_i)
    }

    pub fn rectified_pose_j(&self, pose_j: &Pose) -> Pose {
        Pose::new(pose_j.rotation * self.rect_j.inverse(), self.center_j)
    }
}

/// Splits the relative rotation evenly between the views, then turns both
/// about their common mean orientation so that x follows the baseline.
pub fn build_virtual_stereo(
    frames: (FrameId, FrameId),
    pose_i: &Pose,
    pose_j: &Pose,
    camera: &PinholeCamera,
    min_baseline: f64,
) -> Result<VirtualStereoPair> {
    let b = pose_j.translation - pose_i.translation;
    let len = b.norm();
    if !(len > min_baseline.max(0.0)) || len == 0.0 {
        return Err(Error::degenerate("virtual stereo baseline below minimum"));
    }
    let half = quat_exp(&(quat_log(&(pose_i.rotation.inverse() * pose_j.rotation)) * 0.5));
    let mean = pose_i.rotation * half;
    let e = mean.inverse() * (b / len);
    let horizontal = (e.x * e.x + e.y * e.y).sqrt();
    if horizontal < 1e-6 {
        return Err(Error::degenerate("baseline runs along the optical axis"));
    }
    // Keep the rectified x axis on the same side as the mean x axis.
    let e1 = if e.x < 0.0 { -e } else { e };
    let e2 = Vector3::new(-e1.y, e1.x, 0.0) / horizontal;
    let e3 = e1.cross(&e2);
    let align = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
        e1.transpose(),
        e2.transpose(),
        e3.transpose(),
    ])));
    let common = align * mean.inverse();
    Ok(VirtualStereoPair {
        frames,
        rect_i: common * pose_i.rotation,
        rect_j: common * pose_j.rotation,
        baseline: (common * b).x,
        camera: *camera,
        center_i: pose_i.translation,
        center_j: pose_j.translation,
    })
}

/// Pairs each frame with the next later frame whose baseline lies in
/// `[lo, hi] · altitude`.
pub fn select_stereo_pairs(poses: &[(FrameId, Pose)], altitude: f64, lo: f64, hi: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..poses.len() {
        let next = (i + 1..poses.len()).find(|&j| {
            let d = (poses[j].1.translation - poses[i].1.translation).norm();
            d >= lo * altitude && d <= hi * altitude
        });
        if let Some(j) = next {
            out.push((i, j));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub frame: FrameId,
    pub width: u32,
    pub height: u32,
    pub camera: PinholeCamera,
    /// Row-major depth along the optical axis; [`INVALID_DEPTH`] where unknown.
    pub depths: Vec<f64>,
}

impl DepthMap {
    pub fn new(frame: FrameId, camera: &PinholeCamera) -> Self {
        Self {
            frame,
            width: camera.width,
            height: camera.height,
            camera: *camera,
            depths: alloc::vec![INVALID_DEPTH; camera.width as usize * camera.height as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.depths[(v * self.width + u) as usize];
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, u: u32, v: u32, depth: f64) {
        self.depths[(v * self.width + u) as usize] = depth;
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| **d > 0.0).count()
    }

    /// Plain-text PGM (`P2`) with depths in millimetres, clamped to 16 bits.
    pub fn to_pgm_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "P2\n# frame {}\n{} {}\n65535", self.frame, self.width, self.height);
        for row in self.depths.chunks(self.width as usize) {
            let line: Vec<String> = row
                .iter()
                .map(|d| alloc::format!("{}", (d * 1000.0).round().clamp(0.0, 65535.0) as u32))
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Source of per-frame depth. The synthetic provider ray-casts the scenario
/// world; a stereo matcher would consume the rectified pair instead.
pub trait DepthProvider {
    fn depth(&self, pair: &VirtualStereoPair, pose_i: &Pose, camera: &PinholeCamera) -> Result<DepthMap>;
}

pub struct SyntheticDepth<'a> {
    pub world: &'a SyntheticWorld,
    /// Pose of the frame the depths are expressed for, in world coordinates,
    /// given the pose handed to the provider.
    pub to_world: Pose,
}

impl<'a> SyntheticDepth<'a> {
    pub fn new(world: &'a SyntheticWorld) -> Self {
        Self {
            world,
            to_world: Pose::identity(),
        }
    }
}

impl DepthProvider for SyntheticDepth<'_> {
    fn depth(&self, pair: &VirtualStereoPair, pose_i: &Pose, camera: &PinholeCamera) -> Result<DepthMap> {
        Ok(synthetic_depth(
            pair.frames.0,
            &self.to_world.compose(pose_i),
            camera,
            self.world,
        ))
    }
}

/// Exact depth for every pixel whose ray meets the terrain inside the world.
pub fn synthetic_depth(frame: FrameId, pose: &Pose, camera: &PinholeCamera, world: &SyntheticWorld) -> DepthMap {
    let mut map = DepthMap::new(frame, camera);
    for v in 0..camera.height {
        for u in 0..camera.width {
            let ray = pose.rotation * camera.ray(&Vector2::new(u as f64, v as f64));
            if let Some(t) = world.raycast(&pose.translation, &ray) {
                map.set(u, v, t);
            }
        }
    }
    map
}

/// Lifts every `stride`-th valid pixel and maps it through `pose`. The
/// sampled pixel sits in the middle of its `stride` cell, which keeps the
/// principal axis (and its exactly round ground points) off the lattice.
pub fn backproject(depth: &DepthMap, pose: &Pose, camera: &PinholeCamera, stride: u32) -> Vec<Vector3<f64>> {
    let stride = stride.max(1) as usize;
    let start = (stride / 2) as u32;
    let mut out = Vec::new();
    for v in (start..depth.height).step_by(stride) {
        for u in (start..depth.width).step_by(stride) {
            if let Some(d) = depth.get(u, v) {
                out.push(pose.transform_point(&(camera.ray(&Vector2::new(u as f64, v as f64)) * d)));
            }
        }
    }
    out
}
