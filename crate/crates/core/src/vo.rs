//! Windowed visual odometry over normalized-plane feature tracks.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{Vector2, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::geom::Pose;
use crate::nlls::{FnCost, Loss, ParamValue, Problem, SolverConfig};
use crate::scenario::SyntheticWorld;
use crate::{Error, Result};

pub type FrameId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: FrameId,
    pub u: f64,
    pub v: f64,
}

impl Observation {
    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub id: u64,
    /// Sorted by frame; the first observation is the anchor.
    pub observations: Vec<Observation>,
    /// Depth along the anchor ray (z in the anchor camera), once triangulated.
    pub depth: Option<f64>,
}

impl FeatureTrack {
    pub fn anchor(&self) -> Option<&Observation> {
        self.observations.first()
    }

    pub fn observation(&self, frame: FrameId) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Keeps only observations of frames for which `keep` is true.
    pub fn restricted(&self, keep: impl Fn(FrameId) -> bool) -> FeatureTrack {
        let observations: Vec<Observation> = self.observations.iter().copied().filter(|o| keep(o.frame)).collect();
        let same_anchor = observations.first().map(|o| o.frame) == self.anchor().map(|o| o.frame);
        FeatureTrack {
            id: self.id,
            observations,
            depth: if same_anchor { self.depth } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoWindow {
    /// Frame ids with camera-to-world poses, in increasing id order.
    pub frames: Vec<(FrameId, Pose)>,
    pub tracks: Vec<FeatureTrack>,
    pub anchor: FrameId,
}

impl VoWindow {
    pub fn pose(&self, frame: FrameId) -> Option<&Pose> {
        self.frames
            .binary_search_by_key(&frame, |f| f.0)
            .ok()
            .map(|i| &self.frames[i].1)
    }

    /// Mean Euclidean reprojection error (normalized units) over every
    /// non-anchor observation of triangulated tracks.
    pub fn mean_reprojection_error(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in &self.tracks {
            let (Some(depth), Some(a)) = (t.depth, t.anchor()) else {
                continue;
            };
            let Some(ti) = self.pose(a.frame) else {
                continue;
            };
            for o in t.observations.iter().skip(1) {
                let Some(tj) = self.pose(o.frame) else {
                    continue;
                };
                sum += visual_residual(&a.point(), &o.point(), depth, ti, tj)?.norm();
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoConfig {
    pub window_size: usize,
    pub huber_scale: f64,
    pub min_parallax_deg: f64,
    pub min_tracks: usize,
    pub max_iterations: usize,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            window_size: 8,
            huber_scale: 0.005,
            min_parallax_deg: 0.5,
            min_tracks: 8,
            max_iterations: 100,
        }
    }
}

/// Point observed at `p_ci` with depth `lambda` in frame `i`, expressed in
/// frame `j`.
pub fn reproject(p_ci: &Vector2<f64>, lambda: f64, t_wci: &Pose, t_wcj: &Pose) -> Result<Vector3<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::domain("depth must be positive"));
    }
    let p_i = Vector3::new(p_ci.x, p_ci.y, 1.0) * lambda;
    Ok(t_wcj.inverse().transform_point(&t_wci.transform_point(&p_i)))
}

pub fn visual_residual(
    p_ci: &Vector2<f64>,
    p_cj: &Vector2<f64>,
    lambda: f64,
    t_wci: &Pose,
    t_wcj: &Pose,
) -> Result<Vector2<f64>> {
    let p = reproject(p_ci, lambda, t_wci, t_wcj)?;
    if p.z.abs() < 1e-9 {
        return Err(Error::Cheirality("point on the camera plane".into()));
    }
    Ok(Vector2::new(p.x / p.z - p_cj.x, p.y / p.z - p_cj.y))
}

/// Depth of the point in frame `i` from two normalized observations, by the
/// least-squares closest approach of the two rays.
pub fn triangulate(
    obs_i: &Vector2<f64>,
    obs_j: &Vector2<f64>,
    t_wci: &Pose,
    t_wcj: &Pose,
    min_parallax_deg: f64,
) -> Result<f64> {
    let baseline = t_wcj.translation - t_wci.translation;
    let di = t_wci.rotate(&Vector3::new(obs_i.x, obs_i.y, 1.0));
    let dj = t_wcj.rotate(&Vector3::new(obs_j.x, obs_j.y, 1.0));
    let parallax = di.normalize().dot(&dj.normalize()).clamp(-1.0, 1.0).acos().to_degrees();
    if baseline.norm() <= 1e-6 || parallax < min_parallax_deg {
        return Err(Error::LowParallax {
            angle_deg: parallax,
            min_deg: min_parallax_deg,
        });
    }
    // Minimize |ci + a di - cj - b dj|² over (a, b).
    let a11 = di.dot(&di);
    let a12 = -di.dot(&dj);
    let a22 = dj.dot(&dj);
    let b1 = di.dot(&baseline);
    let b2 = -dj.dot(&baseline);
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-15 * a11 * a22 {
        return Err(Error::LowParallax {
            angle_deg: parallax,
            min_deg: min_parallax_deg,
        });
    }
    let a = (b1 * a22 - a12 * b2) / det;
    let b = (a11 * b2 - a12 * b1) / det;
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Cheirality("triangulated point behind a camera".into()));
    }
    Ok(a)
}

/// Triangulates every track of the window that lacks a depth, using the
/// anchor and the observation with the widest baseline.
pub fn triangulate_window(window: &mut VoWindow, min_parallax_deg: f64) -> usize {
    let mut count = 0;
    let poses: BTreeMap<FrameId, Pose> = window.frames.iter().copied().collect();
    for t in &mut window.tracks {
        if t.depth.is_some() {
            continue;
        }
        let Some(a) = t.anchor().copied() else {
            continue;
        };
        let Some(pa) = poses.get(&a.frame) else {
            continue;
        };
        let best = t
            .observations
            .iter()
            .skip(1)
            .filter_map(|o| poses.get(&o.frame).map(|p| (o, p)))
            .max_by(|x, y| {
                let dx = (x.1.translation - pa.translation).norm();
                let dy = (y.1.translation - pa.translation).norm();
                dx.total_cmp(&dy).then(y.0.frame.cmp(&x.0.frame))
            });
        if let Some((o, p)) = best {
            if let Ok(d) = triangulate(&a.point(), &o.point(), pa, p, min_parallax_deg) {
                t.depth = Some(d);
                count += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub initial_mean_error: f64,
    pub final_mean_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Bundle adjustment of the window: all poses but the anchor and all track
/// depths but one (the monocular scale gauge) are optimized.
pub fn solve_window_ba(window: &VoWindow, config: &VoConfig) -> Result<(VoWindow, BaReport)> {
    if window.frames.len() < 2 {
        return Err(Error::UnderConstrained("window needs at least two frames".into()));
    }
    if window.pose(window.anchor).is_none() {
        return Err(Error::Contract("anchor frame is not in the window".into()));
    }
    let usable: Vec<usize> = window
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            t.depth.is_some_and(|d| d > 0.0)
                && t.anchor().is_some_and(|a| window.pose(a.frame).is_some())
                && t.observations.iter().skip(1).any(|o| window.pose(o.frame).is_some())
        })
        .map(|(i, _)| i)
        .collect();
    if usable.len() < config.min_tracks {
        return Err(Error::UnderConstrained(alloc::format!(
            "{} usable tracks, need {}",
            usable.len(),
            config.min_tracks
        )));
    }
    let initial_mean_error = window.mean_reprojection_error()?;

    let mut problem = Problem::new();
    let mut frame_block = BTreeMap::new();
    for (id, pose) in &window.frames {
        let b = problem.add_parameter(ParamValue::Pose(*pose));
        if *id == window.anchor {
            problem.set_frozen(b, true);
        }
        frame_block.insert(*id, b);
    }
    // Scale gauge: the longest usable track keeps its depth.
    let gauge = *usable
        .iter()
        .max_by_key(|&&i| (window.tracks[i].observations.len(), core::cmp::Reverse(i)))
        .unwrap();
    let mut depth_block = BTreeMap::new();
    for &ti in &usable {
        let t = &window.tracks[ti];
        let b = problem.add_parameter(ParamValue::Scale(t.depth.unwrap()));
        if ti == gauge {
            problem.set_frozen(b, true);
        }
        depth_block.insert(ti, b);
        let a = *t.anchor().unwrap();
        let bi = frame_block[&a.frame];
        for o in t.observations.iter().skip(1) {
            let Some(&bj) = frame_block.get(&o.frame) else {
                continue;
            };
            let (pi, pj) = (a.point(), o.point());
            problem.add_residual_weighted(
                FnCost::new(2, move |v: &[ParamValue], r: &mut [f64]| {
                    let e = visual_residual(&pi, &pj, v[2].scalar(), v[0].pose(), v[1].pose())?;
                    r[0] = e.x;
                    r[1] = e.y;
                    Ok(())
                }),
                &[bi, bj, b],
                &[1.0, 1.0],
                Loss::HuberScaled(config.huber_scale),
            )?;
        }
    }
    let solver = SolverConfig {
        max_iterations: config.max_iterations,
        ..SolverConfig::default()
    };
    let summary = problem.solve(&solver)?;

    let mut out = window.clone();
    for (id, pose) in &mut out.frames {
        *pose = *problem.parameter(frame_block[id]).pose();
    }
    for (ti, b) in depth_block {
        out.tracks[ti].depth = Some(problem.parameter(b).scalar());
    }
    let final_mean_error = out.mean_reprojection_error()?;
    Ok((
        out,
        BaReport {
            initial_mean_error,
            final_mean_error,
            iterations: summary.iterations,
            converged: summary.converged,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackNoise {
    /// Standard deviation of observation noise in normalized-plane units.
    pub pixel_sigma: f64,
    pub seed: u64,
}

/// Projects world landmarks into each camera pose (camera-to-world) and
/// links the observations of each landmark into a track.
pub fn generate_tracks(
    world: &SyntheticWorld,
    trajectory: &[(FrameId, Pose)],
    camera: &PinholeCamera,
    noise: &TrackNoise,
) -> Vec<FeatureTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.pixel_sigma.max(0.0)).unwrap();
    let mut tracks: BTreeMap<u64, FeatureTrack> = BTreeMap::new();
    for (frame, pose) in trajectory {
        let inv = pose.inverse();
        for lm in &world.landmarks {
            let pc = inv.transform_point(&lm.position);
            let Some(px) = camera.project(&pc) else {
                continue;
            };
            if !camera.in_image(&px) {
                continue;
            }
            let (mut u, mut v) = (pc.x / pc.z, pc.y / pc.z);
            if noise.pixel_sigma > 0.0 {
                u += normal.sample(&mut rng);
                v += normal.sample(&mut rng);
            }
            tracks
                .entry(lm.id)
                .or_insert_with(|| FeatureTrack {
                    id: lm.id,
                    observations: Vec::new(),
                    depth: None,
                })
                .observations
                .push(Observation { frame: *frame, u, v });
        }
    }
    tracks.into_values().collect()
}
