//! Cross-agent relative pose refinement: overlap candidates from a KD-tree
//! over camera centres, RANSAC homographies between overlapping frames, and
//! the core-transform optimization that pulls every agent onto the central
//! agent.
//!
//! Homography observations are kept in camera terms: `R` and unit `t` with
//! `X2 = R X1 + t` between the two cameras. They are moved into the chain's
//! frame inside the residual, where the current poses are known.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::geom::{quat_boxminus, HomographyDecomposition, Pose};
use crate::kdtree::KdTree;
use crate::nlls::{FnCost, Loss, ParamValue, Problem, SolverConfig, SolverSummary};
use crate::vo::FrameId;
use crate::{Error, Result};

/// Centre separation at which two nadir footprints of width
/// `altitude · width / fx` overlap by exactly `overlap_threshold`.
pub fn desired_distance(overlap_threshold: f64, camera: &PinholeCamera, altitude: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&overlap_threshold) || overlap_threshold == 0.0 {
        return Err(Error::domain("overlap threshold must lie in (0, 1]"));
    }
    if !(altitude > 0.0) {
        return Err(Error::domain("altitude must be positive"));
    }
    Ok((1.0 - overlap_threshold) * altitude * camera.normalized_width())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub agents: (u32, u32),
    pub frames: (FrameId, FrameId),
    pub distance: f64,
    /// Predicted footprint overlap in `[0, 1]`.
    pub overlap: f64,
}

/// Area overlap of two axis-aligned footprints `(w, h)` offset by `d`.
pub fn predicted_overlap(d: &Vector3<f64>, footprint: (f64, f64)) -> f64 {
    let fx = (1.0 - d.x.abs() / footprint.0).max(0.0);
    let fy = (1.0 - d.y.abs() / footprint.1).max(0.0);
    fx * fy
}

/// Every `(i, j)` with camera centres closer than `desired`, found with a
/// KD-tree built over `traj_b`. Sorted by frame of `a`, then distance.
pub fn candidate_pairs(
    agents: (u32, u32),
    traj_a: &[(FrameId, Vector3<f64>)],
    traj_b: &[(FrameId, Vector3<f64>)],
    desired: f64,
    footprint: (f64, f64),
) -> Vec<CandidatePair> {
    let tree = KdTree::new(traj_b.iter().map(|p| [p.1.x, p.1.y, p.1.z]).collect());
    let mut out = Vec::new();
    for (fa, pa) in traj_a {
        for nb in tree.within(&[pa.x, pa.y, pa.z], desired) {
            let (fb, pb) = traj_b[nb.index];
            out.push(CandidatePair {
                agents,
                frames: (*fa, fb),
                distance: nb.distance_squared.sqrt(),
                overlap: predicted_overlap(&(pb - pa), footprint),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Transfer error threshold in normalized image units.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 0.002,
            confidence: 0.999,
            max_iterations: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyEstimate {
    /// Scaled so that `H[2][2] = 1`.
    pub h: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

/// Similarity that moves the centroid to the origin and the mean distance to
/// `√2`.
fn normalizer(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let c = points.clone().sum::<Vector2<f64>>() / n;
    let mean = points.map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 1e-15 {
        core::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    (q.z.abs() > 1e-15).then(|| Vector2::new(q.x / q.z, q.y / q.z))
}

/// Normalized direct linear transform over the selected matches.
fn dlt(matches: &[(Vector2<f64>, Vector2<f64>)], idx: &[usize]) -> Option<Matrix3<f64>> {
    let t1 = normalizer(idx.iter().map(|&i| matches[i].0));
    let t2 = normalizer(idx.iter().map(|&i| matches[i].1));
    let rows = (2 * idx.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, &i) in idx.iter().enumerate() {
        let p = t1 * Vector3::new(matches[i].0.x, matches[i].0.y, 1.0);
        let q = t2 * Vector3::new(matches[i].1.x, matches[i].1.y, 1.0);
        let (x, y, w) = (p.x, p.y, p.z);
        let (u, v, z) = (q.x, q.y, q.z);
        let r0 = [0.0, 0.0, 0.0, -z * x, -z * y, -z * w, v * x, v * y, v * w];
        let r1 = [z * x, z * y, z * w, 0.0, 0.0, 0.0, -u * x, -u * y, -u * w];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_i, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = v_t.row(min_i);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t2_inv = t2.try_inverse()?;
    let out = t2_inv * hn * t1;
    if !out.iter().all(|v| v.is_finite()) || out[(2, 2)].abs() < 1e-14 {
        return None;
    }
    let out = out / out[(2, 2)];
    (out.determinant().abs() > 1e-12).then_some(out)
}

fn transfer_error(h: &Matrix3<f64>, m: &(Vector2<f64>, Vector2<f64>)) -> f64 {
    apply(h, &m.0).map_or(f64::INFINITY, |p| (p - m.1).norm())
}

fn inlier_mask(h: &Matrix3<f64>, matches: &[(Vector2<f64>, Vector2<f64>)], threshold: f64) -> Vec<bool> {
    matches.iter().map(|m| transfer_error(h, m) <= threshold).collect()
}

/// RANSAC over 4-point normalized DLT, then refits on the consensus set until
/// it stops changing.
pub fn estimate_homography(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    config: &RansacConfig,
) -> Result<HomographyEstimate> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::EstimationFailed(alloc::format!("{} correspondences, need 4", n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = config.max_iterations;
    let mut it = 0;
    while it < needed.min(config.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let Some(h) = dlt(matches, &idx) else {
            continue;
        };
        let count = inlier_mask(&h, matches, config.threshold)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, h));
            let w = count as f64 / n as f64;
            let p = w.powi(4);
            needed = if p >= 1.0 - 1e-12 {
                it
            } else if p <= 0.0 {
                config.max_iterations
            } else {
                ((1.0 - config.confidence).ln() / (1.0 - p).ln()).ceil() as usize
            };
        }
        if n == 4 {
            break;
        }
    }
    let Some((_, mut h)) = best else {
        return Err(Error::EstimationFailed("no non-degenerate sample".into()));
    };
    let mut mask = inlier_mask(&h, matches, config.threshold);
    for _ in 0..5 {
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if idx.len() < 4 {
            break;
        }
        let Some(refit) = dlt(matches, &idx) else {
            break;
        };
        let next = inlier_mask(&refit, matches, config.threshold);
        h = refit;
        if next == mask {
            break;
        }
        mask = next;
    }
    let inlier_count = mask.iter().filter(|&&b| b).count();
    if inlier_count < 4 {
        return Err(Error::EstimationFailed(alloc::format!("{} inliers", inlier_count)));
    }
    Ok(HomographyEstimate {
        h,
        inliers: mask,
        inlier_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomographyObservation {
    pub agents: (u32, u32),
    pub frames: (FrameId, FrameId),
    /// Rotation from camera 1 to camera 2 coordinates.
    pub rotation: UnitQuaternion<f64>,
    /// Unit translation, camera 2 coordinates: `X2 = R X1 + t`.
    pub translation: Vector3<f64>,
    pub inliers: usize,
    /// Plane normal in camera 1.
    pub normal: Vector3<f64>,
}

/// Picks the candidate that passes cheirality and whose rotation is nearest
/// the prior `R_12`; near ties go to the normal closest to the optical axis.
pub fn select_decomposition(
    decomposition: &HomographyDecomposition,
    prior_rotation: &UnitQuaternion<f64>,
    agents: (u32, u32),
    frames: (FrameId, FrameId),
    inliers: usize,
) -> Result<HomographyObservation> {
    if decomposition.degenerate {
        return Err(Error::degenerate("pure rotation pair carries no translation"));
    }
    let best = decomposition
        .admissible()
        .map(|c| (quat_boxminus(&c.rotation, prior_rotation).norm(), c))
        .min_by(|a, b| {
            if (a.0 - b.0).abs() < 1e-9 {
                b.1.normal.z.total_cmp(&a.1.normal.z)
            } else {
                a.0.total_cmp(&b.0)
            }
        })
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Cheirality("no homography candidate has the plane in front".into()))?;
    Ok(HomographyObservation {
        agents,
        frames,
        rotation: best.rotation,
        translation: best.translation_direction,
        inliers,
        normal: best.normal,
    })
}

/// Relative pose of two frames through their agents' core transforms:
/// `q = q_c1 q_k1 (q_c2 q_k2)⁻¹` and
/// `t = t_k1 − q_c1⁻¹ (q_c2 t_k2 + t_c2 − t_c1)`.
pub fn chained_relative_pose(pose_k1: &Pose, pose_k2: &Pose, core1: &Pose, core2: &Pose) -> Pose {
    let q = core1.rotation * pose_k1.rotation * (core2.rotation * pose_k2.rotation).inverse();
    let t = pose_k1.translation
        - core1.rotation.inverse() * (core2.rotation * pose_k2.translation + core2.translation - core1.translation);
    Pose::new(q, t)
}

/// `(‖t_chain‖ / ‖t_H‖) · t_H`.
pub fn rescale_homography_translation(t_chain: &Vector3<f64>, t_h: &Vector3<f64>) -> Result<Vector3<f64>> {
    let n = t_h.norm();
    if !(n > 1e-9) {
        return Err(Error::degenerate("homography translation has zero norm"));
    }
    Ok(t_h * (t_chain.norm() / n))
}

/// The observation expressed in the chain's terms for the given poses and
/// first core: rotation conjugated into the cluster frame, translation
/// rotated into agent 1's frame.
pub fn observation_in_chain_frame(
    obs: &HomographyObservation,
    pose_k1: &Pose,
    core1: &Pose,
) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let r0c1 = core1.rotation * pose_k1.rotation;
    let q = r0c1 * obs.rotation * r0c1.inverse();
    let t = pose_k1.rotation * (obs.rotation.inverse() * obs.translation);
    (q, t)
}

/// An accepted observation with the agent-frame poses of its two frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation {
    pub observation: HomographyObservation,
    pub pose_a: Pose,
    pub pose_b: Pose,
}

/// `e_q = q_chain ⊟ q_H`, `e_t = t_chain − t_Hs`.
pub fn core_residual(obs: &PoseObservation, core1: &Pose, core2: &Pose) -> Result<Vector6<f64>> {
    let chain = chained_relative_pose(&obs.pose_a, &obs.pose_b, core1, core2);
    let (q_h, t_h) = observation_in_chain_frame(&obs.observation, &obs.pose_a, core1);
    let e_q = quat_boxminus(&chain.rotation, &q_h);
    let e_t = chain.translation - rescale_homography_translation(&chain.translation, &t_h)?;
    Ok(Vector6::new(e_q.x, e_q.y, e_q.z, e_t.x, e_t.y, e_t.z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreTransforms {
    pub central: u32,
    /// Agent frame to cluster frame; the central agent is implicit identity.
    pub cores: BTreeMap<u32, Pose>,
}

impl CoreTransforms {
    pub fn new(central: u32) -> Self {
        Self {
            central,
            cores: BTreeMap::new(),
        }
    }

    pub fn get(&self, agent: u32) -> Option<Pose> {
        if agent == self.central {
            Some(Pose::identity())
        } else {
            self.cores.get(&agent).copied()
        }
    }

    pub fn set(&mut self, agent: u32, core: Pose) {
        if agent != self.central {
            self.cores.insert(agent, core);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub rotation_weight: f64,
    pub translation_weight: f64,
    pub huber: Option<f64>,
    pub max_iterations: usize,
    pub min_observations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            // One degree of rotation weighs like a metre of translation.
            rotation_weight: 3283.0,
            translation_weight: 1.0,
            huber: None,
            max_iterations: 100,
            min_observations: 3,
        }
    }
}

/// Optimizes the cores of one agent pair over its observations. The core of
/// `fixed` is the gauge and stays put.
pub fn optimize_core_transforms(
    observations: &[PoseObservation],
    cores: &CoreTransforms,
    fixed: u32,
    config: &RefineConfig,
) -> Result<(CoreTransforms, SolverSummary)> {
    if observations.len() < config.min_observations {
        return Err(Error::UnderConstrained(alloc::format!(
            "{} observations, need {}",
            observations.len(),
            config.min_observations
        )));
    }
    let mut problem = Problem::new();
    let mut blocks: BTreeMap<u32, usize> = BTreeMap::new();
    for o in observations {
        for agent in [o.observation.agents.0, o.observation.agents.1] {
            if blocks.contains_key(&agent) {
                continue;
            }
            let core = cores
                .get(agent)
                .ok_or_else(|| Error::Contract(alloc::format!("no core transform for agent {}", agent)))?;
            let b = problem.add_parameter(ParamValue::Pose(core));
            problem.set_frozen(b, agent == fixed || agent == cores.central);
            blocks.insert(agent, b);
        }
    }
    let (wr, wt) = (config.rotation_weight, config.translation_weight);
    let loss = config.huber.map_or(Loss::Trivial, Loss::HuberScaled);
    for o in observations {
        let obs = *o;
        let (a, b) = obs.observation.agents;
        problem.add_residual_weighted(
            FnCost::new(6, move |v: &[ParamValue], r: &mut [f64]| {
                let e = core_residual(&obs, v[0].pose(), v[1].pose())?;
                r.copy_from_slice(e.as_slice());
                Ok(())
            }),
            &[blocks[&a], blocks[&b]],
            &[wr, wr, wr, wt, wt, wt],
            loss,
        )?;
    }
    let summary = problem.solve(&SolverConfig {
        max_iterations: config.max_iterations,
        ..SolverConfig::default()
    })?;
    let mut out = cores.clone();
    for (agent, b) in blocks {
        if !problem.is_frozen(b) {
            out.set(agent, *problem.parameter(b).pose());
        }
    }
    Ok((out, summary))
}

/// Correspondences between two frames' `(landmark id, point)` lists, both
/// sorted by id.
pub fn match_features(a: &[(u64, Vector2<f64>)], b: &[(u64, Vector2<f64>)]) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                out.push((a[i].1, b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Camera-to-camera motion `(R_12, t_12)` with `X2 = R_12 X1 + t_12` for two
/// camera poses in a common frame.
pub fn camera_motion(pose_1: &Pose, pose_2: &Pose) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let m = pose_2.inverse().compose(pose_1);
    (m.rotation, m.translation)
}

/// Homography of the plane `n · X1 = d` between two cameras.
pub fn plane_homography(r: &UnitQuaternion<f64>, t: &Vector3<f64>, n: &Vector3<f64>, d: f64) -> Matrix3<f64> {
    r.to_rotation_matrix().matrix() + t * n.transpose() / d
}

/// Mean translation and rotation error of the chain against reference
/// relative poses `(q, t)` in the chain's convention.
pub fn relative_pose_error(
    observations: &[PoseObservation],
    cores: &CoreTransforms,
    reference: &[Pose],
) -> Option<(f64, f64)> {
    if observations.is_empty() {
        return None;
    }
    let mut et = 0.0;
    let mut er = 0.0;
    for (o, r) in observations.iter().zip(reference) {
        let (a, b) = o.observation.agents;
        let chain = chained_relative_pose(&o.pose_a, &o.pose_b, &cores.get(a)?, &cores.get(b)?);
        et += (chain.translation - r.translation).norm();
        er += chain.rotation.angle_to(&r.rotation);
    }
    let n = observations.len() as f64;
    Some((et / n, er / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{decompose_homography, quat_exp};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn rand_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        Pose::new(
            quat_exp(&Vector3::new(
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
                rng.random_range(-rot..rot),
            )),
            Vector3::new(
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
                rng.random_range(-trans..trans),
            ),
        )
    }

    #[test]
    fn desired_distance_examples() {
        let cam = PinholeCamera::new(500, 400, 500.0, 500.0, 250.0, 200.0);
        assert_eq!(desired_distance(1.0, &cam, 100.0).unwrap(), 0.0);
        assert!((desired_distance(0.5, &cam, 100.0).unwrap() - 50.0).abs() < 1e-12);
        let d1 = desired_distance(0.3, &cam, 80.0).unwrap();
        let d2 = desired_distance(0.3, &cam, 160.0).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
        assert!(desired_distance(0.0, &cam, 100.0).is_err());
        assert!(desired_distance(1.5, &cam, 100.0).is_err());
    }

    fn traj(rng: &mut ChaCha8Rng, n: usize, off: f64) -> Vec<(FrameId, Vector3<f64>)> {
        (0..n)
            .map(|i| {
                (
                    i as FrameId,
                    Vector3::new(
                        rng.random_range(0.0..200.0) + off,
                        rng.random_range(0.0..200.0),
                        rng.random_range(95.0..105.0),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn candidate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = traj(&mut rng, 30, 0.0);
        let pairs = candidate_pairs((0, 1), &a, &a, 1e-9, (100.0, 80.0));
        for i in 0..30 {
            assert!(pairs.iter().any(|p| p.frames == (i, i) && p.overlap == 1.0));
        }
        let far: Vec<_> = a
            .iter()
            .map(|(f, p)| (*f, p + Vector3::new(5000.0, 0.0, 0.0)))
            .collect();
        assert!(candidate_pairs((0, 1), &a, &far, 500.0, (100.0, 80.0)).is_empty());
        assert!(candidate_pairs((0, 1), &[], &a, 50.0, (100.0, 80.0)).is_empty());
    }

    proptest! {
        #[test]
        fn candidates_match_brute_force(seed in 0u64..10_000, d in 1.0..80.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = traj(&mut rng, 40, 0.0);
            let b = traj(&mut rng, 50, 30.0);
            let mut got: Vec<(FrameId, FrameId)> = candidate_pairs((0, 1), &a, &b, d, (100.0, 80.0)).iter().map(|p| p.frames).collect();
            let mut brute = Vec::new();
            for (fa, pa) in &a {
                for (fb, pb) in &b {
                    if (pa - pb).norm() <= d {
                        brute.push((*fa, *fb));
                    }
                }
            }
            got.sort();
            brute.sort();
            prop_assert_eq!(got, brute);
        }
    }

    /// Points on the plane `z = depth` in camera 1 and their images in both
    /// cameras.
    fn planar_scene(rng: &mut ChaCha8Rng, motion: &Pose, n: usize, depth: f64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let mut out = Vec::new();
        while out.len() < n {
            let x1 = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.45..0.45), 1.0) * depth;
            let x2 = motion.transform_point(&x1);
            if x2.z <= 0.0 {
                continue;
            }
            out.push((
                Vector2::new(x1.x / x1.z, x1.y / x1.z),
                Vector2::new(x2.x / x2.z, x2.y / x2.z),
            ));
        }
        out
    }

    #[test]
    fn identity_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = planar_scene(&mut rng, &Pose::identity(), 30, 10.0);
        let est = estimate_homography(&m, &RansacConfig::default()).unwrap();
        assert!((est.h - Matrix3::identity()).norm() < 1e-10);
        assert_eq!(est.inlier_count, 30);
        assert!(estimate_homography(&m[..3], &RansacConfig::default()).is_err());
    }

    fn random_motion(rng: &mut ChaCha8Rng) -> Pose {
        let r = quat_exp(&Vector3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.6..0.6),
        ));
        let t = Vector3::new(
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(-3.0..3.0),
        );
        Pose::new(r, t)
    }

    proptest! {
        #[test]
        fn homography_round_trip_is_exact(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let motion = random_motion(&mut rng);
            let m = planar_scene(&mut rng, &motion, 40, 100.0);
            let est = estimate_homography(&m, &RansacConfig { seed, ..RansacConfig::default() }).unwrap();
            let h_true = plane_homography(&motion.rotation, &motion.translation, &Vector3::z(), 100.0);
            let h_true = h_true / h_true[(2, 2)];
            prop_assert!((est.h - h_true).norm() < 1e-8, "{}", (est.h - h_true).norm());
            for (a, b) in &m {
                prop_assert!((apply(&est.h, a).unwrap() - b).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn ransac_rejects_injected_outliers() {
        let mut excluded = 0usize;
        let mut injected = 0usize;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let motion = random_motion(&mut rng);
            let mut m = planar_scene(&mut rng, &motion, 70, 100.0);
            let noise = Normal::new(0.0, 0.0003).unwrap();
            for p in &mut m {
                p.1 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let k = 30;
            for _ in 0..k {
                m.push((
                    Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.45..0.45)),
                    Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.45..0.45)),
                ));
            }
            let est = estimate_homography(
                &m,
                &RansacConfig {
                    seed,
                    ..RansacConfig::default()
                },
            )
            .unwrap();
            injected += k;
            excluded += est.inliers[70..].iter().filter(|&&b| !b).count();
        }
        assert!(
            excluded as f64 >= 0.95 * injected as f64,
            "{} of {}",
            excluded,
            injected
        );
    }

    #[test]
    fn selection_recovers_generator_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let motion = random_motion(&mut rng);
            let m = planar_scene(&mut rng, &motion, 30, 100.0);
            let est = estimate_homography(&m, &RansacConfig::default()).unwrap();
            let dec = decompose_homography(&est.h, &m).unwrap();
            let obs = select_decomposition(&dec, &motion.rotation, (0, 1), (0, 0), est.inlier_count).unwrap();
            assert!(obs.rotation.angle_to(&motion.rotation) < 1e-6);
            assert!((obs.translation - motion.translation.normalize()).norm() < 1e-6);
        }
    }

    #[test]
    fn selection_prefers_prior_and_rejects_when_nothing_is_in_front() {
        let motion = Pose::new(
            UnitQuaternion::from_euler_angles(0.02, 0.01, 0.3),
            Vector3::new(10.0, 2.0, 0.5),
        );
        let h = plane_homography(&motion.rotation, &motion.translation, &Vector3::z(), 100.0);
        let dec = decompose_homography(&h, &[]).unwrap();
        for c in dec.admissible() {
            let obs = select_decomposition(&dec, &c.rotation, (0, 1), (0, 0), 30).unwrap();
            assert!(
                obs.rotation.angle_to(&c.rotation) < 1e-12 || quat_boxminus(&obs.rotation, &c.rotation).norm() < 1e-9
            );
        }
        // Points behind the first camera fail cheirality for every candidate.
        let behind = [(Vector2::new(0.1, 0.1), Vector2::new(0.2, 0.1))];
        let mut dec = decompose_homography(&h, &behind).unwrap();
        for c in &mut dec.candidates {
            c.cheirality = false;
        }
        assert!(matches!(
            select_decomposition(&dec, &UnitQuaternion::identity(), (0, 1), (0, 0), 30),
            Err(Error::Cheirality(_))
        ));
    }

    proptest! {
        #[test]
        fn chain_matches_dense_composition(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k1, k2, c1, c2) = (rand_pose(&mut rng, 3.0, 200.0), rand_pose(&mut rng, 3.0, 200.0), rand_pose(&mut rng, 3.0, 200.0), rand_pose(&mut rng, 3.0, 200.0));
            let chain = chained_relative_pose(&k1, &k2, &c1, &c2);
            let m = |p: &Pose| p.rotation.to_rotation_matrix().into_inner();
            let q = m(&c1) * m(&k1) * (m(&c2) * m(&k2)).transpose();
            let t = k1.translation - m(&c1).transpose() * (m(&c2) * k2.translation + c2.translation - c1.translation);
            prop_assert!((chain.rotation.to_rotation_matrix().into_inner() - q).norm() < 1e-12);
            prop_assert!((chain.translation - t).norm() < 1e-12 * (1.0 + t.norm()));
        }

        #[test]
        fn rescale_preserves_norm_and_direction(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tc = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let th = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let r = rescale_homography_translation(&tc, &th).unwrap();
            prop_assert!((r.norm() - tc.norm()).abs() < 1e-12 * (1.0 + tc.norm()));
            prop_assert!((r.normalize() - th).norm() < 1e-12);
        }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(
            rescale_homography_translation(&Vector3::new(0.0, 3.0, 4.0), &Vector3::x()).unwrap(),
            Vector3::new(5.0, 0.0, 0.0)
        );
        assert_eq!(
            rescale_homography_translation(&Vector3::zeros(), &Vector3::x()).unwrap(),
            Vector3::zeros()
        );
        assert!(rescale_homography_translation(&Vector3::x(), &Vector3::zeros()).is_err());
    }

    /// Cluster-frame camera poses of two agents with known cores, and
    /// observations synthesized from the true camera motion.
    fn rendezvous(rng: &mut ChaCha8Rng, n: usize) -> (Vec<PoseObservation>, CoreTransforms, Vec<Pose>) {
        let core_b = Pose::new(
            UnitQuaternion::from_euler_angles(0.01, -0.02, 0.3),
            Vector3::new(40.0, -25.0, 1.0),
        );
        let mut cores = CoreTransforms::new(0);
        cores.set(1, core_b);
        let down = crate::camera::nadir_rotation(0.0);
        let mut obs = Vec::new();
        let mut reference = Vec::new();
        for i in 0..n {
            let ca = Pose::new(
                quat_exp(&Vector3::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    0.0,
                )) * down,
                Vector3::new(i as f64 * 12.0, rng.random_range(-5.0..5.0), 100.0),
            );
            let cb = Pose::new(
                quat_exp(&Vector3::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    0.0,
                )) * down,
                ca.translation
                    + Vector3::new(
                        rng.random_range(-30.0..30.0),
                        rng.random_range(40.0..70.0),
                        rng.random_range(-1.0..1.0),
                    ),
            );
            let (r12, t12) = camera_motion(&ca, &cb);
            let pose_b = core_b.inverse().compose(&cb);
            let ho = HomographyObservation {
                agents: (0, 1),
                frames: (i as FrameId, i as FrameId),
                rotation: r12,
                translation: t12.normalize(),
                inliers: 50,
                normal: Vector3::z(),
            };
            obs.push(PoseObservation {
                observation: ho,
                pose_a: ca,
                pose_b,
            });
            reference.push(chained_relative_pose(&ca, &pose_b, &Pose::identity(), &core_b));
        }
        (obs, cores, reference)
    }

    #[test]
    fn chain_frame_conversion_matches_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (obs, cores, _) = rendezvous(&mut rng, 5);
        for o in &obs {
            let e = core_residual(o, &Pose::identity(), &cores.get(1).unwrap()).unwrap();
            assert!(e.norm() < 1e-10, "{}", e.norm());
        }
    }

    #[test]
    fn synthesized_observations_leave_cores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (obs, cores, _) = rendezvous(&mut rng, 6);
        let (out, summary) = optimize_core_transforms(&obs, &cores, 0, &RefineConfig::default()).unwrap();
        let (a, b) = (cores.get(1).unwrap(), out.get(1).unwrap());
        assert!((a.translation - b.translation).norm() < 1e-10 && a.angle_to(&b) < 1e-10);
        assert!(summary.final_cost < 1e-16);
    }

    #[test]
    fn perturbed_cores_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (obs, cores, _) = rendezvous(&mut rng, 8);
        let truth = cores.get(1).unwrap();
        let mut start = cores.clone();
        let d = 2f64.to_radians() / 3f64.sqrt();
        start.set(
            1,
            truth.boxplus(&Vector6::new(
                d,
                -d,
                d,
                2.0 / 3f64.sqrt(),
                2.0 / 3f64.sqrt(),
                -2.0 / 3f64.sqrt(),
            )),
        );
        let cfg = RefineConfig {
            max_iterations: 200,
            ..RefineConfig::default()
        };
        let (out, summary) = optimize_core_transforms(&obs, &start, 0, &cfg).unwrap();
        assert!(summary.final_cost <= summary.initial_cost);
        let got = out.get(1).unwrap();
        assert!(got.angle_to(&truth) < 1e-5, "{}", got.angle_to(&truth));
        assert!((got.translation - truth.translation).norm() < 1e-4);
        assert!(optimize_core_transforms(&obs[..2], &start, 0, &cfg).is_err());
    }

    #[test]
    fn eq9_cost_vanishes_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (obs, cores, _) = rendezvous(&mut rng, 10);
        let cost: f64 = obs
            .iter()
            .map(|o| {
                core_residual(o, &Pose::identity(), &cores.get(1).unwrap())
                    .unwrap()
                    .norm_squared()
            })
            .sum();
        assert!(cost < 1e-16, "{}", cost);
    }

    #[test]
    fn match_features_joins_on_id() {
        let a = [
            (1, Vector2::new(0.0, 0.0)),
            (3, Vector2::new(1.0, 0.0)),
            (7, Vector2::new(2.0, 0.0)),
        ];
        let b = [
            (3, Vector2::new(5.0, 0.0)),
            (4, Vector2::new(6.0, 0.0)),
            (7, Vector2::new(7.0, 0.0)),
        ];
        let m = match_features(&a, &b);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], (Vector2::new(1.0, 0.0), Vector2::new(5.0, 0.0)));
    }
}
