//! GNSS and visual odometry fusion: timestamp alignment, metric scale
//! initialization, windowed pose-graph optimization and the transforms that
//! place every agent in the central agent's frame.
//!
//! Frames, per agent `k`:
//!
//! * VO local: the first camera frame, translations in VO units.
//! * ENU_k: East-North-Up at the agent's first GNSS fix `P_k`.
//!
//! A registration maps VO local into ENU_k as `t_w = R_lw · s · t_l + o`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, UnitQuaternion, Vector3, Vector6};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::geom::{enu_frame_rotation, enu_from_geodetic, procrustes_rotation, quat_boxminus, EnuPoint, GnssFix, Pose};
use crate::nlls::{FnCost, Loss, ParamValue, Problem, SolverConfig, SolverSummary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedSample {
    pub timestamp: f64,
    /// VO pose (camera to VO local).
    pub local_pose: Pose,
    pub enu_observation: EnuPoint,
}

impl AlignedSample {
    pub fn gnss(&self) -> Vector3<f64> {
        self.enu_observation.to_vector()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub agent: u32,
    /// VO local to ENU_k rotation.
    pub r_lw: UnitQuaternion<f64>,
    /// Position of the VO local origin in ENU_k, metres.
    pub local_origin: Vector3<f64>,
    pub gnss_origin: GnssFix,
    pub scale: f64,
    pub is_central: bool,
}

impl AgentRegistration {
    pub fn new(agent: u32, gnss_origin: GnssFix, is_central: bool) -> Self {
        Self {
            agent,
            r_lw: UnitQuaternion::identity(),
            local_origin: Vector3::zeros(),
            gnss_origin,
            scale: 1.0,
            is_central,
        }
    }

    /// `T_lw`: metric VO local to ENU_k.
    pub fn local_to_world(&self) -> Pose {
        Pose::new(self.r_lw, self.local_origin)
    }

    /// ENU_k pose of a VO pose.
    pub fn world_pose(&self, local: &Pose) -> Pose {
        self.local_to_world().compose(&metric(local, self.scale))
    }

    pub fn validate(&self) -> Result<()> {
        self.gnss_origin.validate()?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::domain("registration scale must be positive"));
        }
        Ok(())
    }
}

/// A VO pose with its translation converted to metres.
pub fn metric(local: &Pose, s: f64) -> Pose {
    Pose::new(local.rotation, local.translation * s)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalTrajectory {
    pub timestamps: Vec<f64>,
    /// Camera poses in ENU_k.
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnssConfig {
    pub alignment_tolerance: f64,
    pub gnss_sigma_m: f64,
    /// Lower bound on the sigma used for weighting, so noise-free runs stay
    /// well conditioned.
    pub sigma_floor_m: f64,
    pub rotation_weight: f64,
    pub translation_weight: f64,
    pub scale_weight: f64,
    pub scale_epsilon: f64,
    pub window: usize,
    /// Huber threshold on whitened GNSS residuals; `None` disables it.
    pub gnss_huber: Option<f64>,
    pub max_iterations: usize,
    /// RMS spread of fixes off their principal line needed before the
    /// local-to-ENU rotation counts as observable.
    pub conditioning_spread_m: f64,
}

impl Default for GnssConfig {
    fn default() -> Self {
        Self {
            alignment_tolerance: 0.05,
            gnss_sigma_m: 1.0,
            sigma_floor_m: 0.05,
            rotation_weight: 100.0,
            translation_weight: 25.0,
            scale_weight: 10.0,
            scale_epsilon: 1e-3,
            window: 50,
            gnss_huber: Some(3.0),
            max_iterations: 50,
            conditioning_spread_m: 5.0,
        }
    }
}

fn check_sorted(ts: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for t in ts {
        if !(t >= prev) {
            return Err(Error::Contract(alloc::format!(
                "{} stream is not sorted by timestamp",
                what
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Pairs every fix with the VO pose interpolated to its timestamp. Fixes
/// with no VO sample within `tolerance` are dropped; a fix outside the VO
/// span but within tolerance of its end takes the end pose.
pub fn align_timestamps(
    vo: &[(f64, Pose)],
    gnss: &[GnssFix],
    origin: &GnssFix,
    tolerance: f64,
) -> Result<Vec<AlignedSample>> {
    check_sorted(vo.iter().map(|v| v.0), "VO")?;
    check_sorted(gnss.iter().map(|g| g.timestamp), "GNSS")?;
    let mut out = Vec::new();
    if vo.is_empty() {
        return Ok(out);
    }
    for fix in gnss {
        let t = fix.timestamp;
        let hi = vo.partition_point(|v| v.0 < t);
        let near = [hi.checked_sub(1), (hi < vo.len()).then_some(hi)]
            .into_iter()
            .flatten()
            .any(|i| (vo[i].0 - t).abs() <= tolerance);
        if !near {
            continue;
        }
        let pose = if hi < vo.len() && vo[hi].0 == t {
            vo[hi].1
        } else if hi == 0 {
            vo[0].1
        } else if hi == vo.len() {
            vo[hi - 1].1
        } else {
            let (t0, p0) = vo[hi - 1];
            let (t1, p1) = vo[hi];
            p0.interpolate(&p1, (t - t0) / (t1 - t0))
        };
        out.push(AlignedSample {
            timestamp: t,
            local_pose: pose,
            enu_observation: enu_from_geodetic(fix, origin)?,
        });
    }
    Ok(out)
}

/// Metric scale from the first and latest samples:
/// `‖g_n − g_0‖ / ‖t_n − t_0‖`.
pub fn init_scale(samples: &[AlignedSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientMotion(0.0));
    }
    let (first, last) = (&samples[0], &samples[samples.len() - 1]);
    let local = (last.local_pose.translation - first.local_pose.translation).norm();
    if !(local > 1e-6) {
        return Err(Error::InsufficientMotion(local));
    }
    Ok((last.gnss() - first.gnss()).norm() / local)
}

/// Relative-motion residual between consecutive samples: rotation error of
/// the body-frame increments, then translation error of the scaled local
/// increment against the world increment, both in frame `i`.
pub fn vo_edge_residual(
    sample_i: &AlignedSample,
    sample_j: &AlignedSample,
    world_i: &Pose,
    world_j: &Pose,
    s: f64,
) -> Vector6<f64> {
    let (li, lj) = (&sample_i.local_pose, &sample_j.local_pose);
    let dq_l = li.rotation.inverse() * lj.rotation;
    let dq_w = world_i.rotation.inverse() * world_j.rotation;
    let e_q = quat_boxminus(&dq_l, &dq_w);
    let e_t = li.rotation.inverse() * (lj.translation - li.translation) * s
        - world_i.rotation.inverse() * (world_j.translation - world_i.translation);
    Vector6::new(e_q.x, e_q.y, e_q.z, e_t.x, e_t.y, e_t.z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssResidual {
    pub e_g: Vector3<f64>,
    /// Omitted while the VO displacement from the first sample is below
    /// the gating threshold.
    pub e_s: Option<f64>,
}

/// Position residual `g_k − t_w` and scale residual
/// `s − ‖g_k − g_0‖ / ‖t_k − t_0‖`.
pub fn gnss_residual(
    sample: &AlignedSample,
    first: &AlignedSample,
    world_translation: &Vector3<f64>,
    s: f64,
    epsilon: f64,
) -> GnssResidual {
    let e_g = sample.gnss() - world_translation;
    let local = (sample.local_pose.translation - first.local_pose.translation).norm();
    let e_s = (local > epsilon).then(|| s - (sample.gnss() - first.gnss()).norm() / local);
    GnssResidual { e_g, e_s }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolution {
    pub poses: Vec<Pose>,
    pub scale: f64,
    pub summary: SolverSummary,
}

/// Stage one over a contiguous run of samples. `first` is the stream's first
/// sample, the reference for the scale residual.
pub fn optimize_window(
    samples: &[AlignedSample],
    first: &AlignedSample,
    initial: &[Pose],
    scale: f64,
    freeze_first: bool,
    config: &GnssConfig,
) -> Result<WindowSolution> {
    if samples.len() != initial.len() || samples.is_empty() {
        return Err(Error::Contract("one initial pose per sample required".into()));
    }
    let mut problem = Problem::new();
    let blocks: Vec<usize> = initial
        .iter()
        .map(|p| problem.add_parameter(ParamValue::Pose(*p)))
        .collect();
    // Last, so the scale's dense row does not widen the envelope of the rest.
    let sb = problem.add_parameter(ParamValue::Scale(scale));
    if freeze_first {
        problem.set_frozen(blocks[0], true);
    }
    let sigma = config.gnss_sigma_m.max(config.sigma_floor_m);
    let w_g = 1.0 / (sigma * sigma);
    let loss_g = config.gnss_huber.map_or(Loss::Trivial, Loss::HuberScaled);
    let (wr, wt) = (config.rotation_weight, config.translation_weight);
    let eps = config.scale_epsilon;
    let first = *first;
    for (k, sample) in samples.iter().enumerate() {
        let sk = *sample;
        problem.add_residual_weighted(
            FnCost::new(3, move |v: &[ParamValue], r: &mut [f64]| {
                let e = sk.gnss() - v[0].pose().translation;
                r.copy_from_slice(e.as_slice());
                Ok(())
            }),
            &[blocks[k]],
            &[w_g; 3],
            loss_g,
        )?;
        if gnss_residual(&sk, &first, &Vector3::zeros(), scale, eps).e_s.is_some() {
            let ratio =
                (sk.gnss() - first.gnss()).norm() / (sk.local_pose.translation - first.local_pose.translation).norm();
            problem.add_residual_weighted(
                FnCost::new(1, move |v: &[ParamValue], r: &mut [f64]| {
                    r[0] = v[0].scalar() - ratio;
                    Ok(())
                }),
                &[sb],
                &[config.scale_weight],
                Loss::Trivial,
            )?;
        }
        if k > 0 {
            let si = samples[k - 1];
            problem.add_residual_weighted(
                FnCost::new(6, move |v: &[ParamValue], r: &mut [f64]| {
                    let e = vo_edge_residual(&si, &sk, v[0].pose(), v[1].pose(), v[2].scalar());
                    r.copy_from_slice(e.as_slice());
                    Ok(())
                }),
                &[blocks[k - 1], blocks[k], sb],
                &[wr, wr, wr, wt, wt, wt],
                Loss::Trivial,
            )?;
        }
    }
    let summary = problem.solve(&SolverConfig {
        max_iterations: config.max_iterations,
        ..SolverConfig::default()
    })?;
    Ok(WindowSolution {
        poses: blocks.iter().map(|&b| *problem.parameter(b).pose()).collect(),
        scale: problem.parameter(sb).scalar(),
        summary,
    })
}

/// Stage two: the rotation that best maps VO camera axes and scaled VO
/// displacement directions onto the optimized world ones, and the matching
/// origin offset.
pub fn extract_registration(
    samples: &[AlignedSample],
    world: &[Pose],
    scale: f64,
    prior: &AgentRegistration,
) -> AgentRegistration {
    let mut pairs = Vec::with_capacity(samples.len() * 4);
    for (s, w) in samples.iter().zip(world) {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            pairs.push((s.local_pose.rotation * axis, w.rotation * axis, 1.0));
        }
    }
    let (l0, w0) = (&samples[0].local_pose.translation, &world[0].translation);
    for (s, w) in samples.iter().zip(world).skip(1) {
        let dl = (s.local_pose.translation - l0) * scale;
        let dw = w.translation - w0;
        if dl.norm() > 1e-9 && dw.norm() > 1e-9 {
            pairs.push((dl.normalize(), dw.normalize(), 1.0));
        }
    }
    let r_lw = procrustes_rotation(pairs).map_or(prior.r_lw, |r| r.0);
    let n = samples.len() as f64;
    let local_origin = samples
        .iter()
        .zip(world)
        .map(|(s, w)| w.translation - r_lw * (s.local_pose.translation * scale))
        .sum::<Vector3<f64>>()
        / n;
    AgentRegistration {
        r_lw,
        local_origin,
        scale,
        ..*prior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageResult {
    pub trajectory: GlobalTrajectory,
    pub registration: AgentRegistration,
    pub summary: SolverSummary,
    /// Set when the trajectory does not pin down every direction.
    pub rank_deficient: bool,
}

/// Batch two-stage optimization over all samples. `initial` seeds the
/// world poses; without it they come from the prior registration.
pub fn two_stage_optimize(
    samples: &[AlignedSample],
    prior: &AgentRegistration,
    initial: Option<&[Pose]>,
    config: &GnssConfig,
) -> Result<TwoStageResult> {
    if samples.len() < 3 {
        return Err(Error::UnderConstrained(
            "two-stage optimization needs three samples".into(),
        ));
    }
    prior.validate()?;
    let seeds: Vec<Pose> = match initial {
        Some(p) => p.to_vec(),
        None => samples.iter().map(|s| prior.world_pose(&s.local_pose)).collect(),
    };
    let sol = optimize_window(samples, &samples[0], &seeds, prior.scale, false, config)?;
    let registration = extract_registration(samples, &sol.poses, sol.scale, prior);
    let rank_deficient = sol.summary.rank_deficient || !is_conditioned(samples, config.conditioning_spread_m.min(1e-6));
    Ok(TwoStageResult {
        trajectory: GlobalTrajectory {
            timestamps: samples.iter().map(|s| s.timestamp).collect(),
            poses: sol.poses,
        },
        registration,
        summary: sol.summary,
        rank_deficient,
    })
}

/// RMS spread of the GNSS positions off their principal line.
pub fn lateral_spread(samples: &[AlignedSample]) -> f64 {
    if samples.len() < 3 {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.gnss()).sum::<Vector3<f64>>() / n;
    let mut cov = nalgebra::Matrix3::zeros();
    for s in samples {
        let d = s.gnss() - mean;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    (ev[1].max(0.0) / n).sqrt()
}

fn is_conditioned(samples: &[AlignedSample], spread: f64) -> bool {
    lateral_spread(samples) >= spread
}

/// Rotation taking VO displacements onto GNSS displacements. Falls back to
/// the shortest rotation between the longest displacements when the path
/// is a straight line.
fn initial_rotation(samples: &[AlignedSample]) -> Option<UnitQuaternion<f64>> {
    let (l0, g0) = (samples[0].local_pose.translation, samples[0].gnss());
    let pairs: Vec<(Vector3<f64>, Vector3<f64>, f64)> = samples
        .iter()
        .skip(1)
        .map(|s| (s.local_pose.translation - l0, s.gnss() - g0, 1.0))
        .collect();
    if let Some((r, _)) = procrustes_rotation(pairs.iter().copied()) {
        return Some(r);
    }
    let (dl, dg, _) = pairs.iter().max_by(|a, b| a.0.norm().total_cmp(&b.0.norm()))?;
    UnitQuaternion::rotation_between(dl, dg)
}

/// Streaming per-agent fusion over a sliding window.
#[derive(Debug, Clone)]
pub struct GnssFusion {
    pub config: GnssConfig,
    registration: Option<AgentRegistration>,
    agent: u32,
    is_central: bool,
    samples: Vec<AlignedSample>,
    world: Vec<Pose>,
    scale: Option<f64>,
    conditioned: bool,
    vo_buffer: Vec<(f64, Pose)>,
    scale_trace: Vec<(f64, f64)>,
    solves: usize,
}

impl GnssFusion {
    pub fn new(agent: u32, is_central: bool, config: GnssConfig) -> Self {
        Self {
            config,
            registration: None,
            agent,
            is_central,
            samples: Vec::new(),
            world: Vec::new(),
            scale: None,
            conditioned: false,
            vo_buffer: Vec::new(),
            scale_trace: Vec::new(),
            solves: 0,
        }
    }

    pub fn registration(&self) -> Option<&AgentRegistration> {
        self.registration.as_ref()
    }

    /// True once the scale is initialized and the path is no longer a line.
    pub fn is_conditioned(&self) -> bool {
        self.conditioned
    }

    pub fn samples(&self) -> &[AlignedSample] {
        &self.samples
    }

    /// Current ENU_k estimate of every aligned sample.
    pub fn world_poses(&self) -> &[Pose] {
        &self.world
    }

    pub fn scale_trace(&self) -> &[(f64, f64)] {
        &self.scale_trace
    }

    pub fn solve_count(&self) -> usize {
        self.solves
    }

    pub fn trajectory(&self) -> GlobalTrajectory {
        GlobalTrajectory {
            timestamps: self.samples.iter().map(|s| s.timestamp).collect(),
            poses: self.world.clone(),
        }
    }

    pub fn push_vo(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if self.vo_buffer.last().is_some_and(|l| l.0 > timestamp) {
            return Err(Error::Contract("VO stream is not sorted by timestamp".into()));
        }
        self.vo_buffer.push((timestamp, pose));
        // Two samples bracket any fix that can still arrive in order.
        let keep = 8;
        if self.vo_buffer.len() > keep {
            self.vo_buffer.drain(..self.vo_buffer.len() - keep);
        }
        Ok(())
    }

    /// Aligns a fix against the buffered VO poses and folds it in. Returns
    /// whether a sample was added.
    pub fn push_gnss(&mut self, fix: &GnssFix) -> Result<bool> {
        fix.validate()?;
        let origin = match &self.registration {
            Some(r) => r.gnss_origin,
            None => *fix,
        };
        let aligned = align_timestamps(
            &self.vo_buffer,
            core::slice::from_ref(fix),
            &origin,
            self.config.alignment_tolerance,
        )?;
        let Some(sample) = aligned.into_iter().next() else {
            return Ok(false);
        };
        if self.samples.last().is_some_and(|l| l.timestamp >= sample.timestamp) {
            return Err(Error::Contract("GNSS stream is not sorted by timestamp".into()));
        }
        if self.registration.is_none() {
            self.registration = Some(AgentRegistration::new(self.agent, origin, self.is_central));
        }
        self.add_sample(sample)?;
        Ok(true)
    }

    fn add_sample(&mut self, sample: AlignedSample) -> Result<()> {
        let reg = self.registration.unwrap();
        // Seed from the previous estimate and the VO increment.
        let seed = match (self.samples.last(), self.world.last()) {
            (Some(prev), Some(w)) => {
                let s = self.scale.unwrap_or(1.0);
                let dl = prev.local_pose.between(&sample.local_pose);
                w.compose(&metric(&dl, s))
            }
            _ => Pose::new(sample.local_pose.rotation, sample.gnss()),
        };
        self.samples.push(sample);
        self.world.push(seed);

        if self.scale.is_none() {
            match init_scale(&self.samples) {
                Ok(s) if s > 0.0 => self.scale = Some(s),
                Ok(_) | Err(Error::InsufficientMotion(_)) => return Ok(()),
                Err(e) => return Err(e),
            }
        }
        if self.samples.len() < 3 {
            return Ok(());
        }
        let newly = !self.conditioned && is_conditioned(&self.samples, self.config.conditioning_spread_m);
        if !self.conditioned {
            // Rotation about a straight path is arbitrary: reseed everything
            // from the displacement fit each time until it is pinned down.
            if let Some(r) = initial_rotation(&self.samples) {
                let s = self.scale.unwrap();
                let mut reg = reg;
                reg.r_lw = r;
                reg.scale = s;
                reg.local_origin = self.samples[0].gnss() - r * (self.samples[0].local_pose.translation * s);
                for (w, smp) in self.world.iter_mut().zip(&self.samples) {
                    *w = reg.world_pose(&smp.local_pose);
                }
            }
            self.conditioned = newly;
        }
        self.solve()
    }

    fn solve(&mut self) -> Result<()> {
        let n = self.samples.len();
        let lo = n.saturating_sub(self.config.window);
        let freeze = self.conditioned && lo > 0;
        let sol = optimize_window(
            &self.samples[lo..],
            &self.samples[0],
            &self.world[lo..],
            self.scale.unwrap(),
            freeze,
            &self.config,
        )?;
        self.solves += 1;
        self.world[lo..].copy_from_slice(&sol.poses);
        self.scale = Some(sol.scale);
        let reg = extract_registration(
            &self.samples[lo..],
            &self.world[lo..],
            sol.scale,
            self.registration.as_ref().unwrap(),
        );
        self.registration = Some(reg);
        self.scale_trace.push((self.samples[n - 1].timestamp, sol.scale));
        Ok(())
    }
}

/// ENU_k to ENU_0 rigid transform between two agents' GNSS frames.
pub fn enu_transform(k: &AgentRegistration, central: &AgentRegistration) -> Result<Pose> {
    let r = enu_frame_rotation(&k.gnss_origin, &central.gnss_origin);
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let t = enu_from_geodetic(&k.gnss_origin, &central.gnss_origin)?.to_vector();
    Ok(Pose::new(rot, t))
}

/// `T_0k`: agent `k`'s metric VO local frame to the central agent's metric
/// VO local frame. The rotation is `R_lw^0⁻¹ · R_enu · R_lw^k`; the
/// translation carries agent `k`'s GNSS origin into the central ENU frame
/// and then into the central local frame.
pub fn relative_transform_to_central(k: &AgentRegistration, central: &AgentRegistration) -> Result<Pose> {
    let enu = enu_transform(k, central)?;
    Ok(central
        .local_to_world()
        .inverse()
        .compose(&enu)
        .compose(&k.local_to_world()))
}

/// Agent `k`'s VO pose in the central agent's metric local frame through the
/// chain `T_lw^0⁻¹ · T_0k · T_lw^k`, with `T_0k` the ENU_k to ENU_0
/// transform.
pub fn agent_relative_pose(k_pose_local: &Pose, k: &AgentRegistration, central: &AgentRegistration) -> Result<Pose> {
    let t_lw0_inv = central.local_to_world().inverse().to_homogeneous();
    let t_0k = enu_transform(k, central)?.to_homogeneous();
    let t_lwk = k.local_to_world().to_homogeneous();
    let m = t_lw0_inv * t_0k * t_lwk * metric(k_pose_local, k.scale).to_homogeneous();
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    Ok(Pose::new(rot, m.fixed_view::<3, 1>(0, 3).into_owned()))
}

/// Information matrix of the VO edge, exposed for callers assembling their
/// own problems.
pub fn vo_edge_information(config: &GnssConfig) -> DMatrix<f64> {
    let (r, t) = (config.rotation_weight, config.translation_weight);
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[r, r, r, t, t, t]))
}
