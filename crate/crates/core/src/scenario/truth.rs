use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ScenarioConfig, SyntheticWorld, TrajectoryPattern};
use crate::camera::nadir_rotation;
use crate::geom::{
    enu_frame_rotation, enu_from_geodetic, geodetic_from_enu, geodetic_resolution, EnuPoint, GnssFix, Pose,
};
use crate::gnss::{
    gnss_residual, init_scale, relative_transform_to_central, vo_edge_residual, AgentRegistration, AlignedSample,
};
use crate::relpose::chained_relative_pose;
use crate::vo::{generate_tracks, visual_residual, FeatureTrack, FrameId, TrackNoise};
use crate::{Error, Result};

/// Everything the generator knows about one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTruth {
    pub agent: u32,
    pub timestamps: Vec<f64>,
    /// Camera-to-world poses in the scenario frame.
    pub poses: Vec<Pose>,
    /// Injected VO scale: metres per VO unit.
    pub scale: f64,
    /// Registration that maps the noise-free VO stream onto `world_poses`.
    pub registration: AgentRegistration,
    /// Scenario frame to the agent's ENU frame.
    pub world_to_enu: Pose,
    /// Camera poses in the agent's ENU frame.
    pub enu_poses: Vec<Pose>,
    /// Camera poses in the agent's metric local frame, which is its first
    /// camera frame.
    pub local_poses: Vec<Pose>,
    /// Agent local frame to the cluster frame.
    pub core: Pose,
}

impl AgentTruth {
    /// Camera poses in the cluster frame (the central agent's local frame).
    pub fn cluster_pose(&self, frame: usize) -> Pose {
        self.core.compose(&self.local_poses[frame])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub central: usize,
    pub agents: Vec<AgentTruth>,
    /// Scenario frame to the cluster frame.
    pub world_to_cluster: Pose,
}

/// Sensor streams as an agent sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStreams {
    pub agent: u32,
    /// Timestamped VO poses, camera to VO local, translations in VO units.
    pub vo: Vec<(f64, Pose)>,
    pub gnss: Vec<GnssFix>,
    pub tracks: Vec<FeatureTrack>,
}

impl AgentStreams {
    /// `(landmark id, u, v)` of every observation in one frame, sorted by id.
    pub fn frame_features(&self, frame: FrameId) -> Vec<(u64, Vector2<f64>)> {
        self.tracks
            .iter()
            .filter_map(|t| t.observation(frame).map(|o| (t.id, o.point())))
            .collect()
    }
}

/// Worst residual of each family on the noise-free streams.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelfCheck {
    pub visual: f64,
    pub vo_edge: f64,
    pub gnss_position: f64,
    pub gnss_scale: f64,
    pub scale_init: f64,
    pub relative_pose: f64,
    /// Registration chain against the true core transforms.
    pub core_chain: f64,
    /// Position quantum of degree-valued fixes at the scenario origin.
    pub geodetic_resolution: f64,
}

const WOBBLE_PERIODS: [f64; 2] = [17.0, 23.0];
const ALTITUDE_PERIOD: f64 = 41.0;
const ALTITUDE_SWING: f64 = 0.5;
/// Seconds each agent's wobble runs ahead of the previous agent's. Without
/// it every agent starts exactly nadir at a round position, which lines its
/// first image up with the voxel grid.
const WOBBLE_LEAD: f64 = 7.3;

fn lanes(config: &ScenarioConfig) -> Result<Vec<Vec<[f64; 2]>>> {
    let n = config.agents.count;
    match &config.agents.pattern {
        TrajectoryPattern::Waypoints { per_agent } => Ok(per_agent.clone()),
        TrajectoryPattern::Lawnmower { side_overlap, margin_m } => {
            let [ex, ey] = config.world.extent_m;
            let (_, fh) = config.footprint();
            let spacing = (1.0 - side_overlap) * fh;
            let span = ey - 2.0 * margin_m;
            if span < 0.0 || ex - 2.0 * margin_m <= 0.0 {
                return Err(Error::Config("lawnmower margin leaves no room to fly".into()));
            }
            let count = (span / spacing + 1e-9).floor() as usize + 1;
            if count < n {
                return Err(Error::Config(format!("{} lanes for {} agents", count, n)));
            }
            let ys: Vec<f64> = (0..count).map(|i| margin_m + i as f64 * spacing).collect();
            let (x0, x1) = (*margin_m, ex - margin_m);
            let (base, extra) = (count / n, count % n);
            let mut out = Vec::with_capacity(n);
            let mut next = 0;
            for a in 0..n {
                let take = base + usize::from(a < extra);
                let mut wp = Vec::with_capacity(2 * take);
                for (j, y) in ys[next..next + take].iter().enumerate() {
                    if j % 2 == 0 {
                        wp.push([x0, *y]);
                        wp.push([x1, *y]);
                    } else {
                        wp.push([x1, *y]);
                        wp.push([x0, *y]);
                    }
                }
                next += take;
                out.push(wp);
            }
            Ok(out)
        }
    }
}

/// Positions along a polyline at constant speed, one per frame interval.
fn sample_polyline(wp: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut carry = 0.0;
    for seg in wp.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let mut d = carry;
        while d <= len + 1e-9 {
            let f = if len > 0.0 { (d / len).min(1.0) } else { 0.0 };
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            d += step;
        }
        carry = d - len;
    }
    out
}

/// Camera pose at time `t`: nadir with a small roll/pitch wobble and a gentle
/// altitude swing, both zero at `t = 0` for agent 0.
fn camera_pose(config: &ScenarioConfig, agent: usize, xy: [f64; 2], t: f64) -> Pose {
    let a = config.agents.wobble_deg.to_radians();
    let t = t + WOBBLE_LEAD * agent as f64;
    let roll = a * (core::f64::consts::TAU * t / WOBBLE_PERIODS[0]).sin();
    let pitch = a * (core::f64::consts::TAU * t / WOBBLE_PERIODS[1]).sin();
    let z = config.agents.altitude_m + ALTITUDE_SWING * (core::f64::consts::TAU * t / ALTITUDE_PERIOD).sin();
    Pose::new(
        UnitQuaternion::from_euler_angles(roll, pitch, 0.0) * nadir_rotation(0.0),
        Vector3::new(xy[0], xy[1], z),
    )
}

fn quat_from_matrix(m: &nalgebra::Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}

fn rng_for(seed: u64, agent: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.rotate_left(32))
}

/// True trajectories, registrations and cluster transforms plus the sensor
/// streams each agent receives. Residual families are verified on the
/// noise-free streams before anything is returned.
pub fn generate_truth(
    config: &ScenarioConfig,
    world: &SyntheticWorld,
) -> Result<(GroundTruth, Vec<AgentStreams>, SelfCheck)> {
    config.validate()?;
    let world_origin = config.origin.fix();
    let paths = lanes(config)?;
    let dt = config.agents.frame_interval_s;
    let step = config.agents.speed_mps * dt;
    let mut scale_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5343_414c_45);

    struct Raw {
        times: Vec<f64>,
        poses: Vec<Pose>,
        scale: f64,
        origin_fix: GnssFix,
        clean_fix: GnssFix,
        vo: Vec<(f64, Pose)>,
        clean_vo: Vec<(f64, Pose)>,
        gnss: Vec<GnssFix>,
        clean_gnss: Vec<GnssFix>,
    }

    let mut raws = Vec::with_capacity(config.agents.count);
    for (a, wp) in paths.iter().enumerate() {
        let drawn: f64 = scale_rng.random_range(0.5..2.0);
        let scale = config.agents.vo_scales.get(a).copied().unwrap_or(drawn);
        let xy = sample_polyline(wp, step);
        let stop = config.agents.stop_after_s.get(a).copied().flatten();
        let mut times = Vec::new();
        let mut poses = Vec::new();
        for (i, p) in xy.iter().enumerate() {
            let t = i as f64 * dt;
            if stop.is_some_and(|s| t > s) {
                break;
            }
            if !world.contains(p[0], p[1]) {
                return Err(Error::Config(format!(
                    "agent {} leaves the world at ({:.1}, {:.1})",
                    a, p[0], p[1]
                )));
            }
            times.push(t);
            poses.push(camera_pose(config, a, *p, t));
        }
        if poses.len() < 2 {
            return Err(Error::Config(format!("agent {} has fewer than two frames", a)));
        }

        // VO: first camera frame, divided by the scale, plus drift that
        // accumulates with distance along a wandering direction.
        let mut drift_rng = rng_for(config.seed, a, 1);
        let first = poses[0];
        let mut err = Vector3::zeros();
        let mut dir = Vector3::new(1.0, 0.0, 0.0);
        let mut vo = Vec::with_capacity(poses.len());
        let mut clean_vo = Vec::with_capacity(poses.len());
        for (i, p) in poses.iter().enumerate() {
            if i > 0 && config.noise.vo_drift > 0.0 {
                let n: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut drift_rng));
                dir = (dir + 0.3 * n).normalize();
                err += dir * (config.noise.vo_drift * (p.translation - poses[i - 1].translation).norm());
            }
            let local = first.between(p);
            let clean = Pose::new(local.rotation, local.translation / scale);
            clean_vo.push((times[i], clean));
            let noisy = Pose::new(
                local.rotation,
                (local.translation + first.rotation.inverse() * err) / scale,
            );
            vo.push((times[i], noisy));
        }

        // GNSS: per-agent bias plus white noise, dropouts never hit the
        // first fix because it defines the agent's ENU origin.
        let mut gnss_rng = rng_for(config.seed, a, 2);
        let sigma = Normal::new(0.0, config.noise.gnss_sigma_m).unwrap();
        let bias_n = Normal::new(0.0, config.noise.gnss_bias_m).unwrap();
        let bias = Vector3::new(bias_n.sample(&mut gnss_rng), bias_n.sample(&mut gnss_rng), 0.0);
        let mut gnss = Vec::with_capacity(poses.len());
        let mut clean_gnss = Vec::with_capacity(poses.len());
        for (i, p) in poses.iter().enumerate() {
            let n = Vector3::new(
                sigma.sample(&mut gnss_rng),
                sigma.sample(&mut gnss_rng),
                sigma.sample(&mut gnss_rng),
            );
            let dropped = gnss_rng.random::<f64>() < config.noise.gnss_dropout_prob;
            let clean = GnssFix {
                timestamp: times[i],
                ..geodetic_from_enu(&EnuPoint::from_vector(&p.translation), &world_origin)?
            };
            clean_gnss.push(clean);
            if i > 0 && dropped {
                continue;
            }
            let noisy = GnssFix {
                timestamp: times[i],
                ..geodetic_from_enu(&EnuPoint::from_vector(&(p.translation + bias + n)), &world_origin)?
            };
            gnss.push(noisy);
        }
        raws.push(Raw {
            times,
            poses,
            scale,
            origin_fix: gnss[0],
            clean_fix: clean_gnss[0],
            vo,
            clean_vo,
            gnss,
            clean_gnss,
        });
    }

    // Frames: scenario (ENU at the configured origin), ENU_k at each agent's
    // first fix, local_k = agent k's first camera frame in metres, cluster =
    // the central agent's local frame.
    let to_enu = |fix: &GnssFix| -> Result<Pose> {
        let r = quat_from_matrix(&enu_frame_rotation(&world_origin, fix));
        let o = enu_from_geodetic(fix, &world_origin)?.to_vector();
        Ok(Pose::new(r, -(r * o)))
    };
    let central = config.agents.central;
    let world_to_cluster = raws[central].poses[0].inverse();
    let clean_central = {
        let cw2e = to_enu(&raws[central].clean_fix)?;
        registration_of(
            central,
            &raws[central].poses[0],
            &cw2e,
            raws[central].clean_fix,
            raws[central].scale,
            central,
        )
    };

    let mut agents = Vec::with_capacity(raws.len());
    let mut streams = Vec::with_capacity(raws.len());
    let mut check = SelfCheck {
        geodetic_resolution: geodetic_resolution(&world_origin),
        ..SelfCheck::default()
    };
    let mut clean_agents = Vec::with_capacity(raws.len());
    for (a, raw) in raws.iter().enumerate() {
        let w2e = to_enu(&raw.origin_fix)?;
        let enu_poses: Vec<Pose> = raw.poses.iter().map(|p| w2e.compose(p)).collect();
        let local_poses: Vec<Pose> = raw.poses.iter().map(|p| raw.poses[0].between(p)).collect();
        let core = if a == central {
            Pose::identity()
        } else {
            world_to_cluster.compose(&raw.poses[0])
        };
        let registration = registration_of(a, &raw.poses[0], &w2e, raw.origin_fix, raw.scale, central);
        let tracks = generate_tracks(
            world,
            &raw.poses
                .iter()
                .enumerate()
                .map(|(i, p)| (i as FrameId, *p))
                .collect::<Vec<_>>(),
            &config.agents.camera,
            &TrackNoise {
                pixel_sigma: config.noise.pixel_sigma,
                seed: config.seed ^ (a as u64 + 1).wrapping_mul(0x7452_4143_4b53),
            },
        );

        // Noise-free checks.
        let cw2e = to_enu(&raw.clean_fix)?;
        let clean_enu: Vec<Pose> = raw.poses.iter().map(|p| cw2e.compose(p)).collect();
        check_agent(
            raw.scale,
            &raw.clean_vo,
            &raw.clean_gnss,
            &raw.clean_fix,
            &clean_enu,
            &mut check,
        )?;
        check_visual(world, &raw.poses, &config.agents.camera, &mut check)?;
        let clean_reg = registration_of(a, &raw.poses[0], &cw2e, raw.clean_fix, raw.scale, central);
        let chain = relative_transform_to_central(&clean_reg, &clean_central)?;
        check.core_chain = check
            .core_chain
            .max(chain.rotation.angle_to(&core.rotation) + (chain.translation - core.translation).norm());
        clean_agents.push((core, local_poses.clone()));

        agents.push(AgentTruth {
            agent: a as u32,
            timestamps: raw.times.clone(),
            poses: raw.poses.clone(),
            scale: raw.scale,
            registration,
            world_to_enu: w2e,
            enu_poses,
            local_poses,
            core,
        });
        streams.push(AgentStreams {
            agent: a as u32,
            vo: raw.vo.clone(),
            gnss: raw.gnss.clone(),
            tracks,
        });
    }
    check_relative(&clean_agents, &mut check);

    let truth = GroundTruth {
        central,
        agents,
        world_to_cluster,
    };
    verify(&check)?;
    Ok((truth, streams, check))
}

fn registration_of(
    agent: usize,
    first: &Pose,
    world_to_enu: &Pose,
    origin: GnssFix,
    scale: f64,
    central: usize,
) -> AgentRegistration {
    let first = world_to_enu.compose(first);
    AgentRegistration {
        agent: agent as u32,
        r_lw: first.rotation,
        local_origin: first.translation,
        gnss_origin: origin,
        scale,
        is_central: agent == central,
    }
}

fn check_agent(
    scale: f64,
    vo: &[(f64, Pose)],
    gnss: &[GnssFix],
    origin: &GnssFix,
    enu: &[Pose],
    check: &mut SelfCheck,
) -> Result<()> {
    let samples: Vec<AlignedSample> = vo
        .iter()
        .zip(gnss)
        .map(|(v, g)| {
            Ok(AlignedSample {
                timestamp: v.0,
                local_pose: v.1,
                enu_observation: enu_from_geodetic(g, origin)?,
            })
        })
        .collect::<Result<_>>()?;
    for k in 0..samples.len() {
        let g = gnss_residual(&samples[k], &samples[0], &enu[k].translation, scale, 1e-3);
        check.gnss_position = check.gnss_position.max(g.e_g.norm());
        if let Some(es) = g.e_s {
            // Relative to the displacement so the bound is unit free.
            let disp = (samples[k].gnss() - samples[0].gnss()).norm();
            check.gnss_scale = check.gnss_scale.max(es.abs() * disp / scale);
        }
        if k > 0 {
            let e = vo_edge_residual(&samples[k - 1], &samples[k], &enu[k - 1], &enu[k], scale);
            check.vo_edge = check.vo_edge.max(e.norm());
        }
    }
    if let Ok(s) = init_scale(&samples) {
        let disp = (samples[samples.len() - 1].gnss() - samples[0].gnss()).norm();
        check.scale_init = check.scale_init.max((s - scale).abs() * disp / scale);
    }
    Ok(())
}

fn check_visual(
    world: &SyntheticWorld,
    poses: &[Pose],
    camera: &crate::camera::PinholeCamera,
    check: &mut SelfCheck,
) -> Result<()> {
    // A handful of frame pairs is enough to exercise the family.
    let stride = (poses.len() / 4).max(1);
    for i in (0..poses.len().saturating_sub(1)).step_by(stride) {
        let j = i + 1;
        let (ii, jj) = (poses[i].inverse(), poses[j].inverse());
        for lm in world.landmarks.iter().take(4000) {
            let (pi, pj) = (ii.transform_point(&lm.position), jj.transform_point(&lm.position));
            let (Some(a), Some(b)) = (camera.project(&pi), camera.project(&pj)) else {
                continue;
            };
            if !camera.in_image(&a) || !camera.in_image(&b) {
                continue;
            }
            let oi = Vector2::new(pi.x / pi.z, pi.y / pi.z);
            let oj = Vector2::new(pj.x / pj.z, pj.y / pj.z);
            let e = visual_residual(&oi, &oj, pi.z, &poses[i], &poses[j])?;
            check.visual = check.visual.max(e.norm());
        }
    }
    Ok(())
}

fn check_relative(agents: &[(Pose, Vec<Pose>)], check: &mut SelfCheck) {
    for (a, (core_a, pa)) in agents.iter().enumerate() {
        for (core_b, pb) in agents.iter().skip(a + 1) {
            for (i, j) in [(0, 0), (pa.len() / 2, pb.len() / 2), (pa.len() - 1, pb.len() - 1)] {
                let (x, y) = (&pa[i], &pb[j]);
                let chain = chained_relative_pose(x, y, core_a, core_b);
                let (ca, cb) = (core_a.compose(x), core_b.compose(y));
                let q = ca.rotation * cb.rotation.inverse();
                let t = core_a.rotation.inverse() * (ca.translation - cb.translation);
                let err = chain.rotation.angle_to(&q) + (chain.translation - t).norm();
                check.relative_pose = check.relative_pose.max(err);
            }
        }
    }
}

fn verify(c: &SelfCheck) -> Result<()> {
    let tol = 1e-10;
    // Degree-valued fixes cannot carry positions finer than their ulp.
    let geo = tol + 4.0 * c.geodetic_resolution;
    let items = [
        ("visual", c.visual, tol),
        ("vo edge", c.vo_edge, tol),
        ("gnss position", c.gnss_position, geo),
        ("gnss scale", c.gnss_scale, geo),
        ("scale init", c.scale_init, geo),
        ("relative pose", c.relative_pose, tol),
        ("core chain", c.core_chain, geo),
    ];
    for (name, v, bound) in items {
        if !(v <= bound) {
            return Err(Error::Invariant(format!(
                "generator self-check: {} residual {:e} exceeds {:e}",
                name, v, bound
            )));
        }
    }
    Ok(())
}
