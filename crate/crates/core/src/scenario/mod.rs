//! Scenario configuration, synthetic world and ground-truth sensor streams.

mod truth;
mod world;

pub use truth::{generate_truth, AgentStreams, AgentTruth, GroundTruth, SelfCheck};
pub use world::{generate_world, HeightField, Landmark, SyntheticWorld};

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::geom::GnssFix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Geodetic anchor of the world ENU frame.
    pub origin: GeoOrigin,
    pub world: WorldConfig,
    pub agents: AgentsConfig,
    pub noise: NoiseConfig,
    pub transport: TransportConfig,
    pub fusion: FusionConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            origin: GeoOrigin::default(),
            world: WorldConfig::default(),
            agents: AgentsConfig::default(),
            noise: NoiseConfig::default(),
            transport: TransportConfig::default(),
            fusion: FusionConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoOrigin {
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
}

impl Default for GeoOrigin {
    fn default() -> Self {
        Self {
            latitude: 34.25,
            longitude: 108.95,
            altitude: 400.0,
        }
    }
}

impl GeoOrigin {
    pub fn fix(&self) -> GnssFix {
        GnssFix::new(0.0, self.latitude, self.longitude, self.altitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// East and north extent in metres; the world spans `[0, e] × [0, n]`.
    pub extent_m: [f64; 2],
    pub ground_height_m: f64,
    pub amplitude_m: f64,
    pub height_seed: u64,
    /// Landmarks per square metre.
    pub landmark_density: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent_m: [480.0, 420.0],
            // Mid-voxel for the default 0.2 m voxel, away from cell faces.
            ground_height_m: 0.1,
            amplitude_m: 0.0,
            height_seed: 7,
            landmark_density: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryPattern {
    /// East-west survey lanes split into contiguous bands, one per agent.
    Lawnmower {
        /// Fraction of the north-south footprint shared by adjacent lanes.
        side_overlap: f64,
        /// Margin kept from the world border, metres.
        margin_m: f64,
    },
    /// Explicit `[east, north]` waypoints per agent, flown at the configured
    /// altitude.
    Waypoints { per_agent: Vec<Vec<[f64; 2]>> },
}

impl Default for TrajectoryPattern {
    fn default() -> Self {
        TrajectoryPattern::Lawnmower {
            side_overlap: 0.35,
            margin_m: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    pub count: usize,
    pub altitude_m: f64,
    pub speed_mps: f64,
    pub frame_interval_s: f64,
    pub camera: PinholeCamera,
    pub pattern: TrajectoryPattern,
    /// Injected VO scale per agent (`metres = s · vo units`). Drawn from the
    /// seed when empty.
    pub vo_scales: Vec<f64>,
    /// Amplitude of the attitude wobble, degrees.
    pub wobble_deg: f64,
    /// Optional per-agent stop time, seconds; the agent goes silent after it.
    pub stop_after_s: Vec<Option<f64>>,
    /// Index of the central agent.
    pub central: usize,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            count: 3,
            altitude_m: 100.0,
            speed_mps: 10.0,
            frame_interval_s: 1.0,
            camera: PinholeCamera::new(320, 240, 250.0, 250.0, 160.0, 120.0),
            pattern: TrajectoryPattern::default(),
            vo_scales: Vec::new(),
            wobble_deg: 2.0,
            stop_after_s: Vec::new(),
            central: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub gnss_sigma_m: f64,
    /// Observation noise in normalized image-plane units.
    pub pixel_sigma: f64,
    pub gnss_dropout_prob: f64,
    /// Per-agent constant horizontal GNSS bias, standard deviation in metres.
    pub gnss_bias_m: f64,
    /// VO translation drift as a fraction of distance travelled.
    pub vo_drift: f64,
    /// Fraction of cross-agent correspondences replaced by gross outliers.
    pub outlier_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gnss_sigma_m: 0.0,
            pixel_sigma: 0.0,
            gnss_dropout_prob: 0.0,
            gnss_bias_m: 0.0,
            vo_drift: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.gnss_sigma_m == 0.0
            && self.pixel_sigma == 0.0
            && self.gnss_dropout_prob == 0.0
            && self.gnss_bias_m == 0.0
            && self.vo_drift == 0.0
            && self.outlier_fraction == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub latency_ms: f64,
    /// Uniform jitter added on top of the base latency.
    pub latency_jitter_ms: f64,
    pub bandwidth_bps: f64,
    pub drop_prob: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            latency_ms: 50.0,
            latency_jitter_ms: 20.0,
            bandwidth_bps: 2.0e6,
            drop_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_c: f64,
    pub voxel: f64,
    pub overlap_threshold: f64,
    pub activity_horizon_s: f64,
    pub stride: usize,
    pub outlier_k: usize,
    pub outlier_std: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_c: 50.0,
            voxel: 0.2,
            overlap_threshold: 0.4,
            activity_horizon_s: 30.0,
            stride: 4,
            outlier_k: 8,
            outlier_std: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Aligned samples per GNSS optimization window.
    pub gnss_window: usize,
    /// Information of the VO edges in the GNSS window, rad⁻² and m⁻².
    /// The simulated VO rotation is exact, so rotation is trusted more
    /// than the library default.
    pub vo_rotation_info: f64,
    pub vo_translation_info: f64,
    /// Densify every n-th frame.
    pub densify_every: usize,
    /// Run windowed bundle adjustment on the VO stream.
    pub bundle_adjust: bool,
    /// Re-run pair refinement after this many new observations.
    pub refine_every: usize,
    pub min_inliers: usize,
    /// Upload flush period (simulated seconds) and point cap.
    pub upload_period_s: f64,
    pub upload_max_points: usize,
    pub pose_update_every: usize,
    /// Statistical outlier removal on the final map.
    pub filter_outliers: bool,
    /// Densify and upload point clouds at all.
    pub densify: bool,
    /// RANSAC inlier threshold, normalized image units.
    pub ransac_threshold: f64,
    /// Period of the central node's candidate search and eviction tick.
    pub central_tick_s: f64,
    pub max_pairs_per_tick: usize,
    /// Cap on homography pairs per agent pair over the whole run.
    pub max_pairs_per_agent_pair: usize,
    /// Ticks keep running this long after the last frame so lost requests
    /// can be retried.
    pub finish_grace_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gnss_window: 50,
            vo_rotation_info: 1e4,
            vo_translation_info: 25.0,
            densify_every: 1,
            bundle_adjust: false,
            refine_every: 10,
            min_inliers: 20,
            upload_period_s: 1.0,
            upload_max_points: 10_000,
            pose_update_every: 1,
            filter_outliers: false,
            densify: true,
            ransac_threshold: 0.005,
            central_tick_s: 2.0,
            max_pairs_per_tick: 6,
            max_pairs_per_agent_pair: 60,
            finish_grace_s: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Neighbours for the plane fit of the accuracy metric.
    pub accuracy_k: usize,
    /// At most this many map points are scored; 0 skips the metric.
    pub accuracy_query_cap: usize,
    pub thresholds_m: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            accuracy_k: 8,
            accuracy_query_cap: 50_000,
            thresholds_m: alloc::vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid config: {}", what)))
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn probability(v: f64) -> bool {
    v.is_finite() && (0.0..=1.0).contains(&v)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.origin
            .fix()
            .validate()
            .map_err(|e| Error::Config(format!("origin: {}", e)))?;
        let w = &self.world;
        check(
            positive(w.extent_m[0]) && positive(w.extent_m[1]),
            "world.extent_m must be positive",
        )?;
        check(w.ground_height_m.is_finite(), "world.ground_height_m must be finite")?;
        check(
            w.amplitude_m.is_finite() && w.amplitude_m >= 0.0,
            "world.amplitude_m must be >= 0",
        )?;
        check(
            w.landmark_density.is_finite() && w.landmark_density >= 0.0,
            "world.landmark_density must be >= 0",
        )?;
        check(
            w.extent_m[0] * w.extent_m[1] * w.landmark_density <= 5.0e6,
            "too many landmarks",
        )?;

        let a = &self.agents;
        check(a.count >= 1 && a.count <= 64, "agents.count must be in 1..=64")?;
        check(a.central < a.count, "agents.central must index an agent")?;
        check(positive(a.altitude_m), "agents.altitude_m must be positive")?;
        check(
            a.altitude_m > w.ground_height_m + w.amplitude_m,
            "agents fly below the terrain",
        )?;
        check(positive(a.speed_mps), "agents.speed_mps must be positive")?;
        check(positive(a.frame_interval_s), "agents.frame_interval_s must be positive")?;
        a.camera.validate()?;
        check(
            a.camera.width as u64 * a.camera.height as u64 <= 4_000_000,
            "camera too large",
        )?;
        check(
            a.vo_scales.is_empty() || a.vo_scales.len() == a.count,
            "agents.vo_scales length",
        )?;
        check(
            a.vo_scales.iter().all(|s| positive(*s)),
            "agents.vo_scales must be positive",
        )?;
        check(
            a.stop_after_s.is_empty() || a.stop_after_s.len() == a.count,
            "agents.stop_after_s length",
        )?;
        check(
            a.wobble_deg.is_finite() && a.wobble_deg.abs() < 30.0,
            "agents.wobble_deg",
        )?;
        match &a.pattern {
            TrajectoryPattern::Lawnmower { side_overlap, margin_m } => {
                check(
                    side_overlap.is_finite() && (0.0..0.95).contains(side_overlap),
                    "side_overlap in [0, 0.95)",
                )?;
                check(margin_m.is_finite() && *margin_m >= 0.0, "margin_m must be >= 0")?;
            }
            TrajectoryPattern::Waypoints { per_agent } => {
                check(per_agent.len() == a.count, "one waypoint list per agent")?;
                check(
                    per_agent.iter().all(|l| l.len() >= 2),
                    "at least two waypoints per agent",
                )?;
            }
        }

        let n = &self.noise;
        check(
            n.gnss_sigma_m.is_finite() && n.gnss_sigma_m >= 0.0,
            "noise.gnss_sigma_m",
        )?;
        check(n.gnss_bias_m.is_finite() && n.gnss_bias_m >= 0.0, "noise.gnss_bias_m")?;
        check(n.pixel_sigma.is_finite() && n.pixel_sigma >= 0.0, "noise.pixel_sigma")?;
        check(
            probability(n.gnss_dropout_prob) && n.gnss_dropout_prob < 1.0,
            "noise.gnss_dropout_prob",
        )?;
        check(
            n.vo_drift.is_finite() && n.vo_drift >= 0.0 && n.vo_drift < 0.5,
            "noise.vo_drift",
        )?;
        check(
            probability(n.outlier_fraction) && n.outlier_fraction < 0.9,
            "noise.outlier_fraction",
        )?;

        let t = &self.transport;
        check(t.latency_ms.is_finite() && t.latency_ms >= 0.0, "transport.latency_ms")?;
        check(
            t.latency_jitter_ms.is_finite() && t.latency_jitter_ms >= 0.0,
            "transport.latency_jitter_ms",
        )?;
        check(positive(t.bandwidth_bps), "transport.bandwidth_bps")?;
        check(probability(t.drop_prob) && t.drop_prob < 1.0, "transport.drop_prob")?;

        let f = &self.fusion;
        check(
            positive(f.d_c) && positive(f.voxel) && f.voxel <= f.d_c,
            "fusion.d_c / fusion.voxel",
        )?;
        check(
            f.overlap_threshold > 0.0 && f.overlap_threshold < 1.0,
            "fusion.overlap_threshold in (0, 1)",
        )?;
        check(positive(f.activity_horizon_s), "fusion.activity_horizon_s")?;
        check(
            f.stride >= 1 && f.outlier_k >= 1 && positive(f.outlier_std),
            "fusion.stride / outlier settings",
        )?;

        let p = &self.pipeline;
        check(p.gnss_window >= 3, "pipeline.gnss_window >= 3")?;
        check(
            p.densify_every >= 1 && p.refine_every >= 1 && p.pose_update_every >= 1,
            "pipeline periods >= 1",
        )?;
        check(p.min_inliers >= 4, "pipeline.min_inliers >= 4")?;
        check(
            positive(p.upload_period_s) && p.upload_max_points >= 1,
            "pipeline upload settings",
        )?;
        check(positive(p.ransac_threshold), "pipeline.ransac_threshold")?;
        check(positive(p.central_tick_s), "pipeline.central_tick_s")?;
        check(
            positive(p.vo_rotation_info) && positive(p.vo_translation_info),
            "pipeline VO information must be positive",
        )?;
        check(
            p.max_pairs_per_tick >= 1 && p.max_pairs_per_agent_pair >= 1,
            "pipeline pair caps >= 1",
        )?;
        check(
            p.finish_grace_s.is_finite() && p.finish_grace_s >= 0.0,
            "pipeline.finish_grace_s",
        )?;

        let e = &self.eval;
        check(e.accuracy_k >= 3, "eval.accuracy_k >= 3")?;
        check(e.thresholds_m.iter().all(|t| !t.is_nan()), "eval.thresholds_m")?;
        Ok(())
    }

    /// Width and height (metres) of a nadir footprint at flight altitude.
    pub fn footprint(&self) -> (f64, f64) {
        let h = self.agents.altitude_m - self.world.ground_height_m;
        (
            h * self.agents.camera.normalized_width(),
            h * self.agents.camera.normalized_height(),
        )
    }
}
