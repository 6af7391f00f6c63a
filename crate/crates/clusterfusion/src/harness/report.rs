use std::collections::BTreeMap;

use clusterfusion_core::wire::{BandwidthLedger, Variant};
use serde::{Deserialize, Serialize};

/// Everything a run produces that depends only on the config. Serializing
/// the same run twice gives identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub agents: Vec<AgentReport>,
    pub relative_pose: RelPoseReport,
    pub fusion: FusionReport,
    pub messages: MessageReport,
    pub simulation: SimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: u32,
    pub central: bool,
    pub frames: usize,
    pub gnss_samples: usize,
    pub stopped: bool,
    pub true_scale: f64,
    pub final_scale: Option<f64>,
    /// `|s − s_true| / s_true`.
    pub scale_error: Option<f64>,
    pub scale_trace: Vec<ScalePoint>,
    pub ate: AteReport,
    pub frames_densified: usize,
    pub points_uploaded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    /// Number of aligned samples when the estimate was made.
    pub samples: usize,
    pub timestamp: f64,
    pub scale: f64,
}

/// Absolute trajectory errors in metres, one per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    /// VO stream after the best similarity alignment to truth.
    pub vo_similarity: Option<f64>,
    /// Fused poses in the agent's ENU frame, no alignment.
    pub gnss: Option<f64>,
    /// Cluster-frame poses through the GNSS-prior core.
    pub cluster_prior: Option<f64>,
    /// Cluster-frame poses through the refined core.
    pub cluster_refined: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_m: f64,
    pub rotation_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelPoseReport {
    pub pairs_requested: usize,
    pub pairs_failed: usize,
    pub observations: usize,
    pub refinements: usize,
    /// Mean chained relative-pose error over the observed pairs.
    pub prior: Option<PoseError>,
    pub refined: Option<PoseError>,
    pub cores: BTreeMap<u32, CoreReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreReport {
    pub known: bool,
    pub prior: Option<PoseError>,
    pub refined: Option<PoseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub tiles: usize,
    pub fused_points: usize,
    pub points_received: usize,
    pub points_merged: usize,
    pub points_rejected: usize,
    /// Uploads from agents whose core never became known.
    pub points_unfused: usize,
    pub points_filtered: usize,
    pub occupied_voxels: usize,
    pub truth_voxels: usize,
    pub missing_voxels: usize,
    pub extra_voxels: usize,
    pub voxel_set_equal: bool,
    pub evictions: usize,
    pub reloads: usize,
    pub peak_resident_points: usize,
    pub accuracy: Option<AccuracyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub queries: usize,
    pub fallbacks: usize,
    pub thresholds_m: Vec<f64>,
    pub fractions: Vec<f64>,
    pub mean_m: f64,
    pub median_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantStats {
    pub count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub variants: BTreeMap<String, VariantStats>,
    pub total_count: u64,
    pub total_bytes: u64,
}

impl Traffic {
    pub fn from_ledger(l: &BandwidthLedger) -> Self {
        let variants = Variant::ALL
            .iter()
            .map(|v| {
                let s = VariantStats {
                    count: l.counts.get(v).copied().unwrap_or(0),
                    bytes: l.bytes.get(v).copied().unwrap_or(0),
                };
                (v.name().to_string(), s)
            })
            .collect();
        Self {
            variants,
            total_count: l.counts.values().sum(),
            total_bytes: l.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReport {
    /// Frames that crossed a link, including the ones it then lost.
    pub network: Traffic,
    pub dropped: Traffic,
    /// Frames between the central agent and the central node, which share
    /// a machine.
    pub local: Traffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub last_frame_s: f64,
    /// Arrival of the last map data at the central node.
    pub completion_s: f64,
    pub end_s: f64,
    pub events: u64,
}

/// Wall-clock timings. They vary between runs, so they live beside the
/// report rather than in it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub generation_s: f64,
    pub agent_gnss_s: f64,
    pub agent_densify_s: f64,
    pub central_fusion_s: f64,
    pub central_refine_s: f64,
    pub evaluation_s: f64,
    /// Central fusion and refinement per fused point, microseconds.
    pub central_us_per_point: f64,
}

/// One row of the trajectory trace CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub agent: u32,
    pub frame: u32,
    pub timestamp: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub true_z: f64,
    pub error_m: f64,
}
