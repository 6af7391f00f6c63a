//! One agent's on-board pipeline: VO in, GNSS fusion, virtual-stereo
//! densification and batched uploads out.

use std::time::{Duration, Instant};

use clusterfusion_core::camera::PinholeCamera;
use clusterfusion_core::densify::{
    backproject, build_virtual_stereo, synthetic_depth, DepthMap, DepthProvider, VirtualStereoPair,
};
use clusterfusion_core::geom::Pose;
use clusterfusion_core::gnss::{metric, GnssConfig, GnssFusion};
use clusterfusion_core::relpose::CoreTransforms;
use clusterfusion_core::scenario::{AgentStreams, ScenarioConfig, SyntheticWorld};
use clusterfusion_core::vo::{solve_window_ba, triangulate_window, FrameId, VoConfig, VoWindow};
use clusterfusion_core::wire::{FrameRecord, Message};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Registration is re-sent this often (frames) so a lost one is replaced.
const REGISTRATION_EVERY: usize = 10;

/// Depth from the real scene, as a stereo matcher would measure it. It looks
/// up the true pose of the frame; the agent's own estimate is only used to
/// lift the depths into its map.
pub struct SceneDepth<'a> {
    pub world: &'a SyntheticWorld,
    /// True camera-to-world poses by frame.
    pub poses: &'a [Pose],
}

impl DepthProvider for SceneDepth<'_> {
    fn depth(
        &self,
        pair: &VirtualStereoPair,
        _: &Pose,
        camera: &PinholeCamera,
    ) -> clusterfusion_core::Result<DepthMap> {
        let frame = pair.frames.0;
        let pose = self
            .poses
            .get(frame as usize)
            .ok_or_else(|| clusterfusion_core::Error::Contract(format!("no scene pose for frame {}", frame)))?;
        Ok(synthetic_depth(frame, pose, camera, self.world))
    }
}

pub(crate) struct AgentNode {
    pub id: u32,
    pub fusion: GnssFusion,
    pub vo: Vec<(f64, Pose)>,
    sample_of_frame: Vec<Option<usize>>,
    gnss_cursor: usize,
    pending: Vec<usize>,
    pub densified: Vec<FrameId>,
    pub skipped_pairs: usize,
    upload: Vec<Vector3<f64>>,
    last_flush: f64,
    poses_sent: usize,
    reg_sent: bool,
    pub silent: bool,
    pub cores: Option<(u64, CoreTransforms)>,
    pub points_uploaded: usize,
    pub gnss_time: Duration,
    pub densify_time: Duration,
}

impl AgentNode {
    pub fn new(id: u32, is_central: bool, config: &ScenarioConfig) -> Self {
        let gnss = GnssConfig {
            gnss_sigma_m: config.noise.gnss_sigma_m,
            window: config.pipeline.gnss_window,
            rotation_weight: config.pipeline.vo_rotation_info,
            translation_weight: config.pipeline.vo_translation_info,
            ..GnssConfig::default()
        };
        Self {
            id,
            fusion: GnssFusion::new(id, is_central, gnss),
            vo: Vec::new(),
            sample_of_frame: Vec::new(),
            gnss_cursor: 0,
            pending: Vec::new(),
            densified: Vec::new(),
            skipped_pairs: 0,
            upload: Vec::new(),
            last_flush: 0.0,
            poses_sent: 0,
            reg_sent: false,
            silent: false,
            cores: None,
            points_uploaded: 0,
            gnss_time: Duration::ZERO,
            densify_time: Duration::ZERO,
        }
    }

    /// Current ENU estimate of a frame already seen: the fused pose if the
    /// frame has a GNSS sample, otherwise its VO pose through the current
    /// registration. `None` until the scale has been solved once.
    pub fn enu_estimate(&self, frame: usize) -> Option<Pose> {
        if self.fusion.scale_trace().is_empty() || frame >= self.vo.len() {
            return None;
        }
        match self.sample_of_frame[frame] {
            Some(s) => Some(self.fusion.world_poses()[s]),
            None => Some(self.fusion.registration()?.world_pose(&self.vo[frame].1)),
        }
    }

    /// The VO pose of a frame in metres, at the current scale. This is the
    /// agent frame the central node's core transforms start from.
    pub fn local_estimate(&self, frame: usize) -> Option<Pose> {
        if self.fusion.scale_trace().is_empty() || frame >= self.vo.len() {
            return None;
        }
        Some(metric(&self.vo[frame].1, self.fusion.registration()?.scale))
    }

    pub fn on_frame(
        &mut self,
        frame: usize,
        now: f64,
        config: &ScenarioConfig,
        stream: &AgentStreams,
        scene: &SceneDepth<'_>,
        out: &mut Vec<Message>,
    ) -> Result<()> {
        let started = Instant::now();
        let (t, mut vo) = stream.vo[frame];
        if config.pipeline.bundle_adjust {
            vo = self.adjust(frame, stream);
        }
        self.fusion.push_vo(t, vo)?;
        self.vo.push((t, vo));
        self.sample_of_frame.push(None);
        while let Some(fix) = stream.gnss.get(self.gnss_cursor) {
            if fix.timestamp > t {
                break;
            }
            self.gnss_cursor += 1;
            if self.fusion.push_gnss(fix)? && fix.timestamp == t {
                self.sample_of_frame[frame] = Some(self.fusion.samples().len() - 1);
            }
        }
        self.gnss_time += started.elapsed();

        let last = frame + 1 == stream.vo.len();
        if let Some(reg) = self.fusion.registration() {
            if frame % REGISTRATION_EVERY == 0 || last || !self.reg_sent {
                out.push(Message::RegistrationUpdate(*reg));
                self.reg_sent = true;
            }
        }
        // Poses are only trusted once the path pins down the rotation.
        if self.fusion.is_conditioned() || last {
            self.send_poses(frame, config, out);
        }

        if config.pipeline.densify && frame % config.pipeline.densify_every == 0 {
            self.pending.push(frame);
        }
        if self.fusion.is_conditioned() || last {
            self.densify_pending(config, scene)?;
        }
        self.flush_uploads(now, last, config, out);
        if last
            && config
                .agents
                .stop_after_s
                .get(self.id as usize)
                .copied()
                .flatten()
                .is_some()
        {
            // A stopped agent just goes quiet.
            self.silent = true;
        } else if last {
            out.push(Message::AgentDone);
        }
        Ok(())
    }

    /// Windowed BA over the newest frames. Only the newest pose is taken
    /// from the solve; older ones have already gone into the GNSS window.
    fn adjust(&self, frame: usize, stream: &AgentStreams) -> Pose {
        let raw = stream.vo[frame].1;
        if frame == 0 {
            return raw;
        }
        let guess = self.vo[frame - 1].1.compose(&stream.vo[frame - 1].1.between(&raw));
        let config = VoConfig::default();
        let lo = (frame + 1).saturating_sub(config.window_size);
        let inside = |f: FrameId| (lo as FrameId..=frame as FrameId).contains(&f);
        let mut frames: Vec<(FrameId, Pose)> = (lo..frame).map(|f| (f as FrameId, self.vo[f].1)).collect();
        frames.push((frame as FrameId, guess));
        let tracks = stream
            .tracks
            .iter()
            .filter(|t| t.observations.iter().filter(|o| inside(o.frame)).count() >= 2)
            .map(|t| t.restricted(inside))
            .collect();
        let mut window = VoWindow {
            frames,
            tracks,
            anchor: lo as FrameId,
        };
        triangulate_window(&mut window, config.min_parallax_deg);
        match solve_window_ba(&window, &config) {
            Ok((w, _)) => *w.pose(frame as FrameId).unwrap_or(&guess),
            Err(_) => guess,
        }
    }

    fn send_poses(&mut self, upto: usize, config: &ScenarioConfig, out: &mut Vec<Message>) {
        let Some(scale) = self.fusion.registration().map(|r| r.scale) else {
            return;
        };
        while self.poses_sent <= upto {
            let f = self.poses_sent;
            if f % config.pipeline.pose_update_every == 0 || f == upto {
                let Some(pose) = self.local_estimate(f) else {
                    return;
                };
                out.push(Message::PoseUpdate {
                    agent: self.id,
                    timestamp: self.vo[f].0,
                    pose,
                    scale,
                });
            }
            self.poses_sent += 1;
        }
    }

    fn densify_pending(&mut self, config: &ScenarioConfig, scene: &SceneDepth<'_>) -> Result<()> {
        let started = Instant::now();
        let camera = &config.agents.camera;
        let min_baseline = 0.02 * config.agents.altitude_m;
        let pending = std::mem::take(&mut self.pending);
        for (k, &f) in pending.iter().enumerate() {
            let partner = if f > 0 { f - 1 } else { 1 };
            let (Some(pi), Some(pj)) = (self.local_estimate(f), self.local_estimate(partner)) else {
                self.pending.extend_from_slice(&pending[k..]);
                break;
            };
            let pair = match build_virtual_stereo((f as FrameId, partner as FrameId), &pi, &pj, camera, min_baseline) {
                Ok(p) => p,
                Err(_) => {
                    self.skipped_pairs += 1;
                    continue;
                }
            };
            let depth = scene.depth(&pair, &pi, camera)?;
            self.upload
                .extend(backproject(&depth, &pi, camera, config.fusion.stride as u32));
            self.densified.push(f as FrameId);
        }
        self.densify_time += started.elapsed();
        Ok(())
    }

    fn flush_uploads(&mut self, now: f64, force: bool, config: &ScenarioConfig, out: &mut Vec<Message>) {
        let cap = config.pipeline.upload_max_points;
        let due = force || now - self.last_flush >= config.pipeline.upload_period_s;
        while self.upload.len() >= cap || (due && !self.upload.is_empty()) {
            let n = self.upload.len().min(cap);
            let points: Vec<Vector3<f64>> = self.upload.drain(..n).collect();
            self.points_uploaded += points.len();
            out.push(Message::TileUpload {
                agent: self.id,
                timestamp: now,
                points,
            });
        }
        if due {
            self.last_flush = now;
        }
    }

    /// Records for the requested frames this agent can vouch for. A fraction
    /// of feature positions is scrambled to model mismatches; the scramble
    /// depends only on the frame, so repeated requests see the same data.
    pub fn answer(&self, frames: &[FrameId], config: &ScenarioConfig, stream: &AgentStreams) -> Option<Message> {
        if self.silent {
            return None;
        }
        let camera = &config.agents.camera;
        let (hw, hh) = (0.5 * camera.normalized_width(), 0.5 * camera.normalized_height());
        let records: Vec<FrameRecord> = frames
            .iter()
            .filter_map(|&f| {
                let pose = self.local_estimate(f as usize)?;
                let scale = self.fusion.registration()?.scale;
                let mut rng = ChaCha8Rng::seed_from_u64(
                    config.seed ^ ((self.id as u64) << 32 | f as u64).wrapping_mul(0x9E37_79B9),
                );
                let features = stream
                    .frame_features(f)
                    .into_iter()
                    .map(|(id, p)| {
                        let scramble = rng.random::<f64>() < config.noise.outlier_fraction;
                        let (u, v) = (rng.random_range(-hw..hw), rng.random_range(-hh..hh));
                        if scramble {
                            (id, u, v)
                        } else {
                            (id, p.x, p.y)
                        }
                    })
                    .collect();
                Some(FrameRecord {
                    frame: f,
                    timestamp: self.vo[f as usize].0,
                    pose,
                    scale,
                    features,
                })
            })
            .collect();
        (!records.is_empty()).then_some(Message::CandidateResponse {
            agent: self.id,
            records,
        })
    }
}
