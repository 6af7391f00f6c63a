//! The central node: registrations and poses in, candidate search over the
//! agents' trajectories, homography observations, core refinement and map
//! fusion.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use clusterfusion_core::fusion::{transform_to_central, TileBackend, TileStore};
use clusterfusion_core::geom::{decompose_homography, Pose};
use clusterfusion_core::gnss::{relative_transform_to_central, AgentRegistration};
use clusterfusion_core::relpose::{
    camera_motion, candidate_pairs, desired_distance, estimate_homography, match_features, optimize_core_transforms,
    select_decomposition, CandidatePair, CoreTransforms, PoseObservation, RansacConfig, RefineConfig,
};
use clusterfusion_core::scenario::ScenarioConfig;
use clusterfusion_core::vo::FrameId;
use clusterfusion_core::wire::{FrameRecord, Message};
use nalgebra::{Vector2, Vector3};

use crate::Result;

/// Width of the baseline bearing bins candidate pairs are spread over.
const BEARING_BIN: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// `(agent a, frame a, agent b, frame b)` with `a < b`.
pub(crate) type PairKey = (u32, FrameId, u32, FrameId);

pub(crate) struct CentralNode<B: TileBackend> {
    pub id: u32,
    pub regs: BTreeMap<u32, AgentRegistration>,
    pub prior: CoreTransforms,
    pub cores: CoreTransforms,
    pub version: u64,
    /// Latest local pose per frame with the scale it was sent at.
    poses: BTreeMap<u32, BTreeMap<FrameId, (Pose, f64)>>,
    records: BTreeMap<(u32, FrameId), FrameRecord>,
    pending: BTreeSet<PairKey>,
    tried: BTreeSet<PairKey>,
    used_frames: BTreeSet<(u32, u32, u32, FrameId)>,
    pub observations: Vec<PoseObservation>,
    /// Scales the two record poses of each observation were sent at.
    observed_scales: Vec<(f64, f64)>,
    observed_at_refine: usize,
    pub pairs_failed: usize,
    pub refinements: usize,
    held: BTreeMap<u32, VecDeque<(f64, Vec<Vector3<f64>>)>>,
    pub store: TileStore<B>,
    pub points_received: usize,
    pub points_merged: usize,
    pub points_rejected: usize,
    pub peak_resident: usize,
    pub done: BTreeSet<u32>,
    pub last_data_s: f64,
    pub fusion_time: Duration,
    pub refine_time: Duration,
}

impl<B: TileBackend> CentralNode<B> {
    pub fn new(id: u32, store: TileStore<B>) -> Self {
        Self {
            id,
            regs: BTreeMap::new(),
            prior: CoreTransforms::new(id),
            cores: CoreTransforms::new(id),
            version: 0,
            poses: BTreeMap::new(),
            records: BTreeMap::new(),
            pending: BTreeSet::new(),
            tried: BTreeSet::new(),
            used_frames: BTreeSet::new(),
            observations: Vec::new(),
            observed_scales: Vec::new(),
            observed_at_refine: 0,
            pairs_failed: 0,
            refinements: 0,
            held: BTreeMap::new(),
            store,
            points_received: 0,
            points_merged: 0,
            points_rejected: 0,
            peak_resident: 0,
            done: BTreeSet::new(),
            last_data_s: 0.0,
            fusion_time: Duration::ZERO,
            refine_time: Duration::ZERO,
        }
    }

    pub fn core_known(&self, agent: u32) -> bool {
        self.cores.get(agent).is_some()
    }

    pub fn requested_pairs(&self) -> usize {
        self.pending.len() + self.tried.len()
    }

    pub fn held_points(&self) -> usize {
        self.held.values().flatten().map(|h| h.1.len()).sum()
    }

    /// Handles one inbound message; replies go to `out` as
    /// `(recipient, message)`.
    pub fn receive(
        &mut self,
        now: f64,
        message: Message,
        config: &ScenarioConfig,
        out: &mut Vec<(u32, Message)>,
    ) -> Result<()> {
        match message {
            Message::RegistrationUpdate(reg) => {
                self.regs.insert(reg.agent, reg);
                self.init_priors(now)?;
            }
            Message::PoseUpdate {
                agent,
                timestamp,
                pose,
                scale,
            } => {
                // Frames tick at a fixed interval, so the timestamp names the frame.
                let frame = (timestamp / config.agents.frame_interval_s).round() as FrameId;
                self.poses.entry(agent).or_default().insert(frame, (pose, scale));
            }
            Message::TileUpload {
                agent,
                timestamp,
                points,
            } => {
                self.points_received += points.len();
                self.last_data_s = self.last_data_s.max(now);
                self.held.entry(agent).or_default().push_back((timestamp, points));
                self.fuse_held(agent, now)?;
            }
            Message::CandidateResponse { agent, records } => {
                let started = Instant::now();
                for r in records {
                    self.records.insert((agent, r.frame), r);
                }
                self.process_ready(config)?;
                if self.observations.len() >= self.observed_at_refine + config.pipeline.refine_every {
                    self.refine(out)?;
                }
                self.refine_time += started.elapsed();
            }
            Message::AgentDone => {}
            Message::CandidateRequest { .. } | Message::RelPoseBroadcast { .. } => {}
        }
        Ok(())
    }

    pub fn mark_done(&mut self, agent: u32, now: f64) {
        self.done.insert(agent);
        self.last_data_s = self.last_data_s.max(now);
    }

    /// Priors follow the latest registrations. Cores take them until the
    /// first refinement.
    fn init_priors(&mut self, now: f64) -> Result<()> {
        let Some(central) = self.regs.get(&self.id).copied() else {
            return Ok(());
        };
        let agents: Vec<u32> = self.regs.keys().copied().collect();
        for a in agents {
            if a == self.id {
                continue;
            }
            let t = relative_transform_to_central(&self.regs[&a], &central)?;
            self.prior.set(a, t);
            if self.refinements == 0 || self.cores.get(a).is_none() {
                self.cores.set(a, t);
            }
            self.fuse_held(a, now)?;
        }
        Ok(())
    }

    fn fuse_held(&mut self, agent: u32, now: f64) -> Result<()> {
        let Some(core) = self.cores.get(agent) else {
            return Ok(());
        };
        let started = Instant::now();
        let inv = core.inverse();
        while let Some((_, points)) = self.held.get_mut(&agent).and_then(|q| q.pop_front()) {
            let central = transform_to_central(&points, &inv);
            let report = self.store.insert(&central, None, now)?;
            self.points_merged += report.merged;
            self.points_rejected += report.rejected;
            self.peak_resident = self.peak_resident.max(self.store.resident_points());
        }
        self.fusion_time += started.elapsed();
        Ok(())
    }

    /// Candidate search plus re-requests for records still missing.
    pub fn tick(&mut self, now: f64, config: &ScenarioConfig, out: &mut Vec<(u32, Message)>) -> Result<()> {
        let started = Instant::now();
        self.store.evict_inactive(now)?;
        let footprint = config.footprint();
        let altitude = config.agents.altitude_m - config.world.ground_height_m;
        let desired = desired_distance(config.fusion.overlap_threshold, &config.agents.camera, altitude)?;
        let known: Vec<u32> = self.poses.keys().copied().filter(|a| self.core_known(*a)).collect();
        for (i, &a) in known.iter().enumerate() {
            for &b in &known[i + 1..] {
                self.search(a, b, desired, footprint, config);
            }
        }
        let mut wanted: BTreeMap<u32, BTreeSet<FrameId>> = BTreeMap::new();
        for &(a, fa, b, fb) in &self.pending {
            for (agent, frame) in [(a, fa), (b, fb)] {
                if !self.records.contains_key(&(agent, frame)) {
                    wanted.entry(agent).or_default().insert(frame);
                }
            }
        }
        for (agent, frames) in wanted {
            out.push((
                agent,
                Message::CandidateRequest {
                    agent,
                    frames: frames.into_iter().collect(),
                },
            ));
        }
        self.refine_time += started.elapsed();
        Ok(())
    }

    fn search(&mut self, a: u32, b: u32, desired: f64, footprint: (f64, f64), config: &ScenarioConfig) {
        let p = &config.pipeline;
        let budget = p.max_pairs_per_agent_pair.saturating_sub(
            self.pending
                .iter()
                .chain(&self.tried)
                .filter(|k| k.0 == a && k.2 == b)
                .count(),
        );
        if budget == 0 {
            return;
        }
        let cluster = |agent: u32| -> Vec<(FrameId, Vector3<f64>)> {
            let core = self.cores.get(agent).expect("checked by caller");
            // Older updates were sent at an earlier scale.
            let s = self.regs.get(&agent).map(|r| r.scale);
            self.poses[&agent]
                .iter()
                .map(|(f, (pose, sent))| {
                    (
                        *f,
                        core.transform_point(&(pose.translation * s.map_or(1.0, |s| s / sent))),
                    )
                })
                .collect()
        };
        let (ta, tb) = (cluster(a), cluster(b));
        let mut cands = candidate_pairs((a, b), &ta, &tb, desired, footprint);
        // Wide baselines fix the translation direction better.
        cands.retain(|c| c.distance >= 0.25 * desired);
        // Observations only fix the baseline direction, so parallel baselines
        // leave the core free to slide along them. Spread picks over bearings.
        let (pa, pb): (BTreeMap<_, _>, BTreeMap<_, _>) = (ta.into_iter().collect(), tb.into_iter().collect());
        let mut bins: BTreeMap<i64, Vec<CandidatePair>> = BTreeMap::new();
        for c in cands {
            let d: Vector3<f64> = pb[&c.frames.1] - pa[&c.frames.0];
            bins.entry((d.y.atan2(d.x) / BEARING_BIN).round() as i64)
                .or_default()
                .push(c);
        }
        let mut bins: Vec<Vec<CandidatePair>> = bins.into_values().collect();
        for bin in &mut bins {
            bin.sort_by(|x, y| y.overlap.total_cmp(&x.overlap).then(x.frames.cmp(&y.frames)));
            bin.reverse();
        }
        bins.sort_by(|x, y| y[y.len() - 1].overlap.total_cmp(&x[x.len() - 1].overlap));
        let limit = budget.min(p.max_pairs_per_tick);
        let mut added = 0;
        while added < limit && bins.iter().any(|b| !b.is_empty()) {
            for bin in &mut bins {
                if added >= limit {
                    break;
                }
                while let Some(c) = bin.pop() {
                    let key = (a, c.frames.0, b, c.frames.1);
                    if self.pending.contains(&key) || self.tried.contains(&key) {
                        continue;
                    }
                    // One pair per frame keeps the observations spread out.
                    if self.used_frames.contains(&(a, b, a, c.frames.0))
                        || self.used_frames.contains(&(a, b, b, c.frames.1))
                    {
                        continue;
                    }
                    self.used_frames.insert((a, b, a, c.frames.0));
                    self.used_frames.insert((a, b, b, c.frames.1));
                    self.pending.insert(key);
                    added += 1;
                    break;
                }
            }
        }
    }

    fn process_ready(&mut self, config: &ScenarioConfig) -> Result<()> {
        let ready: Vec<PairKey> = self
            .pending
            .iter()
            .copied()
            .filter(|(a, fa, b, fb)| self.records.contains_key(&(*a, *fa)) && self.records.contains_key(&(*b, *fb)))
            .collect();
        for key in ready {
            self.pending.remove(&key);
            self.tried.insert(key);
            match self.observe(key, config) {
                Some(o) => {
                    let (a, fa, b, fb) = key;
                    self.observed_scales
                        .push((self.records[&(a, fa)].scale, self.records[&(b, fb)].scale));
                    self.observations.push(o);
                }
                None => self.pairs_failed += 1,
            }
        }
        Ok(())
    }

    fn observe(&self, (a, fa, b, fb): PairKey, config: &ScenarioConfig) -> Option<PoseObservation> {
        let (ra, rb) = (&self.records[&(a, fa)], &self.records[&(b, fb)]);
        let feats = |r: &FrameRecord| -> Vec<(u64, Vector2<f64>)> {
            r.features
                .iter()
                .map(|(id, u, v)| (*id, Vector2::new(*u, *v)))
                .collect()
        };
        let matches = match_features(&feats(ra), &feats(rb));
        let min = config.pipeline.min_inliers;
        if matches.len() < min {
            return None;
        }
        let ransac = RansacConfig {
            threshold: config.pipeline.ransac_threshold,
            seed: config.seed ^ ((a as u64) << 48 | (fa as u64) << 24 | fb as u64) ^ (b as u64).rotate_left(40),
            ..RansacConfig::default()
        };
        let est = estimate_homography(&matches, &ransac).ok()?;
        if est.inlier_count < min {
            return None;
        }
        let inliers: Vec<_> = matches
            .iter()
            .zip(&est.inliers)
            .filter(|m| *m.1)
            .map(|m| *m.0)
            .collect();
        let dec = decompose_homography(&est.h, &inliers).ok()?;
        let (pa, pb) = (
            self.rescaled(a, &ra.pose, ra.scale),
            self.rescaled(b, &rb.pose, rb.scale),
        );
        let ca = self.cores.get(a)?.compose(&pa);
        let cb = self.cores.get(b)?.compose(&pb);
        let (prior, _) = camera_motion(&ca, &cb);
        let observation = select_decomposition(&dec, &prior, (a, b), (fa, fb), est.inlier_count).ok()?;
        Some(PoseObservation {
            observation,
            pose_a: ra.pose,
            pose_b: rb.pose,
        })
    }

    /// A local pose sent at scale `sent`, brought to the agent's latest scale.
    fn rescaled(&self, agent: u32, pose: &Pose, sent: f64) -> Pose {
        match self.regs.get(&agent) {
            Some(r) => Pose::new(pose.rotation, pose.translation * (r.scale / sent)),
            None => *pose,
        }
    }

    /// Observations with their frame poses at the latest scales.
    pub fn current_observations(&self) -> Vec<PoseObservation> {
        self.observations
            .iter()
            .zip(&self.observed_scales)
            .map(|(o, &(sa, sb))| {
                let (a, b) = o.observation.agents;
                PoseObservation {
                    pose_a: self.rescaled(a, &o.pose_a, sa),
                    pose_b: self.rescaled(b, &o.pose_b, sb),
                    ..*o
                }
            })
            .collect()
    }

    /// Observations linked to the central agent through other observations.
    fn connected(&self) -> Vec<PoseObservation> {
        let mut reach = BTreeSet::from([self.id]);
        loop {
            let before = reach.len();
            for o in &self.observations {
                let (a, b) = o.observation.agents;
                if reach.contains(&a) || reach.contains(&b) {
                    reach.insert(a);
                    reach.insert(b);
                }
            }
            if reach.len() == before {
                break;
            }
        }
        self.current_observations()
            .into_iter()
            .filter(|o| reach.contains(&o.observation.agents.0))
            .collect()
    }

    /// Joint core refinement over every connected observation, then a
    /// broadcast of the new cores.
    pub fn refine(&mut self, out: &mut Vec<(u32, Message)>) -> Result<bool> {
        self.observed_at_refine = self.observations.len();
        let obs = self.connected();
        let cfg = RefineConfig::default();
        if obs.len() < cfg.min_observations {
            return Ok(false);
        }
        // Start from the GNSS prior each time so one bad solve cannot stick.
        let (cores, summary) = match optimize_core_transforms(&obs, &self.prior, self.id, &cfg) {
            Ok(r) => r,
            Err(clusterfusion_core::Error::UnderConstrained(_)) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        if !summary.final_cost.is_finite() {
            return Ok(false);
        }
        for (a, c) in &cores.cores {
            self.cores.set(*a, *c);
        }
        self.refinements += 1;
        self.version += 1;
        for &agent in self.regs.keys() {
            out.push((
                agent,
                Message::RelPoseBroadcast {
                    version: self.version,
                    cores: self.cores.clone(),
                },
            ));
        }
        Ok(true)
    }

    /// New observations since the last solve.
    pub fn has_unrefined(&self) -> bool {
        self.observations.len() > self.observed_at_refine
    }
}
