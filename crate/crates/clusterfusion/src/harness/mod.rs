//! Discrete-event run of a whole cluster: agent pipelines and the central
//! node exchanging encoded frames over a simulated transport.

mod agent;
mod central;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use clusterfusion_core::densify::{backproject, synthetic_depth};
use clusterfusion_core::fusion::{filter_outliers, voxel_key, MemoryBackend, StoreConfig, TileBackend, TileStore};
use clusterfusion_core::geom::Pose;
use clusterfusion_core::metrics::{cloud_accuracy, trajectory_error, Alignment};
use clusterfusion_core::relpose::{chained_relative_pose, relative_pose_error, CoreTransforms, PoseObservation};
use clusterfusion_core::scenario::{generate_truth, generate_world, AgentStreams, GroundTruth, ScenarioConfig};
use clusterfusion_core::sim::{Delivery, EventQueue, LinkConfig, Transport};
use clusterfusion_core::wire::{decode_frame, encode_frame, BandwidthLedger, Message, SequenceCheck, Sequencer};
use nalgebra::Vector3;

pub use agent::SceneDepth;
pub use report::*;

use agent::AgentNode;
use central::CentralNode;

use crate::Result;

/// Sender id of the central node on the wire.
pub const CENTRAL_NODE: u32 = u32::MAX;

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub timings: Timings,
    /// Fused map in the cluster frame.
    pub map: Vec<Vector3<f64>>,
    pub traces: Vec<TrajectoryRow>,
    pub tiles: Vec<clusterfusion_core::fusion::TileSummary>,
    /// Accepted homography observations, frame poses at the final scales.
    pub observations: Vec<PoseObservation>,
    pub truth: GroundTruth,
}

enum Event {
    Frame { agent: u32, frame: usize },
    Deliver { to: u32, bytes: Vec<u8> },
    Tick,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun> {
    let mut backend = MemoryBackend::default();
    run_scenario_with(config, &mut backend)
}

/// Same as [`run_scenario`] with tiles persisted through `backend`.
pub fn run_scenario_with(config: &ScenarioConfig, backend: &mut dyn TileBackend) -> Result<ScenarioRun> {
    config.validate()?;
    let started = Instant::now();
    let world = generate_world(&config.world, config.seed);
    let (truth, streams, _) = generate_truth(config, &world)?;
    let generation_s = started.elapsed().as_secs_f64();

    let store = TileStore::new(
        StoreConfig {
            d_c: config.fusion.d_c,
            voxel: config.fusion.voxel,
            activity_horizon: config.fusion.activity_horizon_s,
        },
        backend,
    )?;
    let central_id = config.agents.central as u32;
    let mut sim = Sim {
        config,
        queue: EventQueue::new(),
        transport: Transport::new(
            LinkConfig {
                latency_s: config.transport.latency_ms / 1000.0,
                jitter_s: config.transport.latency_jitter_ms / 1000.0,
                bandwidth: config.transport.bandwidth_bps,
                drop_prob: config.transport.drop_prob,
            },
            config.seed,
        )?,
        sequencer: Sequencer::default(),
        checks: BTreeMap::new(),
        network: BandwidthLedger::default(),
        dropped: BandwidthLedger::default(),
        local: BandwidthLedger::default(),
        central_id,
        agents: (0..config.agents.count as u32)
            .map(|a| AgentNode::new(a, a == central_id, config))
            .collect(),
        node: CentralNode::new(central_id, store),
        completion_s: 0.0,
    };

    let last_frame_s = truth
        .agents
        .iter()
        .filter_map(|a| a.timestamps.last().copied())
        .fold(0.0, f64::max);
    for a in &truth.agents {
        for (i, t) in a.timestamps.iter().enumerate() {
            sim.queue.schedule(
                *t,
                Event::Frame {
                    agent: a.agent,
                    frame: i,
                },
            )?;
        }
    }
    let end = last_frame_s + config.pipeline.finish_grace_s;
    let mut t = config.pipeline.central_tick_s;
    while t <= end {
        sim.queue.schedule(t, Event::Tick)?;
        t += config.pipeline.central_tick_s;
    }

    let scenes: Vec<SceneDepth> = truth
        .agents
        .iter()
        .map(|a| SceneDepth {
            world: &world,
            poses: &a.poses,
        })
        .collect();
    while let Some((now, event)) = sim.queue.pop() {
        sim.dispatch(now, event, &streams, &scenes)?;
    }

    let end_s = sim.queue.now();
    let events = sim.queue.dispatched();
    let mut discard = Vec::new();
    if sim.node.has_unrefined() {
        sim.node.refine(&mut discard)?;
    }
    sim.node.store.compact();
    sim.node.store.flush()?;

    let eval_started = Instant::now();
    let Sim {
        agents,
        mut node,
        network,
        dropped,
        local,
        completion_s,
        ..
    } = sim;
    let tiles = node.store.summaries();
    let mut map = node.store.all_points()?;
    let mut points_filtered = 0;
    if config.pipeline.filter_outliers {
        let kept = filter_outliers(&map, config.fusion.outlier_k, config.fusion.outlier_std);
        points_filtered = map.len() - kept.len();
        map = kept;
    }

    let mut agent_reports = Vec::new();
    let mut traces = Vec::new();
    for (node_a, t) in agents.iter().zip(&truth.agents) {
        let (r, rows) = agent_report(node_a, t, &node.prior, &node.cores, config)?;
        agent_reports.push(r);
        traces.extend(rows);
    }
    let relative_pose = relpose_report(&node, &truth);
    let fusion = fusion_report(&node, &map, &truth, &world, config, points_filtered, tiles.len())?;
    let evaluation_s = eval_started.elapsed().as_secs_f64();

    let report = ScenarioReport {
        seed: config.seed,
        agents: agent_reports,
        relative_pose,
        fusion,
        messages: MessageReport {
            network: Traffic::from_ledger(&network),
            dropped: Traffic::from_ledger(&dropped),
            local: Traffic::from_ledger(&local),
        },
        simulation: SimReport {
            last_frame_s,
            completion_s,
            end_s,
            events,
        },
    };
    let central_s = (node.fusion_time + node.refine_time).as_secs_f64();
    let timings = Timings {
        total_s: started.elapsed().as_secs_f64(),
        generation_s,
        agent_gnss_s: agents.iter().map(|a| a.gnss_time.as_secs_f64()).sum(),
        agent_densify_s: agents.iter().map(|a| a.densify_time.as_secs_f64()).sum(),
        central_fusion_s: node.fusion_time.as_secs_f64(),
        central_refine_s: node.refine_time.as_secs_f64(),
        evaluation_s,
        central_us_per_point: if report.fusion.fused_points > 0 {
            1e6 * central_s / report.fusion.fused_points as f64
        } else {
            0.0
        },
    };
    Ok(ScenarioRun {
        report,
        timings,
        map,
        traces,
        tiles,
        observations: node.current_observations(),
        truth,
    })
}

struct Sim<'c, B: TileBackend> {
    config: &'c ScenarioConfig,
    queue: EventQueue<Event>,
    transport: Transport,
    sequencer: Sequencer,
    checks: BTreeMap<u32, SequenceCheck>,
    network: BandwidthLedger,
    dropped: BandwidthLedger,
    local: BandwidthLedger,
    central_id: u32,
    agents: Vec<AgentNode>,
    node: CentralNode<B>,
    completion_s: f64,
}

impl<B: TileBackend> Sim<'_, B> {
    fn send(&mut self, now: f64, from: u32, to: u32, message: Message) -> Result<()> {
        let variant = message.variant();
        let frame = self.sequencer.stamp(from, message);
        let bytes = encode_frame(&frame)?;
        // The central agent and the central node share a machine.
        let local = (from == self.central_id && to == CENTRAL_NODE) || (from == CENTRAL_NODE && to == self.central_id);
        if local {
            self.local.record(variant, bytes.len());
            return Ok(self.queue.schedule(now, Event::Deliver { to, bytes })?);
        }
        self.network.record(variant, bytes.len());
        match self.transport.send(now, from, to, bytes.len()) {
            Delivery::At(t) => self.queue.schedule(t, Event::Deliver { to, bytes })?,
            Delivery::Dropped => self.dropped.record(variant, bytes.len()),
        }
        Ok(())
    }

    fn dispatch(&mut self, now: f64, event: Event, streams: &[AgentStreams], scenes: &[SceneDepth]) -> Result<()> {
        match event {
            Event::Frame { agent, frame } => {
                let mut out = Vec::new();
                let a = agent as usize;
                self.agents[a].on_frame(frame, now, self.config, &streams[a], &scenes[a], &mut out)?;
                for m in out {
                    self.send(now, agent, CENTRAL_NODE, m)?;
                }
            }
            Event::Tick => {
                let mut out = Vec::new();
                self.node.tick(now, self.config, &mut out)?;
                for (to, m) in out {
                    self.send(now, CENTRAL_NODE, to, m)?;
                }
            }
            Event::Deliver { to, bytes } => {
                let (frame, _) = decode_frame(&bytes)?;
                self.checks.entry(to).or_default().accept(&frame)?;
                if to == CENTRAL_NODE {
                    if matches!(frame.message, Message::TileUpload { .. } | Message::AgentDone) {
                        self.completion_s = self.completion_s.max(now);
                    }
                    if let Message::AgentDone = frame.message {
                        self.node.mark_done(frame.sender, now);
                    }
                    let mut out = Vec::new();
                    self.node.receive(now, frame.message, self.config, &mut out)?;
                    for (to, m) in out {
                        self.send(now, CENTRAL_NODE, to, m)?;
                    }
                } else {
                    let a = to as usize;
                    match frame.message {
                        Message::CandidateRequest { frames, .. } => {
                            if let Some(reply) = self.agents[a].answer(&frames, self.config, &streams[a]) {
                                self.send(now, to, CENTRAL_NODE, reply)?;
                            }
                        }
                        Message::RelPoseBroadcast { version, cores } => {
                            let agent = &mut self.agents[a];
                            if agent.cores.as_ref().is_none_or(|(v, _)| *v < version) {
                                agent.cores = Some((version, cores));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}

fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    PoseError {
        translation_m: (estimate.translation - truth.translation).norm(),
        rotation_rad: estimate.rotation.angle_to(&truth.rotation),
    }
}

fn ate(estimate: &[(f64, Vector3<f64>)], truth: &[(f64, Vector3<f64>)], alignment: Alignment) -> Option<f64> {
    if estimate.len() < 3 {
        return None;
    }
    trajectory_error(estimate, truth, alignment).ok().map(|e| e.ate_rmse)
}

fn agent_report(
    node: &AgentNode,
    truth: &clusterfusion_core::scenario::AgentTruth,
    prior: &CoreTransforms,
    refined: &CoreTransforms,
    config: &ScenarioConfig,
) -> Result<(AgentReport, Vec<TrajectoryRow>)> {
    let n = node.vo.len();
    let enu_truth: Vec<(f64, Vector3<f64>)> = (0..n)
        .map(|i| (truth.timestamps[i], truth.enu_poses[i].translation))
        .collect();
    let vo: Vec<(f64, Vector3<f64>)> = node.vo.iter().map(|(t, p)| (*t, p.translation)).collect();
    let est: Vec<Option<Pose>> = (0..n).map(|i| node.local_estimate(i)).collect();
    let known: Vec<usize> = (0..n).filter(|i| est[*i].is_some()).collect();
    let pick = |poses: &dyn Fn(&Pose) -> Vector3<f64>| -> Vec<(f64, Vector3<f64>)> {
        known
            .iter()
            .map(|&i| (truth.timestamps[i], poses(&est[i].unwrap())))
            .collect()
    };
    let enu_est: Vec<(f64, Vector3<f64>)> = known
        .iter()
        .filter_map(|&i| node.enu_estimate(i).map(|p| (truth.timestamps[i], p.translation)))
        .collect();
    let truth_at = |f: &dyn Fn(usize) -> Vector3<f64>| -> Vec<(f64, Vector3<f64>)> {
        known.iter().map(|&i| (truth.timestamps[i], f(i))).collect()
    };
    let enu_known = truth_at(&|i| truth.enu_poses[i].translation);
    let cluster_known = truth_at(&|i| truth.cluster_pose(i).translation);
    let through = |cores: &CoreTransforms| -> Option<f64> {
        let core = cores.get(truth.agent)?;
        ate(&pick(&|p| core.compose(p).translation), &cluster_known, Alignment::None)
    };
    let ate_report = AteReport {
        vo_similarity: ate(&vo, &enu_truth, Alignment::Similarity),
        gnss: ate(&enu_est, &enu_known, Alignment::None),
        cluster_prior: through(prior),
        cluster_refined: through(refined),
    };

    let samples: Vec<f64> = node.fusion.samples().iter().map(|s| s.timestamp).collect();
    let scale_trace = node
        .fusion
        .scale_trace()
        .iter()
        .map(|&(t, s)| ScalePoint {
            samples: samples.partition_point(|x| *x <= t),
            timestamp: t,
            scale: s,
        })
        .collect();
    let final_scale = node
        .fusion
        .registration()
        .filter(|_| !node.fusion.scale_trace().is_empty())
        .map(|r| r.scale);

    let mut rows = Vec::new();
    if let Some(core) = refined.get(truth.agent) {
        for &i in &known {
            let e = core.compose(&est[i].unwrap()).translation;
            let t = truth.cluster_pose(i).translation;
            rows.push(TrajectoryRow {
                agent: truth.agent,
                frame: i as u32,
                timestamp: truth.timestamps[i],
                est_x: e.x,
                est_y: e.y,
                est_z: e.z,
                true_x: t.x,
                true_y: t.y,
                true_z: t.z,
                error_m: (e - t).norm(),
            });
        }
    }
    let report = AgentReport {
        agent: truth.agent,
        central: truth.agent == config.agents.central as u32,
        frames: n,
        gnss_samples: samples.len(),
        stopped: node.silent,
        true_scale: truth.scale,
        final_scale,
        scale_error: final_scale.map(|s| (s - truth.scale).abs() / truth.scale),
        scale_trace,
        ate: ate_report,
        frames_densified: node.densified.len(),
        points_uploaded: node.points_uploaded,
    };
    Ok((report, rows))
}

/// Reference relative poses for observations, from the generator's truth.
pub fn reference_relative_poses(observations: &[PoseObservation], truth: &GroundTruth) -> Vec<Pose> {
    observations
        .iter()
        .map(|o| {
            let (a, b) = o.observation.agents;
            let (fa, fb) = o.observation.frames;
            let (ta, tb) = (&truth.agents[a as usize], &truth.agents[b as usize]);
            chained_relative_pose(
                &ta.local_poses[fa as usize],
                &tb.local_poses[fb as usize],
                &ta.core,
                &tb.core,
            )
        })
        .collect()
}

fn relpose_report<B: TileBackend>(node: &CentralNode<B>, truth: &GroundTruth) -> RelPoseReport {
    let observations = node.current_observations();
    let reference = reference_relative_poses(&observations, truth);
    let err = |cores: &CoreTransforms| {
        relative_pose_error(&observations, cores, &reference).map(|(t, r)| PoseError {
            translation_m: t,
            rotation_rad: r,
        })
    };
    let cores = truth
        .agents
        .iter()
        .filter(|a| a.agent != node.id)
        .map(|a| {
            let report = CoreReport {
                known: node.cores.get(a.agent).is_some(),
                prior: node.prior.get(a.agent).map(|c| pose_error(&c, &a.core)),
                refined: node.cores.get(a.agent).map(|c| pose_error(&c, &a.core)),
            };
            (a.agent, report)
        })
        .collect();
    RelPoseReport {
        pairs_requested: node.requested_pairs(),
        pairs_failed: node.pairs_failed,
        observations: node.observations.len(),
        refinements: node.refinements,
        prior: err(&node.prior),
        refined: err(&node.cores),
        cores,
    }
}

/// Points the agents would upload if every estimate were exact, in the
/// cluster frame.
pub fn truth_cloud(
    truth: &GroundTruth,
    world: &clusterfusion_core::scenario::SyntheticWorld,
    config: &ScenarioConfig,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    if !config.pipeline.densify {
        return out;
    }
    let camera = &config.agents.camera;
    for a in &truth.agents {
        for (i, pose) in a.poses.iter().enumerate() {
            if i % config.pipeline.densify_every != 0 {
                continue;
            }
            let depth = synthetic_depth(i as u32, pose, camera, world);
            out.extend(backproject(
                &depth,
                &a.cluster_pose(i),
                camera,
                config.fusion.stride as u32,
            ));
        }
    }
    out
}

fn fusion_report<B: TileBackend>(
    node: &CentralNode<B>,
    map: &[Vector3<f64>],
    truth: &GroundTruth,
    world: &clusterfusion_core::scenario::SyntheticWorld,
    config: &ScenarioConfig,
    points_filtered: usize,
    tiles: usize,
) -> Result<FusionReport> {
    let v = config.fusion.voxel;
    let reference = truth_cloud(truth, world, config);
    let fused: BTreeSet<_> = map.iter().filter_map(|p| voxel_key(p, v)).collect();
    let expected: BTreeSet<_> = reference.iter().filter_map(|p| voxel_key(p, v)).collect();
    let missing = expected.difference(&fused).count();
    let extra = fused.difference(&expected).count();

    let e = &config.eval;
    let accuracy = if map.is_empty() || reference.len() < e.accuracy_k {
        None
    } else {
        let step = map.len().div_ceil(e.accuracy_query_cap.max(1));
        let query: Vec<Vector3<f64>> = map.iter().step_by(step).copied().collect();
        let cdf = cloud_accuracy(&query, &reference, e.accuracy_k, &e.thresholds_m)?;
        Some(AccuracyReport {
            queries: query.len(),
            fallbacks: cdf.fallbacks,
            thresholds_m: cdf.thresholds.clone(),
            fractions: cdf.fractions.clone(),
            mean_m: cdf.mean(),
            median_m: cdf.median(),
        })
    };
    Ok(FusionReport {
        tiles,
        fused_points: map.len(),
        points_received: node.points_received,
        points_merged: node.points_merged,
        points_rejected: node.points_rejected,
        points_unfused: node.held_points(),
        points_filtered,
        occupied_voxels: fused.len(),
        truth_voxels: expected.len(),
        missing_voxels: missing,
        extra_voxels: extra,
        voxel_set_equal: missing == 0 && extra == 0,
        evictions: node.store.evictions,
        reloads: node.store.reloads,
        peak_resident_points: node.peak_resident,
        accuracy,
    })
}
