mod common;

use clusterfusion::harness::run_scenario;
use clusterfusion_core::wire::Variant;

#[test]
fn lone_agent_without_noise_is_exact_and_talks_only_locally() {
    let mut c = common::small(1);
    c.pipeline.densify = false;
    let run = run_scenario(&c).unwrap();
    let a = &run.report.agents[0];
    assert!(a.scale_error.unwrap() < 1e-9, "scale error {:?}", a.scale_error);
    for ate in [a.ate.gnss, a.ate.cluster_prior, a.ate.cluster_refined] {
        assert!(ate.unwrap() < 1e-6, "{:?}", a.ate);
    }
    let m = &run.report.messages;
    assert_eq!(m.network.total_count, 0);
    for v in [
        Variant::CandidateRequest,
        Variant::CandidateResponse,
        Variant::RelPoseBroadcast,
    ] {
        assert_eq!(m.local.variants[v.name()].count, 0, "{} sent", v.name());
    }
    assert!(m.local.variants[Variant::RegistrationUpdate.name()].count > 0);
}

#[test]
fn three_clean_agents_rebuild_the_scene_voxel_for_voxel() {
    let run = run_scenario(&common::clean()).unwrap();
    let f = &run.report.fusion;
    assert!(f.fused_points > 100_000);
    assert_eq!((f.missing_voxels, f.extra_voxels), (0, 0));
    assert!(f.voxel_set_equal);
    assert_eq!(f.occupied_voxels, run.map.len());
}

#[test]
fn refinement_never_worsens_relative_poses_over_twenty_seeds() {
    for seed in 1..=20 {
        let r = run_scenario(&common::noisy(seed, 0.0)).unwrap().report.relative_pose;
        let (prior, refined) = (r.prior.unwrap(), r.refined.unwrap());
        assert!(r.refinements > 0, "seed {seed}: never refined");
        assert!(
            refined.translation_m <= prior.translation_m && refined.rotation_rad <= prior.rotation_rad,
            "seed {seed}: {prior:?} -> {refined:?}"
        );
    }
}

#[test]
fn traffic_totals_are_conserved() {
    let mut c = common::noisy(3, 0.01);
    c.transport.drop_prob = 0.1;
    let m = run_scenario(&c).unwrap().report.messages;
    for t in [&m.network, &m.dropped, &m.local] {
        assert_eq!(t.variants.values().map(|v| v.bytes).sum::<u64>(), t.total_bytes);
        assert_eq!(t.variants.values().map(|v| v.count).sum::<u64>(), t.total_count);
    }
    assert!(m.dropped.total_count > 0 && m.dropped.total_bytes <= m.network.total_bytes);
}

#[test]
fn stopped_agent_keeps_its_core_and_the_run_finishes() {
    let mut c = common::noisy(5, 0.0);
    c.agents.stop_after_s = vec![None, None, Some(120.0)];
    let r = run_scenario(&c).unwrap().report;
    let a = &r.agents[2];
    assert!(a.stopped);
    assert!(a.frames <= 121);
    assert!(r.relative_pose.cores[&2].known);
}
