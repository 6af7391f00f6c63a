#![allow(dead_code)]

use clusterfusion_core::scenario::ScenarioConfig;

/// Three agents over the default area, nothing perturbed.
pub fn clean() -> ScenarioConfig {
    ScenarioConfig::default()
}

/// GNSS σ = 1 m and 0.001 feature noise, no map.
pub fn noisy(seed: u64, drift: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.seed = seed;
    c.noise.gnss_sigma_m = 1.0;
    c.noise.pixel_sigma = 0.001;
    c.noise.vo_drift = drift;
    c.pipeline.densify = false;
    c
}

/// A survey small enough for one agent to fly quickly.
pub fn small(count: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.world.extent_m = [300.0, 300.0];
    c.agents.count = count;
    c
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
