use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WorldConfig;

/// Smooth terrain `z = ground + amplitude · f(x, y)` with `|f| ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub ground: f64,
    pub amplitude: f64,
    /// `(weight, kx, phase_x, ky, phase_y)`; weights sum to one.
    terms: Vec<(f64, f64, f64, f64, f64)>,
}

impl HeightField {
    pub fn new(ground: f64, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4947_4854);
        let mut terms = Vec::new();
        let mut total = 0.0;
        for _ in 0..4 {
            let w: f64 = rng.random_range(0.2..1.0);
            let kx = core::f64::consts::TAU / rng.random_range(60.0..400.0);
            let ky = core::f64::consts::TAU / rng.random_range(60.0..400.0);
            let px = rng.random_range(0.0..core::f64::consts::TAU);
            let py = rng.random_range(0.0..core::f64::consts::TAU);
            total += w;
            terms.push((w, kx, px, ky, py));
        }
        for t in &mut terms {
            t.0 /= total;
        }
        Self {
            ground,
            amplitude,
            terms,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.amplitude == 0.0
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        if self.is_flat() {
            return self.ground;
        }
        let f: f64 = self
            .terms
            .iter()
            .map(|(w, kx, px, ky, py)| w * (kx * x + px).sin() * (ky * y + py).sin())
            .sum();
        self.ground + self.amplitude * f
    }

    /// Upper bound of `|∇z|`, used to size ray-marching steps.
    pub fn max_slope(&self) -> f64 {
        self.amplitude * self.terms.iter().map(|(w, kx, _, ky, _)| w * (kx + ky)).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub extent: [f64; 2],
    pub height: HeightField,
    pub landmarks: Vec<Landmark>,
}

impl SyntheticWorld {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.extent[0] && y <= self.extent[1]
    }

    /// First intersection of `origin + t · dir` (t > 0) with the terrain, if
    /// it lies inside the world.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let h = &self.height;
        let t = if h.is_flat() {
            if dir.z >= 0.0 {
                return None;
            }
            let t = (h.ground - origin.z) / dir.z;
            if t <= 0.0 {
                return None;
            }
            t
        } else {
            self.march(origin, dir)?
        };
        let p = origin + dir * t;
        self.contains(p.x, p.y).then_some(t)
    }

    fn march(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let h = &self.height;
        let top = h.ground + h.amplitude;
        let bottom = h.ground - h.amplitude;
        let gap = |t: f64| {
            let p = origin + dir * t;
            p.z - h.height(p.x, p.y)
        };
        if dir.z >= 0.0 && origin.z > top {
            return None;
        }
        // Enter the terrain slab, then step with a slope-safe stride.
        let mut t = if origin.z > top && dir.z < 0.0 {
            (top - origin.z) / dir.z
        } else {
            0.0
        };
        let t_end = if dir.z < 0.0 {
            (bottom - origin.z) / dir.z
        } else {
            return None;
        };
        let horizontal = (dir.x * dir.x + dir.y * dir.y).sqrt();
        let closing = (-dir.z).max(0.0) + h.max_slope() * horizontal;
        let mut g = gap(t);
        if g <= 0.0 {
            return if t > 0.0 { Some(t) } else { None };
        }
        while t < t_end {
            let step = (g / closing.max(1e-9)).max(1e-6);
            let next = (t + step).min(t_end + 1e-9);
            let gn = gap(next);
            if gn <= 0.0 {
                // Bisection down to machine resolution.
                let (mut lo, mut hi) = (t, next);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if gap(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            t = next;
            g = gn;
        }
        None
    }
}

/// Landmark count is `round(density · area)`, positions uniform, heights on
/// the terrain.
pub fn generate_world(config: &WorldConfig, seed: u64) -> SyntheticWorld {
    let height = HeightField::new(config.ground_height_m, config.amplitude_m, config.height_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x574f_524c_44);
    let [ex, ey] = config.extent_m;
    let count = (config.landmark_density * ex * ey).round() as u64;
    let landmarks = (0..count)
        .map(|id| {
            let x = rng.random_range(0.0..ex);
            let y = rng.random_range(0.0..ey);
            Landmark {
                id,
                position: Vector3::new(x, y, height.height(x, y)),
            }
        })
        .collect();
    SyntheticWorld {
        extent: config.extent_m,
        height,
        landmarks,
    }
}
