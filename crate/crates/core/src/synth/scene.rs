//! Oracle terrain: Gaussian bumps over a flat base plus flat-roofed boxes.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rasters::Extent;

use super::SynthError;

/// Coarse ray-march step along the ray, meters.
pub const MARCH_STEP: f64 = 0.25;
/// Bracket width at which root refinement stops, meters.
const ROOT_WIDTH: f64 = 1e-9;
const MAX_ROOT_ITERATIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

/// Axis-aligned box. The roof is flat at terrain(footprint center) + height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Building {
    pub footprint: Extent,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub extent: Extent,
    #[serde(default)]
    pub base_elevation: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub buildings: Vec<Building>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn flat(extent: Extent, elevation: f64) -> Self {
        Self {
            extent,
            base_elevation: elevation,
            bumps: Vec::new(),
            buildings: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !self.extent.is_valid() {
            return Err(SynthError::InvalidScene("extent is empty or non-finite".into()));
        }
        if !self.base_elevation.is_finite() {
            return Err(SynthError::InvalidScene("base elevation is not finite".into()));
        }
        for (i, b) in self.bumps.iter().enumerate() {
            if !(b.sigma > 0.0) || !b.sigma.is_finite() {
                return Err(SynthError::InvalidScene(format!("bump {i}: sigma must be positive")));
            }
            if !b.amplitude.is_finite() || !b.center.iter().all(|c| c.is_finite()) {
                return Err(SynthError::InvalidScene(format!("bump {i}: non-finite parameters")));
            }
        }
        for (i, b) in self.buildings.iter().enumerate() {
            let f = &b.footprint;
            if !f.is_valid() {
                return Err(SynthError::InvalidScene(format!("building {i}: empty footprint")));
            }
            if !b.height.is_finite() {
                return Err(SynthError::InvalidScene(format!("building {i}: height is not finite")));
            }
            if !(self.extent.contains(f.min_x, f.min_y) && self.extent.contains(f.max_x, f.max_y)) {
                return Err(SynthError::InvalidScene(format!(
                    "building {i}: footprint leaves the scene extent"
                )));
            }
        }
        Ok(())
    }

    /// Smooth terrain without buildings. Defined everywhere.
    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        let mut z = self.base_elevation;
        for b in &self.bumps {
            let dx = x - b.center[0];
            let dy = y - b.center[1];
            z += b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
        }
        z
    }

    pub fn roof(&self, b: &Building) -> f64 {
        let (cx, cy) = b.footprint.center();
        self.terrain(cx, cy) + b.height
    }

    pub fn elevation(&self, x: f64, y: f64) -> Result<f64, SynthError> {
        if !self.extent.contains(x, y) {
            return Err(SynthError::OutOfExtent { x, y });
        }
        Ok(self.surface(x, y))
    }

    pub(crate) fn surface(&self, x: f64, y: f64) -> f64 {
        let mut z = self.terrain(x, y);
        for b in &self.buildings {
            if b.footprint.contains(x, y) {
                z = z.max(self.roof(b));
            }
        }
        z
    }

    /// Upper bound of the terrain alone.
    fn terrain_ceiling(&self) -> f64 {
        self.base_elevation + self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum::<f64>()
    }

    /// Upper bound of every surface height in the scene.
    pub fn max_elevation(&self) -> f64 {
        self.buildings
            .iter()
            .map(|b| self.roof(b))
            .fold(self.terrain_ceiling(), f64::max)
    }

    /// Bound on the terrain gradient norm.
    fn slope_bound(&self) -> f64 {
        let k = (-0.5f64).exp();
        self.bumps.iter().map(|b| b.amplitude.abs() / b.sigma * k).sum()
    }

    /// Mean terrain elevation over `area`, sampled on a 64×64 lattice.
    pub fn mean_terrain(&self, area: &Extent) -> f64 {
        const N: usize = 64;
        let mut acc = 0.0;
        for i in 0..N {
            let y = area.min_y + (i as f64 + 0.5) / N as f64 * area.height();
            for j in 0..N {
                let x = area.min_x + (j as f64 + 0.5) / N as f64 * area.width();
                acc += self.terrain(x, y);
            }
        }
        acc / (N * N) as f64
    }

    /// Distance along the unit ray `dir` from `origin` to the first surface hit.
    pub fn raycast(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<f64> {
        let terrain_hit = self.march_terrain(origin, dir);
        let box_hit = self
            .buildings
            .iter()
            .filter_map(|b| ray_box(origin, dir, &b.footprint, self.roof(b)))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        match (terrain_hit, box_hit) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    // Sphere-tracing style march: the gap to the terrain shrinks at most at
    // rate `k` per meter, so steps of gap/k never cross it. Below one coarse
    // step the march falls back to MARCH_STEP and refines the bracket.
    fn march_terrain(&self, o: Vector3<f64>, d: Vector3<f64>) -> Option<f64> {
        let (t_in, t_out) = ray_extent(o, d, &self.extent)?;
        let gap = |t: f64| o.z + t * d.z - self.terrain(o.x + t * d.x, o.y + t * d.y);
        let mut t = t_in;
        if d.z < 0.0 {
            t = t.max((self.terrain_ceiling() - o.z) / d.z);
        }
        if t > t_out {
            return None;
        }
        let k = (-d.z).max(0.0) + self.slope_bound() * d.x.hypot(d.y);
        let mut g = gap(t);
        if g <= 0.0 {
            return Some(t);
        }
        if k <= 0.0 {
            return None;
        }
        loop {
            let step = (g / k).max(MARCH_STEP);
            let mut tn = t + step;
            let last = tn >= t_out;
            if last {
                tn = t_out;
            }
            let gn = gap(tn);
            if gn <= 0.0 {
                return Some(refine_root(&gap, (t, g), (tn, gn)));
            }
            if last {
                return None;
            }
            t = tn;
            g = gn;
        }
    }
}

/// Illinois false position on a bracket with `gap(lo) > 0 >= gap(hi)`.
fn refine_root(gap: &impl Fn(f64) -> f64, (mut lo, mut glo): (f64, f64), (mut hi, mut ghi): (f64, f64)) -> f64 {
    let mut side = 0i8;
    for _ in 0..MAX_ROOT_ITERATIONS {
        if hi - lo <= ROOT_WIDTH {
            break;
        }
        let mut t = (lo * ghi - hi * glo) / (ghi - glo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let g = gap(t);
        if g == 0.0 {
            return t;
        }
        if g > 0.0 {
            (lo, glo) = (t, g);
            if side == 1 {
                ghi *= 0.5;
            }
            side = 1;
        } else {
            (hi, ghi) = (t, g);
            if side == -1 {
                glo *= 0.5;
            }
            side = -1;
        }
    }
    0.5 * (lo + hi)
}

/// Parameter interval (t ≥ 0) where the ray's ground track lies in `e`.
fn ray_extent(o: Vector3<f64>, d: Vector3<f64>, e: &Extent) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for (p, v, lo, hi) in [(o.x, d.x, e.min_x, e.max_x), (o.y, d.y, e.min_y, e.max_y)] {
        if v == 0.0 {
            if p < lo || p > hi {
                return None;
            }
        } else {
            let a = (lo - p) / v;
            let b = (hi - p) / v;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// First hit with the solid `footprint × (−∞, top]`.
fn ray_box(o: Vector3<f64>, d: Vector3<f64>, footprint: &Extent, top: f64) -> Option<f64> {
    let (mut t0, mut t1) = ray_extent(o, d, footprint)?;
    if d.z < 0.0 {
        t0 = t0.max((top - o.z) / d.z);
    } else if d.z > 0.0 {
        t1 = t1.min((top - o.z) / d.z);
    } else if o.z > top {
        return None;
    }
    (t0 <= t1).then_some(t0)
}

/// Smooth procedural texture, a pure function of the surface point.
pub fn texture(x: f64, y: f64, z: f64) -> [u8; 3] {
    use std::f64::consts::TAU;
    let r = 128.0 + 90.0 * (TAU * x / 53.0).sin();
    let g = 128.0 + 90.0 * (TAU * y / 47.0).sin();
    let b = 128.0 + 60.0 * (TAU * (x + y) / 71.0 + z / 10.0).sin();
    [r, g, b].map(|c| c.round().clamp(0.0, 255.0) as u8)
}

/// Parameters for [`random_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSceneSpec {
    pub bumps: usize,
    pub buildings: usize,
    pub amplitude: [f64; 2],
    pub sigma: [f64; 2],
    pub building_size: [f64; 2],
    pub building_height: [f64; 2],
    /// Buildings keep this distance from the extent border.
    pub margin: f64,
}

impl Default for RandomSceneSpec {
    fn default() -> Self {
        Self {
            bumps: 6,
            buildings: 12,
            amplitude: [-20.0, 40.0],
            sigma: [40.0, 150.0],
            building_size: [15.0, 45.0],
            building_height: [8.0, 30.0],
            margin: 20.0,
        }
    }
}

/// Appends random bumps and buildings to `base`.
pub fn random_scene(base: SceneSpec, spec: &RandomSceneSpec, rng: &mut impl Rng) -> SceneSpec {
    let mut scene = base;
    let e = scene.extent;
    for _ in 0..spec.bumps {
        scene.bumps.push(Bump {
            center: [rng.gen_range(e.min_x..=e.max_x), rng.gen_range(e.min_y..=e.max_y)],
            sigma: rng.gen_range(spec.sigma[0]..=spec.sigma[1]),
            amplitude: rng.gen_range(spec.amplitude[0]..=spec.amplitude[1]),
        });
    }
    let m = spec.margin.max(0.0);
    for _ in 0..spec.buildings {
        let w = rng.gen_range(spec.building_size[0]..=spec.building_size[1]);
        let h = rng.gen_range(spec.building_size[0]..=spec.building_size[1]);
        let (lo_x, hi_x) = (e.min_x + m, e.max_x - m - w);
        let (lo_y, hi_y) = (e.min_y + m, e.max_y - m - h);
        if hi_x <= lo_x || hi_y <= lo_y {
            break;
        }
        let x0 = rng.gen_range(lo_x..hi_x);
        let y0 = rng.gen_range(lo_y..hi_y);
        scene.buildings.push(Building {
            footprint: Extent::new(x0, y0, x0 + w, y0 + h),
            height: rng.gen_range(spec.building_height[0]..=spec.building_height[1]),
        });
    }
    scene
}
