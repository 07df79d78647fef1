//! Boustrophedon nadir flight plans.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{nadir_rotation, CameraIntrinsics, CameraPose};
use crate::rasters::Extent;

use super::scene::SceneSpec;
use super::{stream, SynthError, STREAM_JITTER};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlightPlan {
    /// Height above the mean terrain elevation of the area, meters.
    pub altitude: f64,
    pub forward_overlap: f64,
    pub side_overlap: f64,
    pub intrinsics: CameraIntrinsics,
    /// Standard deviation of roll/pitch/yaw jitter, degrees.
    #[serde(default)]
    pub jitter_deg: f64,
    /// Area to cover; the scene extent when absent.
    #[serde(default)]
    pub aoi: Option<Extent>,
}

/// Ground footprint of one image at a given height above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    /// Across-track (world x) size, meters.
    pub width: f64,
    /// Along-track (world y) size, meters.
    pub length: f64,
}

pub fn footprint(k: &CameraIntrinsics, height: f64) -> Footprint {
    Footprint {
        width: k.width as f64 * height / k.fx,
        length: k.height as f64 * height / k.fy,
    }
}

pub fn along_track_spacing(footprint_length: f64, forward_overlap: f64) -> f64 {
    footprint_length * (1.0 - forward_overlap)
}

pub fn strip_spacing(footprint_width: f64, side_overlap: f64) -> f64 {
    footprint_width * (1.0 - side_overlap)
}

fn check_overlap(name: &str, v: f64) -> Result<(), SynthError> {
    if !(0.0..1.0).contains(&v) {
        return Err(SynthError::InfeasibleOverlap(format!(
            "{name} overlap {v} must lie in [0, 1)"
        )));
    }
    Ok(())
}

/// Centers along one axis so `count` frames of `size` spaced by `step`
/// cover `[lo, hi]`, symmetric about its midpoint.
fn stations(lo: f64, hi: f64, size: f64, step: f64) -> Vec<f64> {
    let span = hi - lo;
    let count = if span <= size {
        1
    } else {
        ((span - size) / step - 1e-9).ceil() as usize + 1
    };
    let mid = 0.5 * (lo + hi);
    let first = mid - 0.5 * (count - 1) as f64 * step;
    (0..count).map(|i| first + i as f64 * step).collect()
}

fn jitter_rotation(sigma_deg: f64, seed: u64, index: u64) -> Matrix3<f64> {
    if sigma_deg <= 0.0 {
        return Matrix3::identity();
    }
    let mut rng = stream(seed, STREAM_JITTER, index);
    let n = Normal::new(0.0, sigma_deg.to_radians()).expect("positive sigma");
    let (r, p, y) = (n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
    *Rotation3::from_euler_angles(r, p, y).matrix()
}

/// Camera poses in flight order, strips along world y and stepping in x.
pub fn plan_flight(scene: &SceneSpec, plan: &FlightPlan, seed: u64) -> Result<Vec<CameraPose>, SynthError> {
    check_overlap("forward", plan.forward_overlap)?;
    check_overlap("side", plan.side_overlap)?;
    plan.intrinsics
        .validate()
        .map_err(|e| SynthError::InvalidPlan(e.to_string()))?;
    if !(plan.altitude > 0.0) || !plan.altitude.is_finite() {
        return Err(SynthError::InvalidPlan("altitude must be positive".into()));
    }
    if !(plan.jitter_deg >= 0.0) {
        return Err(SynthError::InvalidPlan("jitter must be non-negative".into()));
    }
    let aoi = plan.aoi.unwrap_or(scene.extent);
    if !aoi.is_valid() {
        return Err(SynthError::InvalidPlan("empty area of interest".into()));
    }
    let ground = scene.mean_terrain(&aoi);
    let camera_z = ground + plan.altitude;
    if camera_z <= scene.max_elevation() {
        return Err(SynthError::InvalidPlan(format!(
            "flight height {camera_z} m is not above the highest surface {} m",
            scene.max_elevation()
        )));
    }

    let fp = footprint(&plan.intrinsics, plan.altitude);
    let xs = stations(aoi.min_x, aoi.max_x, fp.width, strip_spacing(fp.width, plan.side_overlap));
    let ys = stations(
        aoi.min_y,
        aoi.max_y,
        fp.length,
        along_track_spacing(fp.length, plan.forward_overlap),
    );

    let nadir = nadir_rotation();
    let mut poses = Vec::with_capacity(xs.len() * ys.len());
    for (strip, &x) in xs.iter().enumerate() {
        let order: Box<dyn Iterator<Item = &f64>> = if strip % 2 == 0 {
            Box::new(ys.iter())
        } else {
            Box::new(ys.iter().rev())
        };
        for &y in order {
            let r = jitter_rotation(plan.jitter_deg, seed, poses.len() as u64) * nadir;
            let pose = CameraPose::from_center(r, Vector3::new(x, y, camera_z))
                .map_err(|e| SynthError::InvalidPlan(e.to_string()))?;
            poses.push(pose);
        }
    }
    Ok(poses)
}
