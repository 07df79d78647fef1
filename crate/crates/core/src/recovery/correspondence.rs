//! (mono value, true depth) pairs sampled at tie-point observations.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraPose, PixelCoord};
use crate::ingest::TiePointTable;
use crate::rasters::{resample, DepthMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondencePair {
    pub z_mono: f64,
    /// Depth along the optical axis, meters.
    pub z_gt: f64,
    pub px: PixelCoord,
}

impl CorrespondencePair {
    pub fn new(z_mono: f64, z_gt: f64) -> Self {
        Self {
            z_mono,
            z_gt,
            px: PixelCoord::new(0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceStats {
    pub observations: usize,
    pub kept: usize,
    pub behind_camera: usize,
    pub out_of_bounds: usize,
    pub invalid_sample: usize,
}

/// Collects one pair per tie-point observation in `image_id`. A mono map
/// whose size differs from the camera frame is resampled to it first.
pub fn build_correspondences(
    image_id: u32,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    tie_points: &TiePointTable,
    mono: &DepthMap,
) -> (Vec<CorrespondencePair>, CorrespondenceStats) {
    let (w, h) = (k.width as usize, k.height as usize);
    let mono: Cow<DepthMap> = if mono.width() == w && mono.height() == h {
        Cow::Borrowed(mono)
    } else {
        match resample(mono, w, h) {
            Ok(m) => Cow::Owned(m),
            Err(_) => return (Vec::new(), CorrespondenceStats::default()),
        }
    };

    let mut stats = CorrespondenceStats::default();
    let mut pairs = Vec::new();
    for (tp, obs) in tie_points.observations_in(image_id) {
        stats.observations += 1;
        let z_gt = pose.tie_point_depth(tp.position);
        if !(z_gt > 0.0) {
            stats.behind_camera += 1;
            continue;
        }
        if !k.in_bounds(obs.pixel) {
            stats.out_of_bounds += 1;
            continue;
        }
        match mono.sample_bilinear(obs.pixel) {
            Some(z_mono) => pairs.push(CorrespondencePair {
                z_mono,
                z_gt,
                px: obs.pixel,
            }),
            None => stats.invalid_sample += 1,
        }
    }
    stats.kept = pairs.len();
    (pairs, stats)
}
