//! Metric depth maps to world-space point clouds, and direct fusion.
//!
//! Fusion is plain concatenation: no cross-view consistency filtering, so
//! seams between overlapping views stay visible in the products.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{backproject, CameraIntrinsics, CameraPose, PixelCoord, WorldPoint};
use crate::rasters::{ColorImage, DepthKind, DepthMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("expected a metric depth map, got {0}")]
    KindMismatch(DepthKind),
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxel(f64),
    #[error("{what} is {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: WorldPoint,
    pub color: Option<[u8; 3]>,
    /// Image the point was generated from.
    pub source: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn from_points(points: Vec<CloudPoint>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[CloudPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<CloudPoint> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: CloudPoint) {
        self.points.push(p);
    }
}

/// Default lattice stride: 4 for 6000x4000-class frames, 1 for small frames.
pub fn default_stride(width: u32) -> usize {
    if width >= 4000 {
        4
    } else {
        1
    }
}

pub fn depth_to_cloud(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    metric: &DepthMap,
    color: Option<&ColorImage>,
    stride: usize,
    source: u32,
) -> Result<PointCloud, FusionError> {
    if metric.kind() != DepthKind::Metric {
        return Err(FusionError::KindMismatch(metric.kind()));
    }
    if stride == 0 {
        return Err(FusionError::InvalidStride);
    }
    let (w, h) = (k.width as usize, k.height as usize);
    if metric.width() != w || metric.height() != h {
        return Err(FusionError::DimensionMismatch {
            what: "depth map",
            got_w: metric.width(),
            got_h: metric.height(),
            want_w: w,
            want_h: h,
        });
    }
    if let Some(img) = color {
        if img.width() != w || img.height() != h {
            return Err(FusionError::DimensionMismatch {
                what: "color image",
                got_w: img.width(),
                got_h: img.height(),
                want_w: w,
                want_h: h,
            });
        }
    }

    let mut cloud = PointCloud::default();
    for row in (0..h).step_by(stride) {
        for col in (0..w).step_by(stride) {
            let Some(depth) = metric.get(col, row) else {
                continue;
            };
            let px = PixelCoord::new(col as f64, row as f64);
            let Ok(cam) = backproject(k, px, depth) else {
                continue;
            };
            cloud.push(CloudPoint {
                position: pose.camera_to_world(cam),
                color: color.and_then(|img| img.get(col, row)),
                source: Some(source),
            });
        }
    }
    Ok(cloud)
}

pub fn merge_clouds<I>(clouds: I) -> PointCloud
where
    I: IntoIterator<Item = PointCloud>,
{
    let mut points = Vec::new();
    for c in clouds {
        points.extend(c.points);
    }
    PointCloud { points }
}

/// One centroid per occupied voxel, in first-occupancy order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, FusionError> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(FusionError::InvalidVoxel(voxel));
    }
    struct Acc {
        sum: [f64; 3],
        color_sum: [u32; 3],
        colored: u32,
        n: u32,
        source: Option<u32>,
    }
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut accs: Vec<Acc> = Vec::new();
    for p in &cloud.points {
        let key = (
            (p.position.x / voxel).floor() as i64,
            (p.position.y / voxel).floor() as i64,
            (p.position.z / voxel).floor() as i64,
        );
        let i = *index.entry(key).or_insert_with(|| {
            accs.push(Acc {
                sum: [0.0; 3],
                color_sum: [0; 3],
                colored: 0,
                n: 0,
                source: p.source,
            });
            accs.len() - 1
        });
        let a = &mut accs[i];
        a.sum[0] += p.position.x;
        a.sum[1] += p.position.y;
        a.sum[2] += p.position.z;
        a.n += 1;
        if let Some(c) = p.color {
            for ch in 0..3 {
                a.color_sum[ch] += c[ch] as u32;
            }
            a.colored += 1;
        }
    }
    let points = accs
        .into_iter()
        .map(|a| {
            let n = a.n as f64;
            CloudPoint {
                position: WorldPoint::new(a.sum[0] / n, a.sum[1] / n, a.sum[2] / n),
                color: (a.colored > 0).then(|| {
                    let avg = |s: u32| ((s as f64 / a.colored as f64).round()) as u8;
                    [avg(a.color_sum[0]), avg(a.color_sum[1]), avg(a.color_sum[2])]
                }),
                source: a.source,
            }
        })
        .collect();
    Ok(PointCloud { points })
}
