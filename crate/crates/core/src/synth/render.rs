//! Ground-truth depth and color rendering by ray casting.

use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, CameraPose, PixelCoord};
use crate::rasters::{ColorImage, DepthKind, DepthMap};

use super::scene::{texture, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub depth: DepthMap,
    pub color: ColorImage,
}

/// Camera-frame depth of the first surface hit through `px`, if any.
pub fn oracle_depth(
    scene: &SceneSpec,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    px: PixelCoord,
) -> Option<f64> {
    cast(scene, pose, k, px).map(|(depth, _)| depth)
}

fn cast(
    scene: &SceneSpec,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    px: PixelCoord,
) -> Option<(f64, [u8; 3])> {
    let ray = pose.ray_direction(k, px);
    let norm = ray.norm();
    let dir = ray / norm;
    let origin = pose.center();
    let t = scene.raycast(origin, dir)?;
    let hit = origin + t * dir;
    Some((t / norm, texture(hit.x, hit.y, hit.z)))
}

fn render_rows(
    scene: &SceneSpec,
    pose: &CameraPose,
    k: &CameraIntrinsics,
) -> Vec<Option<(f64, [u8; 3])>> {
    let (w, h) = (k.width as usize, k.height as usize);
    (0..h)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..w).map(move |col| cast(scene, pose, k, PixelCoord::new(col as f64, row as f64)))
        })
        .collect()
}

/// Metric depth map at the intrinsics' resolution; misses are invalid.
pub fn render_depth(scene: &SceneSpec, pose: &CameraPose, k: &CameraIntrinsics) -> DepthMap {
    render_view(scene, pose, k).depth
}

pub fn render_view(scene: &SceneSpec, pose: &CameraPose, k: &CameraIntrinsics) -> RenderedView {
    let (w, h) = (k.width as usize, k.height as usize);
    let hits = render_rows(scene, pose, k);
    let values = hits.iter().map(|h| h.map_or(f64::NAN, |(d, _)| d)).collect();
    let rgb = hits.iter().map(|h| h.map_or([0, 0, 0], |(_, c)| c)).collect();
    RenderedView {
        depth: DepthMap::from_values(w, h, values, DepthKind::Metric)
            .expect("dimensions come from validated intrinsics"),
        color: ColorImage::new(w, h, rgb).expect("dimensions come from validated intrinsics"),
    }
}
