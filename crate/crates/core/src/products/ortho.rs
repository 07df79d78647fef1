//! True orthophoto by per-cell view selection with a depth-map z-buffer
//! test, and view-count coverage masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, CameraIntrinsics, CameraPose, PixelCoord, WorldPoint};
use crate::rasters::{ColorImage, DepthMap, RasterGrid, DEFAULT_NODATA};

use super::dsm::locate;
use super::ProductsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRanking {
    /// Smallest angle between the viewing ray and the optical axis.
    MinViewAngle,
    /// Projection closest to the principal point, in pixels.
    MinPrincipalDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoConfig {
    pub cell_size: f64,
    pub occlusion_tolerance: f64,
    pub ranking: ViewRanking,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            occlusion_tolerance: 1.0,
            ranking: ViewRanking::MinViewAngle,
        }
    }
}

impl OrthoConfig {
    pub fn validate(&self) -> Result<(), ProductsError> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(ProductsError::InvalidConfig(format!("cell_size {}", self.cell_size)));
        }
        if !(self.occlusion_tolerance > 0.0) {
            return Err(ProductsError::InvalidConfig(format!(
                "occlusion_tolerance {}",
                self.occlusion_tolerance
            )));
        }
        Ok(())
    }
}

/// One input image for orthorectification.
#[derive(Debug, Clone, Copy)]
pub struct OrthoView<'a> {
    pub image_id: u32,
    pub pose: &'a CameraPose,
    pub intrinsics: &'a CameraIntrinsics,
    pub color: &'a ColorImage,
    /// Metric depth in the image frame, used as the z-buffer.
    pub depth: &'a DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthophoto {
    pub red: RasterGrid,
    pub green: RasterGrid,
    pub blue: RasterGrid,
    /// Winning image id per cell.
    pub view_index: RasterGrid,
}

impl Orthophoto {
    /// Row-major pixels, `None` where no view passed.
    pub fn pixels(&self) -> Vec<Option<[u8; 3]>> {
        (0..self.red.nrows())
            .flat_map(|row| (0..self.red.ncols()).map(move |col| (col, row)))
            .map(|(col, row)| {
                let r = self.red.get(col, row)?;
                let g = self.green.get(col, row)?;
                let b = self.blue.get(col, row)?;
                Some([r as u8, g as u8, b as u8])
            })
            .collect()
    }
}

/// Elevation under `(x, y)` from the DSM cell containing it.
fn dsm_height(dsm: &RasterGrid, x: f64, y: f64) -> Option<f64> {
    let (c, r) = locate(dsm, x, y)?;
    dsm.get(c, r)
}

fn rank_key(view: &OrthoView, p: WorldPoint, px: PixelCoord, rule: ViewRanking) -> f64 {
    match rule {
        ViewRanking::MinViewAngle => {
            let ray = p.to_vector() - view.pose.center();
            let cos = ray.dot(&view.pose.optical_axis()) / ray.norm();
            -cos
        }
        ViewRanking::MinPrincipalDistance => {
            let du = px.u - view.intrinsics.cx;
            let dv = px.v - view.intrinsics.cy;
            (du * du + dv * dv).sqrt()
        }
    }
}

/// For each ortho cell, lifts the cell center to the DSM surface, ranks the
/// views that see it, and takes the color of the best view whose depth map
/// agrees with the point's depth within the occlusion tolerance. Ties in
/// rank go to the view listed first.
pub fn orthorectify(dsm: &RasterGrid, views: &[OrthoView], cfg: &OrthoConfig) -> Result<Orthophoto, ProductsError> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(ProductsError::NoViews);
    }
    let template = RasterGrid::covering(dsm.extent(), cfg.cell_size, DEFAULT_NODATA)?;
    let (ncols, nrows) = (template.ncols(), template.nrows());

    let cells: Vec<Option<([f64; 3], u32)>> = (0..nrows)
        .into_par_iter()
        .flat_map_iter(|row| {
            let template = &template;
            let mut cands: Vec<(f64, usize, PixelCoord, f64)> = Vec::with_capacity(views.len());
            (0..ncols)
                .map(move |col| {
                    let (x, y) = template.cell_center(col, row).ok()?;
                    let z = dsm_height(dsm, x, y)?;
                    let p = WorldPoint::new(x, y, z);
                    cands.clear();
                    for (i, v) in views.iter().enumerate() {
                        let cam = v.pose.world_to_camera(p);
                        let Ok(px) = project(v.intrinsics, cam) else {
                            continue;
                        };
                        if !v.intrinsics.in_bounds(px) {
                            continue;
                        }
                        cands.push((rank_key(v, p, px, cfg.ranking), i, px, cam.z));
                    }
                    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for &(_, i, px, z_cam) in cands.iter() {
                        let v = &views[i];
                        let Some(d) = v.depth.sample_bilinear(px) else {
                            continue;
                        };
                        if (d - z_cam).abs() > cfg.occlusion_tolerance {
                            continue;
                        }
                        if let Some(rgb) = v.color.sample_bilinear(px) {
                            return Some((rgb, v.image_id));
                        }
                    }
                    None
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut red = template.clone();
    let mut green = template.clone();
    let mut blue = template.clone();
    let mut view_index = template;
    for (i, cell) in cells.into_iter().enumerate() {
        let (col, row) = (i % ncols, i / ncols);
        if let Some((rgb, id)) = cell {
            let q = |v: f64| v.round().clamp(0.0, 255.0);
            red.set(col, row, Some(q(rgb[0])));
            green.set(col, row, Some(q(rgb[1])));
            blue.set(col, row, Some(q(rgb[2])));
            view_index.set(col, row, Some(id as f64));
        }
    }
    Ok(Orthophoto {
        red,
        green,
        blue,
        view_index,
    })
}

/// 1 where at least `min_views` cameras see the cell center lifted to the
/// DSM (occlusion ignored), else 0. Nodata DSM cells are lifted to the mean
/// valid elevation.
pub fn coverage_mask(
    cameras: &[(CameraPose, CameraIntrinsics)],
    dsm: &RasterGrid,
    min_views: usize,
) -> Result<RasterGrid, ProductsError> {
    if min_views == 0 {
        return Err(ProductsError::InvalidConfig("min_views must be at least 1".into()));
    }
    let counts = view_counts(cameras, dsm);
    let vals = counts.iter().map(|&n| if n >= min_views { 1.0 } else { 0.0 }).collect();
    Ok(RasterGrid::from_values(
        dsm.origin_x,
        dsm.origin_y,
        dsm.cell_size,
        dsm.ncols(),
        dsm.nrows(),
        vals,
        dsm.nodata,
    )?)
}

/// Number of cameras whose frame contains each DSM cell, row-major.
pub fn view_counts(cameras: &[(CameraPose, CameraIntrinsics)], dsm: &RasterGrid) -> Vec<usize> {
    let valid: Vec<f64> = dsm.values().iter().copied().filter(|v| !dsm.is_nodata(*v)).collect();
    let fallback = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    let ncols = dsm.ncols();
    (0..dsm.nrows())
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..ncols).map(move |col| {
                let (x, y) = dsm.cell_center(col, row).expect("in range");
                let z = dsm.get(col, row).unwrap_or(fallback);
                let p = WorldPoint::new(x, y, z);
                cameras
                    .iter()
                    .filter(|(pose, k)| {
                        project(k, pose.world_to_camera(p)).is_ok_and(|px| k.in_bounds(px))
                    })
                    .count()
            })
        })
        .collect()
}
