//! Depth and DSM accuracy metrics, completeness, and report formatting.
//!
//! Every metric is a plain sequential loop so results do not depend on the
//! worker count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rasters::{DepthKind, DepthMap, Extent, RasterError, RasterGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("depth maps differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("expected metric depth maps, got {0}")]
    KindMismatch(DepthKind),
    #[error("no pixel or cell is valid in both inputs")]
    NoOverlap,
    #[error("no summaries to average")]
    Empty,
    #[error("grids differ in origin, cell size or dimensions")]
    GridMismatch,
    #[error("AOI contains no grid cell centers")]
    EmptyAoi,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthErrorSummary {
    pub image_id: u32,
    pub rmse: f64,
    pub n_compared: usize,
    /// Sum of squared errors, kept for pooled RMSE.
    pub sse: f64,
}

/// RMSE over pixels valid in both maps.
pub fn depth_rmse(image_id: u32, recovered: &DepthMap, gt: &DepthMap) -> Result<DepthErrorSummary, EvalError> {
    if recovered.width() != gt.width() || recovered.height() != gt.height() {
        return Err(EvalError::DimensionMismatch(
            recovered.width(),
            recovered.height(),
            gt.width(),
            gt.height(),
        ));
    }
    for m in [recovered, gt] {
        if m.kind() != DepthKind::Metric {
            return Err(EvalError::KindMismatch(m.kind()));
        }
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for i in 0..recovered.values().len() {
        if recovered.mask()[i] && gt.mask()[i] {
            let e = recovered.values()[i] - gt.values()[i];
            sse += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoOverlap);
    }
    Ok(DepthErrorSummary {
        image_id,
        rmse: (sse / n as f64).sqrt(),
        n_compared: n,
        sse,
    })
}

/// Unweighted mean of per-image RMSE.
pub fn dataset_mrmse(summaries: &[DepthErrorSummary]) -> Result<f64, EvalError> {
    if summaries.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(summaries.iter().map(|s| s.rmse).sum::<f64>() / summaries.len() as f64)
}

/// RMSE over all compared pixels of all images.
pub fn pooled_rmse(summaries: &[DepthErrorSummary]) -> Result<f64, EvalError> {
    let n: usize = summaries.iter().map(|s| s.n_compared).sum();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok((summaries.iter().map(|s| s.sse).sum::<f64>() / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    pub bin_width: f64,
    pub max: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bin_width: 1.0,
            max: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin `i` covers `[edges[i], edges[i + 1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values at or above the last edge.
    pub overflow: usize,
}

impl Histogram {
    pub fn new(spec: HistogramSpec) -> Self {
        let nbins = (spec.max / spec.bin_width).round().max(1.0) as usize;
        Self {
            edges: (0..=nbins).map(|i| i as f64 * spec.bin_width).collect(),
            counts: vec![0; nbins],
            overflow: 0,
        }
    }

    pub fn add(&mut self, v: f64) {
        let nbins = self.counts.len();
        let width = self.edges[1] - self.edges[0];
        let idx = (v / width).floor();
        if idx >= nbins as f64 {
            self.overflow += 1;
        } else {
            self.counts[idx.max(0.0) as usize] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.overflow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmErrorSummary {
    pub mae: f64,
    pub median_ae: f64,
    pub rmse: f64,
    pub histogram: Histogram,
    pub n_cells: usize,
}

fn selected(mask: Option<&RasterGrid>, col: usize, row: usize) -> bool {
    mask.is_none_or(|m| m.get(col, row).is_some_and(|v| v != 0.0))
}

pub fn dsm_error_stats(
    dsm: &RasterGrid,
    gt: &RasterGrid,
    mask: Option<&RasterGrid>,
) -> Result<DsmErrorSummary, EvalError> {
    dsm_error_stats_with(dsm, gt, mask, HistogramSpec::default())
}

/// MAE, median absolute error, RMSE and an error histogram over cells valid
/// in both grids and nonzero in `mask`.
pub fn dsm_error_stats_with(
    dsm: &RasterGrid,
    gt: &RasterGrid,
    mask: Option<&RasterGrid>,
    spec: HistogramSpec,
) -> Result<DsmErrorSummary, EvalError> {
    if !dsm.same_geometry(gt) || mask.is_some_and(|m| !m.same_geometry(dsm)) {
        return Err(EvalError::GridMismatch);
    }
    let mut errs = Vec::new();
    for row in 0..dsm.nrows() {
        for col in 0..dsm.ncols() {
            if !selected(mask, col, row) {
                continue;
            }
            if let (Some(a), Some(b)) = (dsm.get(col, row), gt.get(col, row)) {
                errs.push((a - b).abs());
            }
        }
    }
    if errs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let n = errs.len();
    let mae = errs.iter().sum::<f64>() / n as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let mut hist = Histogram::new(spec);
    for &e in &errs {
        hist.add(e);
    }
    errs.sort_by(f64::total_cmp);
    let median_ae = if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    };
    Ok(DsmErrorSummary {
        mae,
        median_ae,
        rmse,
        histogram: hist,
        n_cells: n,
    })
}

/// Fraction of grid cells with centers inside `aoi` that hold data.
pub fn completeness(grid: &RasterGrid, aoi: &Extent) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut valid = 0usize;
    for row in 0..grid.nrows() {
        for col in 0..grid.ncols() {
            let (x, y) = grid.cell_center(col, row)?;
            if aoi.contains(x, y) {
                total += 1;
                if grid.get(col, row).is_some() {
                    valid += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyAoi);
    }
    Ok(valid as f64 / total as f64)
}

/// `|dsm - gt|` where both are valid, nodata elsewhere.
pub fn error_raster(dsm: &RasterGrid, gt: &RasterGrid) -> Result<RasterGrid, EvalError> {
    if !dsm.same_geometry(gt) {
        return Err(EvalError::GridMismatch);
    }
    let mut out = dsm.clone();
    for row in 0..dsm.nrows() {
        for col in 0..dsm.ncols() {
            let v = match (dsm.get(col, row), gt.get(col, row)) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            };
            out.set(col, row, v);
        }
    }
    Ok(out)
}

/// Copy of `grid` with cells where `mask` is zero or nodata set to nodata.
pub fn apply_mask(grid: &RasterGrid, mask: &RasterGrid) -> Result<RasterGrid, EvalError> {
    if !grid.same_geometry(mask) {
        return Err(EvalError::GridMismatch);
    }
    let mut out = grid.clone();
    for row in 0..grid.nrows() {
        for col in 0..grid.ncols() {
            if !selected(Some(mask), col, row) {
                out.set(col, row, None);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<DepthErrorSummary>,
    pub mrmse: Option<f64>,
    pub pooled_rmse: Option<f64>,
    pub dsm: Option<DsmErrorSummary>,
    pub dsm_single_coverage: Option<DsmErrorSummary>,
    pub dsm_multi_coverage: Option<DsmErrorSummary>,
    pub completeness: Option<f64>,
    /// Completeness after dropping cells seen by fewer than two images.
    pub completeness_stereo_baseline: Option<f64>,
    pub single_coverage_fraction: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text rendering of a report.
pub fn format_report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8}  {:>12}  {:>10}", "image", "rmse_m", "pixels");
    for img in &r.images {
        let _ = writeln!(s, "{:>8}  {:>12.4}  {:>10}", img.image_id, img.rmse, img.n_compared);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "mrmse_m           {}", fmt_opt(r.mrmse));
    let _ = writeln!(s, "pooled_rmse_m     {}", fmt_opt(r.pooled_rmse));
    for (name, d) in [
        ("dsm", &r.dsm),
        ("dsm_single_view", &r.dsm_single_coverage),
        ("dsm_multi_view", &r.dsm_multi_coverage),
    ] {
        if let Some(d) = d {
            let _ = writeln!(
                s,
                "{name:<17} mae {:.4}  median {:.4}  rmse {:.4}  cells {}",
                d.mae, d.median_ae, d.rmse, d.n_cells
            );
        }
    }
    let _ = writeln!(s, "completeness      {}", fmt_opt(r.completeness));
    let _ = writeln!(s, "stereo_baseline   {}", fmt_opt(r.completeness_stereo_baseline));
    let _ = writeln!(s, "single_coverage   {}", fmt_opt(r.single_coverage_fraction));
    if let Some(h) = r.dsm.as_ref().map(|d| &d.histogram) {
        let _ = writeln!(s);
        let _ = writeln!(s, "abs error histogram (m)");
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "  [{:>5.1}, {:>5.1})  {c}", h.edges[i], h.edges[i + 1]);
        }
        let _ = writeln!(s, "  >= {:>5.1}        {}", h.edges[h.edges.len() - 1], h.overflow);
    }
    s
}
