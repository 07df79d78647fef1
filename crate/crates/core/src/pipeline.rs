//! Config-driven orchestration: recover, cloud, dsm, ortho and eval stages
//! writing their artifacts into one output directory.
//!
//! Each stage reads its inputs from the files the previous stage wrote
//! (cached in the [`Session`] once loaded), so stages run one at a time or
//! chained in a single process produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    apply_mask, completeness, dataset_mrmse, depth_rmse, dsm_error_stats, format_report_text,
    pooled_rmse, DepthErrorSummary, EvalReport,
};
use crate::fusion::{default_stride, depth_to_cloud, merge_clouds, voxel_downsample, PointCloud};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::ingest::{
    expand_pattern, load_manifest, load_tie_points, read_asc_grid, read_color_image,
    read_depth_pfm, read_ply, write_asc_grid, write_depth_pfm, write_ply, write_png_rgba,
    write_world_file, DatasetManifest, ImageEntry, TiePointTable,
};
use crate::products::{
    fill_holes, orthorectify, rasterize_dsm, view_counts, Aggregator, DsmConfig, OrthoConfig,
    OrthoView, ViewRanking,
};
use crate::rasters::{ColorImage, DepthKind, DepthMap, Extent, RasterGrid, DEFAULT_NODATA};
use crate::recovery::{
    apply_model, build_correspondences, fit_rational, ApplyStats, CorrespondenceStats, FitOptions,
    FitReport, FitStatus, RecoveryError,
};

pub const RECOVERED_DIR: &str = "recovered";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const DSM_FILE: &str = "dsm.asc";
pub const DSM_UNFILLED_FILE: &str = "dsm_unfilled.asc";
pub const ORTHO_FILE: &str = "ortho.png";
pub const ORTHO_WORLD_FILE: &str = "ortho.pgw";
pub const ORTHO_INDEX_FILE: &str = "ortho_view_index.asc";
pub const EVAL_JSON_FILE: &str = "eval_report.json";
pub const EVAL_TEXT_FILE: &str = "eval_report.txt";
pub const SUMMARY_FILE: &str = "run_summary.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// 2 for configuration or usage problems, 1 for data and quality failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }

    fn stage(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recover,
    Cloud,
    Dsm,
    Ortho,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Recover, Stage::Cloud, Stage::Dsm, Stage::Ortho, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Recover => "recover",
            Stage::Cloud => "cloud",
            Stage::Dsm => "dsm",
            Stage::Ortho => "ortho",
            Stage::Eval => "eval",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub recover: bool,
    pub cloud: bool,
    pub dsm: bool,
    pub ortho: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            recover: true,
            cloud: true,
            dsm: true,
            ortho: true,
            eval: true,
        }
    }
}

impl StageToggles {
    pub fn enabled(&self, s: Stage) -> bool {
        match s {
            Stage::Recover => self.recover,
            Stage::Cloud => self.cloud,
            Stage::Dsm => self.dsm,
            Stage::Ortho => self.ortho,
            Stage::Eval => self.eval,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Pixel stride; 4 for images at least 4000 px wide, else 1, when absent.
    pub stride: Option<usize>,
    /// Voxel size for optional downsampling, meters.
    pub voxel: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmSection {
    /// Twice the mean ground sampling distance when absent.
    pub cell_size: Option<f64>,
    pub aggregator: Aggregator,
    pub fill_radius: usize,
    pub fill_k: usize,
    pub aoi: Option<Extent>,
    pub nodata: f64,
}

impl Default for DsmSection {
    fn default() -> Self {
        let d = DsmConfig::default();
        Self {
            cell_size: None,
            aggregator: d.aggregator,
            fill_radius: d.fill_radius,
            fill_k: d.fill_k,
            aoi: None,
            nodata: d.nodata,
        }
    }
}

impl DsmSection {
    pub fn to_config(&self, cell_size: f64) -> DsmConfig {
        DsmConfig {
            cell_size,
            aggregator: self.aggregator,
            fill_radius: self.fill_radius,
            fill_k: self.fill_k,
            aoi: self.aoi,
            nodata: self.nodata,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoSection {
    /// The DSM cell size when absent.
    pub cell_size: Option<f64>,
    pub occlusion_tolerance: f64,
    pub ranking: ViewRanking,
}

impl Default for OrthoSection {
    fn default() -> Self {
        let d = OrthoConfig::default();
        Self {
            cell_size: None,
            occlusion_tolerance: d.occlusion_tolerance,
            ranking: d.ranking,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruth {
    /// Metric depth path pattern with `{name}` / `{id}`.
    pub depth_maps: Option<String>,
    /// Ground-truth DSM (ESRI ASCII grid) on the same grid as the output DSM.
    pub dsm: Option<PathBuf>,
    /// Area for completeness; the DSM AOI or grid extent when absent.
    pub aoi: Option<Extent>,
}

fn default_log_level() -> String {
    "info".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub recovery: FitOptions,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub dsm: DsmSection,
    #[serde(default)]
    pub ortho: OrthoSection,
    #[serde(default)]
    pub ground_truth: Option<GroundTruth>,
    /// Worker threads; the caller's default when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Recorded in the run summary; the stages themselves draw no random numbers.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_level")]
    pub log_level: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn new(manifest: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            manifest,
            output_dir,
            stages: StageToggles::default(),
            recovery: FitOptions::default(),
            fusion: FusionSection::default(),
            dsm: DsmSection::default(),
            ortho: OrthoSection::default(),
            ground_truth: None,
            workers: None,
            seed: 0,
            log_level: default_log_level(),
        }
    }

    /// Parses JSON; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.manifest = resolve(base_dir, &cfg.manifest);
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        if let Some(gt) = &mut cfg.ground_truth {
            if let Some(p) = &gt.depth_maps {
                gt.depth_maps = Some(resolve(base_dir, Path::new(p)).to_string_lossy().into_owned());
            }
            if let Some(p) = &gt.dsm {
                gt.dsm = Some(resolve(base_dir, p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        let r = &self.recovery;
        if !(r.tol > 0.0) || r.max_iter == 0 || r.min_pairs == 0 || !(r.range_inflation >= 0.0) {
            return bad("recovery: tol must be positive, max_iter and min_pairs at least 1, range_inflation non-negative".into());
        }
        if r.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return bad("recovery.huber_delta must be positive".into());
        }
        if self.fusion.stride == Some(0) {
            return bad("fusion.stride must be at least 1".into());
        }
        if self.fusion.voxel.is_some_and(|v| !(v > 0.0)) {
            return bad("fusion.voxel must be positive".into());
        }
        if self.dsm.cell_size.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("dsm.cell_size must be positive".into());
        }
        if self.dsm.fill_k == 0 {
            return bad("dsm.fill_k must be at least 1".into());
        }
        if self.dsm.aoi.is_some_and(|a| !a.is_valid()) {
            return bad("dsm.aoi is empty".into());
        }
        if self.ortho.cell_size.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("ortho.cell_size must be positive".into());
        }
        if !(self.ortho.occlusion_tolerance > 0.0) {
            return bad("ortho.occlusion_tolerance must be positive".into());
        }
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn recovered_path(&self, image: &ImageEntry) -> PathBuf {
        self.output_dir.join(RECOVERED_DIR).join(format!("{}.pfm", image.name))
    }
}

/// Per-image line of the fit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFit {
    pub image_id: u32,
    pub name: String,
    pub status: Option<FitStatus>,
    pub recovered: bool,
    pub coefficients: Option<[f64; 4]>,
    pub mono_range: Option<[f64; 2]>,
    pub fit: Option<FitReport>,
    pub correspondences: Option<CorrespondenceStats>,
    pub apply: Option<ApplyStats>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverReport {
    pub images: Vec<ImageFit>,
    pub recovered: usize,
    /// Images without a written metric depth map.
    pub skipped: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    /// `ok`, `skipped` or `disabled`.
    pub status: String,
    pub seconds: f64,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub workers: usize,
    pub stages: Vec<StageSummary>,
    pub eval: Option<EvalReport>,
}

fn write_json<T: Serialize>(value: &T, path: &Path, stage: Stage) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::stage(stage, e))?;
    }
    std::fs::write(path, text).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

/// Loaded inputs and intermediate results of one run.
pub struct Session {
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    tie_points: Option<TiePointTable>,
    recovered: Option<BTreeMap<u32, DepthMap>>,
    colors: BTreeMap<u32, Option<ColorImage>>,
    cloud: Option<PointCloud>,
    dsm: Option<RasterGrid>,
    summaries: Vec<StageSummary>,
    eval: Option<EvalReport>,
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let manifest = load_manifest(&config.manifest)
            .map_err(|e| PipelineError::Config(format!("manifest: {e}")))?;
        std::fs::create_dir_all(&config.output_dir).map_err(|e| {
            PipelineError::Config(format!("output directory {}: {e}", config.output_dir.display()))
        })?;
        Ok(Self {
            config,
            manifest,
            tie_points: None,
            recovered: None,
            colors: BTreeMap::new(),
            cloud: None,
            dsm: None,
            summaries: Vec::new(),
            eval: None,
        })
    }

    pub fn summaries(&self) -> &[StageSummary] {
        &self.summaries
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let start = Instant::now();
        log::info!("stage {stage}: start");
        let details = match stage {
            Stage::Recover => self.recover()?,
            Stage::Cloud => self.build_cloud()?,
            Stage::Dsm => self.build_dsm()?,
            Stage::Ortho => self.build_ortho()?,
            Stage::Eval => self.evaluate()?,
        };
        let status = if details.get("skip_reason").is_some() { "skipped" } else { "ok" };
        let seconds = start.elapsed().as_secs_f64();
        log::info!("stage {stage}: {status} in {seconds:.2} s");
        self.summaries.push(StageSummary {
            stage,
            status: status.into(),
            seconds,
            details,
        });
        Ok(())
    }

    fn tie_points(&mut self) -> Result<&TiePointTable, PipelineError> {
        if self.tie_points.is_none() {
            let t = load_tie_points(&self.manifest).map_err(|e| PipelineError::stage(Stage::Recover, e))?;
            self.tie_points = Some(t);
        }
        Ok(self.tie_points.as_ref().expect("just loaded"))
    }

    fn recover(&mut self) -> Result<serde_json::Value, PipelineError> {
        let opts = self.config.recovery;
        self.tie_points()?;
        let table = self.tie_points.as_ref().expect("loaded");
        let manifest = &self.manifest;
        let results: Vec<(ImageFit, Option<DepthMap>)> = manifest
            .images
            .par_iter()
            .map(|img| recover_image(manifest, img, table, &opts))
            .collect();

        let mut recovered = BTreeMap::new();
        let mut images = Vec::with_capacity(results.len());
        for (fit, map) in results {
            if let Some(map) = map {
                let path = self.config.recovered_path(
                    manifest.image(fit.image_id).expect("image from manifest"),
                );
                write_depth_pfm(&map, &path).map_err(|e| PipelineError::stage(Stage::Recover, e))?;
                recovered.insert(fit.image_id, map);
            }
            images.push(fit);
        }
        let skipped: Vec<u32> = images.iter().filter(|f| !f.recovered).map(|f| f.image_id).collect();
        let report = RecoverReport {
            recovered: recovered.len(),
            skipped: skipped.clone(),
            images,
        };
        write_json(&report, &self.config.out(FIT_REPORT_FILE), Stage::Recover)?;
        if !skipped.is_empty() {
            log::warn!("skipped images: {skipped:?}");
        }
        if recovered.is_empty() {
            return Err(PipelineError::stage(Stage::Recover, "no image was recovered"));
        }
        let n = recovered.len();
        // later stages read the stored precision, same as a standalone run
        self.recovered = None;
        Ok(serde_json::json!({ "recovered": n, "skipped": skipped }))
    }

    fn recovered(&mut self, stage: Stage) -> Result<&BTreeMap<u32, DepthMap>, PipelineError> {
        if self.recovered.is_none() {
            let report: RecoverReport = read_json(&self.config.out(FIT_REPORT_FILE), stage)?;
            let mut maps = BTreeMap::new();
            for fit in report.images.iter().filter(|f| f.recovered) {
                let img = self.manifest.image(fit.image_id).ok_or_else(|| {
                    PipelineError::stage(stage, format!("fit report lists unknown image {}", fit.image_id))
                })?;
                let map = read_depth_pfm(&self.config.recovered_path(img), DepthKind::Metric)
                    .map_err(|e| PipelineError::stage(stage, e))?;
                maps.insert(fit.image_id, map);
            }
            self.recovered = Some(maps);
        }
        Ok(self.recovered.as_ref().expect("just loaded"))
    }

    fn color(&mut self, image_id: u32) -> Option<&ColorImage> {
        if !self.colors.contains_key(&image_id) {
            let img = self.manifest.image(image_id).and_then(|i| {
                let path = self.manifest.image_path(i)?;
                let k = self.manifest.camera(i);
                match read_color_image(&path) {
                    Ok(c) if c.width() == k.width as usize && c.height() == k.height as usize => Some(c),
                    Ok(_) => {
                        log::warn!("image {image_id}: color size differs from the camera, ignored");
                        None
                    }
                    Err(e) => {
                        log::warn!("image {image_id}: {e}");
                        None
                    }
                }
            });
            self.colors.insert(image_id, img);
        }
        self.colors[&image_id].as_ref()
    }

    fn build_cloud(&mut self) -> Result<serde_json::Value, PipelineError> {
        self.recovered(Stage::Cloud)?;
        let ids: Vec<u32> = self.recovered.as_ref().expect("loaded").keys().copied().collect();
        for &id in &ids {
            self.color(id);
        }
        let maps = self.recovered.as_ref().expect("loaded");
        let manifest = &self.manifest;
        let colors = &self.colors;
        let stride = self.config.fusion.stride;
        let clouds: Vec<PointCloud> = ids
            .par_iter()
            .map(|id| {
                let img = manifest.image(*id).expect("recovered image is in the manifest");
                let k = manifest.camera(img);
                let s = stride.unwrap_or_else(|| default_stride(k.width));
                depth_to_cloud(k, &img.pose, &maps[id], colors[id].as_ref(), s, *id)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::stage(Stage::Cloud, e))?;
        let mut cloud = merge_clouds(clouds);
        let raw_points = cloud.len();
        if let Some(v) = self.config.fusion.voxel {
            cloud = voxel_downsample(&cloud, v).map_err(|e| PipelineError::stage(Stage::Cloud, e))?;
        }
        write_ply(&cloud, &self.config.out(CLOUD_FILE)).map_err(|e| PipelineError::stage(Stage::Cloud, e))?;
        let n = cloud.len();
        self.cloud = None;
        Ok(serde_json::json!({ "images": ids.len(), "points": n, "points_before_voxel": raw_points }))
    }

    fn cloud(&mut self, stage: Stage) -> Result<&PointCloud, PipelineError> {
        if self.cloud.is_none() {
            let c = read_ply(&self.config.out(CLOUD_FILE)).map_err(|e| PipelineError::stage(stage, e))?;
            self.cloud = Some(c);
        }
        Ok(self.cloud.as_ref().expect("just loaded"))
    }

    /// Twice the mean ground sampling distance of the cameras over the cloud.
    fn default_cell_size(&self, cloud: &PointCloud) -> Result<f64, PipelineError> {
        let n = cloud.len().max(1) as f64;
        let z_ref = cloud.points().iter().map(|p| p.position.z).sum::<f64>() / n;
        let mut acc = 0.0;
        let mut count = 0usize;
        for img in &self.manifest.images {
            let k = self.manifest.camera(img);
            let h = (img.pose.center().z - z_ref).abs();
            acc += h / (0.5 * (k.fx + k.fy));
            count += 1;
        }
        let gsd = acc / count.max(1) as f64;
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(PipelineError::stage(
                Stage::Dsm,
                "cannot derive a default cell size; set dsm.cell_size",
            ));
        }
        Ok(2.0 * gsd)
    }

    fn build_dsm(&mut self) -> Result<serde_json::Value, PipelineError> {
        self.cloud(Stage::Dsm)?;
        let cloud = self.cloud.as_ref().expect("loaded");
        let cell = match self.config.dsm.cell_size {
            Some(c) => c,
            None => self.default_cell_size(cloud)?,
        };
        let cfg = self.config.dsm.to_config(cell);
        let raw = rasterize_dsm(cloud, &cfg).map_err(|e| PipelineError::stage(Stage::Dsm, e))?;
        let filled = fill_holes(&raw, &cfg);
        let err = |e| PipelineError::stage(Stage::Dsm, e);
        write_asc_grid(&raw, &self.config.out(DSM_UNFILLED_FILE)).map_err(err)?;
        write_asc_grid(&filled, &self.config.out(DSM_FILE)).map_err(err)?;
        let details = serde_json::json!({
            "cell_size": cell,
            "ncols": filled.ncols(),
            "nrows": filled.nrows(),
            "valid_before_fill": raw.valid_count(),
            "valid_after_fill": filled.valid_count(),
        });
        self.dsm = None;
        Ok(details)
    }

    fn dsm(&mut self, stage: Stage) -> Result<&RasterGrid, PipelineError> {
        if self.dsm.is_none() {
            let g = read_asc_grid(&self.config.out(DSM_FILE)).map_err(|e| PipelineError::stage(stage, e))?;
            self.dsm = Some(g);
        }
        Ok(self.dsm.as_ref().expect("just loaded"))
    }

    fn build_ortho(&mut self) -> Result<serde_json::Value, PipelineError> {
        self.dsm(Stage::Ortho)?;
        self.recovered(Stage::Ortho)?;
        let ids: Vec<u32> = self.recovered.as_ref().expect("loaded").keys().copied().collect();
        for &id in &ids {
            self.color(id);
        }
        let dsm = self.dsm.as_ref().expect("loaded");
        let maps = self.recovered.as_ref().expect("loaded");
        let views: Vec<OrthoView<'_>> = ids
            .iter()
            .filter_map(|id| {
                let img = self.manifest.image(*id)?;
                Some(OrthoView {
                    image_id: *id,
                    pose: &img.pose,
                    intrinsics: self.manifest.camera(img),
                    color: self.colors[id].as_ref()?,
                    depth: &maps[id],
                })
            })
            .collect();
        let cfg = OrthoConfig {
            cell_size: self.config.ortho.cell_size.unwrap_or(dsm.cell_size),
            occlusion_tolerance: self.config.ortho.occlusion_tolerance,
            ranking: self.config.ortho.ranking,
        };
        let ortho = orthorectify(dsm, &views, &cfg).map_err(|e| PipelineError::stage(Stage::Ortho, e))?;
        let err = |e| PipelineError::stage(Stage::Ortho, e);
        let (w, h) = (ortho.red.ncols(), ortho.red.nrows());
        write_png_rgba(w, h, &ortho.pixels(), &self.config.out(ORTHO_FILE)).map_err(err)?;
        write_world_file(&ortho.red, &self.config.out(ORTHO_WORLD_FILE)).map_err(err)?;
        write_asc_grid(&ortho.view_index, &self.config.out(ORTHO_INDEX_FILE)).map_err(err)?;
        Ok(serde_json::json!({
            "views": views.len(),
            "ncols": w,
            "nrows": h,
            "textured_cells": ortho.view_index.valid_count(),
        }))
    }

    fn evaluate(&mut self) -> Result<serde_json::Value, PipelineError> {
        let Some(gt) = self.config.ground_truth.clone().filter(|g| g.depth_maps.is_some() || g.dsm.is_some())
        else {
            log::warn!("eval: no ground truth configured, skipping");
            return Ok(serde_json::json!({ "skip_reason": "no ground truth" }));
        };
        let stage = Stage::Eval;
        let err = |e: &dyn std::fmt::Display| PipelineError::stage(stage, e);
        let mut report = EvalReport {
            images: Vec::new(),
            mrmse: None,
            pooled_rmse: None,
            dsm: None,
            dsm_single_coverage: None,
            dsm_multi_coverage: None,
            completeness: None,
            completeness_stereo_baseline: None,
            single_coverage_fraction: None,
        };

        if let Some(pattern) = &gt.depth_maps {
            self.recovered(stage)?;
            let maps = self.recovered.as_ref().expect("loaded");
            let mut summaries: Vec<DepthErrorSummary> = Vec::new();
            for (id, map) in maps {
                let img = self.manifest.image(*id).expect("recovered image is in the manifest");
                let path = PathBuf::from(expand_pattern(pattern, img));
                let truth = read_depth_pfm(&path, DepthKind::Metric).map_err(|e| err(&e))?;
                match depth_rmse(*id, map, &truth) {
                    Ok(s) => summaries.push(s),
                    Err(e) => log::warn!("image {id}: {e}"),
                }
            }
            report.mrmse = dataset_mrmse(&summaries).ok();
            report.pooled_rmse = pooled_rmse(&summaries).ok();
            report.images = summaries;
        }

        if self.config.stages.dsm || self.config.out(DSM_FILE).is_file() {
            self.dsm(stage)?;
            let dsm = self.dsm.as_ref().expect("loaded");
            let cameras: Vec<(CameraPose, CameraIntrinsics)> = self
                .manifest
                .images
                .iter()
                .map(|i| (i.pose, *self.manifest.camera(i)))
                .collect();
            let counts = view_counts(&cameras, dsm);
            let mask = |f: &dyn Fn(usize) -> bool| {
                let vals = counts.iter().map(|&n| if f(n) { 1.0 } else { 0.0 }).collect();
                RasterGrid::from_values(dsm.origin_x, dsm.origin_y, dsm.cell_size, dsm.ncols(), dsm.nrows(), vals, dsm.nodata)
            };
            let multi = mask(&|n| n >= 2).map_err(|e| err(&e))?;
            let single = mask(&|n| n == 1).map_err(|e| err(&e))?;
            let aoi = gt.aoi.or(self.config.dsm.aoi).unwrap_or_else(|| dsm.extent());
            report.completeness = Some(completeness(dsm, &aoi).map_err(|e| err(&e))?);
            let baseline = apply_mask(dsm, &multi).map_err(|e| err(&e))?;
            report.completeness_stereo_baseline = Some(completeness(&baseline, &aoi).map_err(|e| err(&e))?);
            let in_aoi = aoi_mask(dsm, &aoi);
            let total = in_aoi.iter().filter(|b| **b).count().max(1);
            let single_n = counts.iter().zip(&in_aoi).filter(|(n, a)| **n == 1 && **a).count();
            report.single_coverage_fraction = Some(single_n as f64 / total as f64);

            if let Some(path) = &gt.dsm {
                let truth = read_asc_grid(path).map_err(|e| err(&e))?;
                report.dsm = Some(dsm_error_stats(dsm, &truth, None).map_err(|e| err(&e))?);
                report.dsm_single_coverage = dsm_error_stats(dsm, &truth, Some(&single)).ok();
                report.dsm_multi_coverage = dsm_error_stats(dsm, &truth, Some(&multi)).ok();
            }
        }

        write_json(&report, &self.config.out(EVAL_JSON_FILE), stage)?;
        std::fs::write(self.config.out(EVAL_TEXT_FILE), format_report_text(&report))
            .map_err(|e| err(&e))?;
        let details = serde_json::json!({
            "mrmse": report.mrmse,
            "completeness": report.completeness,
            "dsm_mae": report.dsm.as_ref().map(|d| d.mae),
        });
        self.eval = Some(report);
        Ok(details)
    }

    /// Writes `run_summary.json`.
    pub fn write_summary(&self, workers: usize) -> Result<RunSummary, PipelineError> {
        let summary = RunSummary {
            seed: self.config.seed,
            workers,
            stages: self.summaries.clone(),
            eval: self.eval.clone(),
        };
        write_json(&summary, &self.config.out(SUMMARY_FILE), Stage::Eval)?;
        Ok(summary)
    }
}

fn aoi_mask(grid: &RasterGrid, aoi: &Extent) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid.ncols() * grid.nrows());
    for row in 0..grid.nrows() {
        for col in 0..grid.ncols() {
            let (x, y) = grid.cell_center(col, row).expect("in range");
            out.push(aoi.contains(x, y));
        }
    }
    out
}

fn recover_image(
    manifest: &DatasetManifest,
    img: &ImageEntry,
    table: &TiePointTable,
    opts: &FitOptions,
) -> (ImageFit, Option<DepthMap>) {
    let mut fit = ImageFit {
        image_id: img.id,
        name: img.name.clone(),
        status: None,
        recovered: false,
        coefficients: None,
        mono_range: None,
        fit: None,
        correspondences: None,
        apply: None,
        error: None,
    };
    let path = manifest.depth_map_path(img);
    let mono = match read_depth_pfm(&path, manifest.depth_kind) {
        Ok(m) => m,
        Err(e) => {
            log::error!("image {} ({}): {e}", img.id, img.name);
            fit.error = Some(e.to_string());
            return (fit, None);
        }
    };
    let k = manifest.camera(img);
    let (w, h) = (k.width as usize, k.height as usize);
    let mono = if mono.width() == w && mono.height() == h {
        mono
    } else {
        match crate::rasters::resample(&mono, w, h) {
            Ok(m) => m,
            Err(e) => {
                fit.error = Some(e.to_string());
                return (fit, None);
            }
        }
    };
    let (pairs, stats) = build_correspondences(img.id, &img.pose, k, table, &mono);
    fit.correspondences = Some(stats);
    let (model, report) = match fit_rational(&pairs, opts) {
        Ok(r) => r,
        Err(e @ (RecoveryError::InsufficientPairs { .. } | RecoveryError::DegenerateSystem)) => {
            log::warn!("image {} ({}): {e}", img.id, img.name);
            fit.status = Some(FitStatus::RejectedInsufficient);
            fit.error = Some(e.to_string());
            return (fit, None);
        }
        Err(e) => {
            log::error!("image {} ({}): {e}", img.id, img.name);
            fit.error = Some(e.to_string());
            return (fit, None);
        }
    };
    fit.status = Some(report.status);
    fit.coefficients = Some(model.coefficients());
    fit.mono_range = Some(model.mono_range);
    fit.fit = Some(report);
    if !matches!(report.status, FitStatus::Ok | FitStatus::Degraded) {
        log::warn!("image {} ({}): fit {}", img.id, img.name, report.status);
        return (fit, None);
    }
    match apply_model(&model, &mono, opts.range_inflation) {
        Ok((map, stats)) => {
            fit.apply = Some(stats);
            fit.recovered = true;
            (fit, Some(map))
        }
        Err(e) => {
            fit.error = Some(e.to_string());
            (fit, None)
        }
    }
}

/// Runs `f` inside a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the enabled stages in order and writes the run summary.
pub fn run_pipeline(config: RunConfig, workers: usize) -> Result<RunSummary, PipelineError> {
    with_workers(workers, move || {
        let mut session = Session::open(config)?;
        for stage in Stage::ALL {
            if session.config.stages.enabled(stage) {
                session.run_stage(stage)?;
            } else {
                session.summaries.push(StageSummary {
                    stage,
                    status: "disabled".into(),
                    seconds: 0.0,
                    details: serde_json::Value::Null,
                });
            }
        }
        session.write_summary(workers)
    })?
}

/// Runs a single stage, reading earlier results from the output directory.
pub fn run_single_stage(config: RunConfig, stage: Stage, workers: usize) -> Result<RunSummary, PipelineError> {
    with_workers(workers, move || {
        let mut session = Session::open(config)?;
        session.run_stage(stage)?;
        Ok(RunSummary {
            seed: session.config.seed,
            workers,
            stages: session.summaries.clone(),
            eval: session.eval.clone(),
        })
    })?
}

/// Config for a dataset written by the synthetic generator, with ground
/// truth wired in and the DSM gridded over the flight area.
pub fn synth_run_config(dataset_dir: &Path, output_dir: &Path, aoi: Extent, cell_size: Option<f64>) -> RunConfig {
    let mut cfg = RunConfig::new(dataset_dir.join(crate::synth::MANIFEST_FILE), output_dir.to_path_buf());
    cfg.dsm.aoi = Some(aoi);
    cfg.dsm.cell_size = cell_size;
    cfg.dsm.nodata = DEFAULT_NODATA;
    cfg.ground_truth = Some(GroundTruth {
        depth_maps: Some(
            dataset_dir
                .join(crate::synth::TRUTH_DEPTH_PATTERN)
                .to_string_lossy()
                .into_owned(),
        ),
        dsm: cell_size.map(|_| dataset_dir.join(crate::synth::TRUTH_DSM_FILE)),
        aoi: Some(aoi),
    });
    cfg
}
