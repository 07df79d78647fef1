//! Whole synthetic datasets: generation in memory and writing to disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::ingest::{
    write_asc_grid, write_depth_pfm, write_manifest, write_png_rgb, write_sparse_model,
    DatasetManifest, ImageEntry, TiePointTable,
};
use crate::rasters::{ColorImage, DepthKind, DepthMap, Extent, RasterGrid};

use super::mono::{degrade_to_mono, mono_sigma_for_depth, MonoDegradeSpec, Warp};
use super::plan::{plan_flight, FlightPlan};
use super::render::render_view;
use super::scene::{random_scene, RandomSceneSpec, SceneSpec};
use super::tiepoints::{make_tiepoints, TiePointOptions, TieView};
use super::{stream, SynthError, STREAM_SCENE, STREAM_WARP};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_DEPTH_PATTERN: &str = "truth/depth/{name}.pfm";
pub const TRUTH_DSM_FILE: &str = "truth/dsm.asc";
pub const TRUTH_FILE: &str = "truth/truth.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpFamily {
    #[default]
    Rational,
    Power,
}

fn relative() -> DepthKind {
    DepthKind::Relative
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoConfig {
    #[serde(default = "relative")]
    pub kind: DepthKind,
    /// Family of the per-image random warps.
    #[serde(default)]
    pub family: WarpFamily,
    /// One warp for every image instead of random ones.
    #[serde(default)]
    pub warp: Option<Warp>,
    /// Noise in meters of depth at mid-range, converted to mono units per image.
    #[serde(default)]
    pub noise_depth_sigma: f64,
}

impl Default for MonoConfig {
    fn default() -> Self {
        Self {
            kind: DepthKind::Relative,
            family: WarpFamily::Rational,
            warp: None,
            noise_depth_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    pub scene: SceneSpec,
    /// Random features appended to `scene`.
    #[serde(default)]
    pub random_scene: Option<RandomSceneSpec>,
    pub flight: FlightPlan,
    #[serde(default)]
    pub tie_points: TiePointOptions,
    #[serde(default)]
    pub mono: MonoConfig,
    /// Cell size of the ground-truth DSM over the flight AOI; none when absent.
    #[serde(default)]
    pub truth_dsm_cell_size: Option<f64>,
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn aoi(&self) -> Extent {
        self.flight.aoi.unwrap_or(self.scene.extent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub image_id: u32,
    pub name: String,
    pub pose: CameraPose,
    pub depth: DepthMap,
    pub color: ColorImage,
    pub mono: DepthMap,
    pub warp: Warp,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Final scene, random features included.
    pub scene: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub aoi: Extent,
    pub kind: DepthKind,
    pub views: Vec<SynthView>,
    pub tie_points: TiePointTable,
    pub truth_dsm: Option<RasterGrid>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    pub image_id: u32,
    pub name: String,
    pub warp: Warp,
    pub noise_sigma: f64,
}

/// Hidden parameters written next to the dataset for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub scene: SceneSpec,
    pub aoi: Extent,
    pub depth_kind: DepthKind,
    pub warps: Vec<WarpRecord>,
}

pub fn image_name(id: u32) -> String {
    format!("IMG_{id:04}")
}

/// Surface elevation at every cell center of a grid covering `aoi`.
pub fn truth_dsm(scene: &SceneSpec, aoi: &Extent, cell_size: f64) -> Result<RasterGrid, SynthError> {
    let mut grid = RasterGrid::covering(*aoi, cell_size, -9999.0)?;
    for row in 0..grid.nrows() {
        for col in 0..grid.ncols() {
            let (x, y) = grid.cell_center(col, row)?;
            let z = if scene.extent.contains(x, y) {
                Some(scene.surface(x, y))
            } else {
                None
            };
            grid.set(col, row, z);
        }
    }
    Ok(grid)
}

/// Reference interval for random warps: the image depth range, widened
/// symmetrically to at least half its mid depth.
fn warp_interval(lo: f64, hi: f64) -> (f64, f64) {
    let mid = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(0.25 * mid);
    ((mid - half).max(0.5 * lo), mid + half)
}

fn choose_warp(spec: &SynthSpec, image_id: u32, lo: f64, hi: f64) -> Warp {
    if let Some(w) = spec.mono.warp {
        return w;
    }
    let mut rng = stream(spec.seed, STREAM_WARP, image_id as u64);
    match spec.mono.family {
        WarpFamily::Rational => Warp::random_rational(&mut rng, lo, hi, spec.mono.kind),
        WarpFamily::Power => match Warp::random_power(&mut rng) {
            Warp::Power { scale, offset, exponent } if spec.mono.kind == DepthKind::Disparity => {
                Warp::Power { scale: -scale, offset: -offset, exponent }
            }
            w => w,
        },
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    if spec.mono.kind == DepthKind::Metric {
        return Err(SynthError::InvalidSpec("mono.kind must be relative or disparity".into()));
    }
    if !(spec.mono.noise_depth_sigma >= 0.0) {
        return Err(SynthError::InvalidSpec("mono.noise_depth_sigma must be non-negative".into()));
    }
    let to = &spec.tie_points;
    if to.count == 0 || !(to.pixel_noise >= 0.0) || !(to.occlusion_tolerance > 0.0) {
        return Err(SynthError::InvalidSpec(
            "tie_points needs count >= 1, pixel_noise >= 0 and a positive occlusion tolerance".into(),
        ));
    }
    let mut scene = spec.scene.clone();
    if let Some(r) = &spec.random_scene {
        scene = random_scene(scene, r, &mut stream(spec.seed, STREAM_SCENE, 0));
    }
    scene.validate()?;
    let k = spec.flight.intrinsics;
    let flight = FlightPlan {
        aoi: Some(spec.aoi()),
        ..spec.flight
    };
    let poses = plan_flight(&scene, &flight, spec.seed)?;

    let rendered: Vec<_> = poses.par_iter().map(|p| render_view(&scene, p, &k)).collect();

    let mut warps = Vec::with_capacity(poses.len());
    let mut clean = Vec::with_capacity(poses.len());
    for (i, r) in rendered.iter().enumerate() {
        let image_id = i as u32 + 1;
        let (lo, hi) = r.depth.valid_range().unwrap_or((1.0, 2.0));
        let (wlo, whi) = warp_interval(lo, hi);
        let warp = choose_warp(spec, image_id, wlo, whi);
        let noise_sigma = mono_sigma_for_depth(&warp, spec.mono.noise_depth_sigma, 0.5 * (lo + hi));
        let degrade = MonoDegradeSpec {
            warp,
            kind: spec.mono.kind,
            noise_sigma: 0.0,
            seed: spec.seed,
        };
        clean.push(degrade_to_mono(&r.depth, &degrade, image_id)?);
        warps.push((degrade, noise_sigma));
    }

    let tie_views: Vec<TieView<'_>> = poses
        .iter()
        .zip(&rendered)
        .zip(clean.iter().zip(&warps))
        .enumerate()
        .map(|(i, ((pose, r), (mono, (w, _))))| TieView {
            image_id: i as u32 + 1,
            pose,
            depth: Some(&r.depth),
            mono: Some((mono, w.warp)),
        })
        .collect();
    let tie_points = make_tiepoints(&scene, &tie_views, &k, to, spec.seed);

    let mut views = Vec::with_capacity(poses.len());
    let parts = poses.into_iter().zip(rendered).zip(clean.into_iter().zip(warps));
    for (i, ((pose, r), (clean, (degrade, noise_sigma)))) in parts.enumerate() {
        let image_id = i as u32 + 1;
        let mono = if noise_sigma > 0.0 {
            degrade_to_mono(&r.depth, &MonoDegradeSpec { noise_sigma, ..degrade }, image_id)?
        } else {
            clean
        };
        views.push(SynthView {
            image_id,
            name: image_name(image_id),
            pose,
            depth: r.depth,
            color: r.color,
            mono,
            warp: degrade.warp,
            noise_sigma,
        });
    }

    let aoi = spec.aoi();
    let truth_dsm = spec
        .truth_dsm_cell_size
        .map(|c| truth_dsm(&scene, &aoi, c))
        .transpose()?;
    Ok(SynthDataset {
        scene,
        intrinsics: k,
        aoi,
        kind: spec.mono.kind,
        views,
        tie_points,
        truth_dsm,
        seed: spec.seed,
    })
}

impl SynthDataset {
    pub fn manifest(&self, base_dir: &Path) -> DatasetManifest {
        DatasetManifest {
            base_dir: base_dir.to_path_buf(),
            cameras: BTreeMap::from([(1, self.intrinsics)]),
            images: self
                .views
                .iter()
                .map(|v| ImageEntry {
                    id: v.image_id,
                    name: v.name.clone(),
                    path: Some(PathBuf::from(format!("images/{}.png", v.name))),
                    camera_id: 1,
                    pose: v.pose,
                })
                .collect(),
            tie_points: PathBuf::from("sparse"),
            depth_maps: "mono/{name}.pfm".into(),
            depth_kind: self.kind,
        }
    }

    pub fn truth_record(&self) -> TruthRecord {
        TruthRecord {
            seed: self.seed,
            scene: self.scene.clone(),
            aoi: self.aoi,
            depth_kind: self.kind,
            warps: self
                .views
                .iter()
                .map(|v| WarpRecord {
                    image_id: v.image_id,
                    name: v.name.clone(),
                    warp: v.warp,
                    noise_sigma: v.noise_sigma,
                })
                .collect(),
        }
    }
}

/// Writes the dataset under `dir` and returns the manifest path.
///
/// Layout: `manifest.json`, `sparse/` (SfM triad), `images/*.png`,
/// `mono/*.pfm`, and ground truth under `truth/` (`depth/*.pfm`,
/// `dsm.asc`, `truth.json`).
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<PathBuf, SynthError> {
    let manifest = ds.manifest(dir);
    for v in &ds.views {
        write_png_rgb(&v.color, &dir.join(format!("images/{}.png", v.name)))?;
        write_depth_pfm(&v.mono, &dir.join(format!("mono/{}.pfm", v.name)))?;
        write_depth_pfm(&v.depth, &dir.join(TRUTH_DEPTH_PATTERN.replace("{name}", &v.name)))?;
    }
    write_sparse_model(&dir.join("sparse"), &manifest.cameras, &manifest.images, &ds.tie_points)?;
    if let Some(g) = &ds.truth_dsm {
        write_asc_grid(g, &dir.join(TRUTH_DSM_FILE))?;
    }
    let mut truth = serde_json::to_string_pretty(&ds.truth_record()).expect("truth serializes");
    truth.push('\n');
    std::fs::write(dir.join(TRUTH_FILE), truth).map_err(|e| {
        SynthError::Ingest(crate::ingest::IngestError::Io {
            path: dir.join(TRUTH_FILE),
            source: e,
        })
    })?;
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_manifest, load_tie_points, read_depth_pfm};

    pub(crate) fn small_spec() -> SynthSpec {
        let json = r#"{
            "seed": 11,
            "scene": {"extent": {"min_x": -150, "min_y": -150, "max_x": 150, "max_y": 150},
                      "base_elevation": 200},
            "random_scene": {"bumps": 3, "buildings": 4, "amplitude": [-10, 25],
                             "sigma": [40, 90], "building_size": [10, 25],
                             "building_height": [8, 20], "margin": 10},
            "flight": {"altitude": 200, "forward_overlap": 0.6, "side_overlap": 0.6,
                       "intrinsics": {"fx": 80, "fy": 80, "cx": 31.5, "cy": 23.5,
                                      "width": 64, "height": 48},
                       "aoi": {"min_x": -120, "min_y": -120, "max_x": 120, "max_y": 120}},
            "tie_points": {"count": 400},
            "truth_dsm_cell_size": 5
        }"#;
        SynthSpec::from_json(json).unwrap()
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.views.len() >= 4);
        assert!(!a.tie_points.points.is_empty());
    }

    #[test]
    fn written_dataset_loads() {
        let spec = small_spec();
        let ds = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.images.len(), ds.views.len());
        let t = load_tie_points(&m).unwrap();
        assert_eq!(t.points.len(), ds.tie_points.points.len());
        let mono = read_depth_pfm(&m.depth_map_path(&m.images[0]), m.depth_kind).unwrap();
        assert_eq!(mono.width(), 64);
        assert!(dir.path().join(TRUTH_DSM_FILE).is_file());
        let truth: TruthRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(TRUTH_FILE)).unwrap()).unwrap();
        assert_eq!(truth.warps.len(), ds.views.len());
    }

    #[test]
    fn fixed_pole_in_range_is_rejected() {
        let mut spec = small_spec();
        // pole at z = 200, inside the ~180..200 m depth range
        spec.mono.warp = Some(Warp::Rational { alpha: 1.0, beta: 0.0, gamma: 1.0, delta: -195.0 });
        assert!(matches!(generate(&spec), Err(SynthError::PoleInRange { .. })));
    }

    #[test]
    fn truth_dsm_matches_elevation() {
        let spec = small_spec();
        let ds = generate(&spec).unwrap();
        let g = ds.truth_dsm.unwrap();
        let (x, y) = g.cell_center(3, 4).unwrap();
        assert_eq!(g.get(3, 4).unwrap(), ds.scene.elevation(x, y).unwrap());
    }
}
