//! Synthetic scenes with exact ground truth: terrain and boxes, nadir
//! flight plans, ray-cast depth and color, tie points, and hidden-warp
//! mono depth maps, written in the same formats as real datasets.

mod dataset;
mod mono;
mod plan;
mod render;
mod scene;
mod tiepoints;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use dataset::{
    generate, image_name, truth_dsm, write_dataset, MANIFEST_FILE, TRUTH_DEPTH_PATTERN,
    TRUTH_DSM_FILE, TRUTH_FILE, MonoConfig, SynthDataset, SynthSpec, SynthView,
    TruthRecord, WarpFamily, WarpRecord,
};
pub use mono::{degrade_to_mono, mono_sigma_for_depth, MonoDegradeSpec, Warp};
pub use plan::{along_track_spacing, footprint, plan_flight, strip_spacing, FlightPlan, Footprint};
pub use render::{oracle_depth, render_depth, render_view, RenderedView};
pub use scene::{random_scene, texture, Building, Bump, RandomSceneSpec, SceneSpec, MARCH_STEP};
pub use tiepoints::{make_tiepoints, TiePointOptions, TieView};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("point ({x}, {y}) lies outside the scene extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("infeasible overlap: {0}")]
    InfeasibleOverlap(String),
    #[error("invalid flight plan: {0}")]
    InvalidPlan(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("warp pole at z = {pole} lies inside the scene depth range [{lo}, {hi}]")]
    PoleInRange { pole: f64, lo: f64, hi: f64 },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("invalid warp: {0}")]
    InvalidWarp(String),
    #[error(transparent)]
    Raster(#[from] crate::rasters::RasterError),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

impl SynthError {
    /// True for errors caused by the spec rather than by I/O.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, SynthError::Ingest(_))
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_TIE_SAMPLE: u64 = 3;
const STREAM_TIE_NOISE: u64 = 4;
const STREAM_WARP: u64 = 5;
const STREAM_MONO: u64 = 6;

/// Independent RNG stream for `(seed, purpose, index)`.
pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ index);
    rng
}
