//! File formats: dataset manifest, SfM text triad, PFM depth rasters,
//! binary PLY clouds, ESRI ASCII grids, and 8-bit color images.

mod asc;
mod image_io;
mod manifest;
mod pfm;
mod ply;
mod sfm;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use asc::{format_sig6, parse_asc_grid, read_asc_grid, write_asc_grid};
pub use image_io::{read_color_image, write_png_rgb, write_png_rgba, write_world_file};
pub use manifest::{
    expand_pattern, load_manifest, write_manifest, DatasetManifest, ImageEntry, MANIFEST_SCHEMA,
};
pub use pfm::{parse_pfm, read_depth_pfm, write_depth_pfm, encode_pfm};
pub use ply::{encode_ply, parse_ply, read_ply, write_ply};
pub use sfm::{
    load_tie_points, parse_sparse_model, parse_sparse_model_str, reprojection_check,
    write_sparse_model, Observation, ReprojectionViolation, SparseModel, TiePoint, TiePointTable,
    CAMERAS_FILE, IMAGES_FILE, POINTS_FILE,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    MalformedLine {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{file}:{line}: unsupported camera model {model} (only distortion-free pinhole models are accepted)")]
    UnsupportedCameraModel {
        file: String,
        line: usize,
        model: String,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: expected {expected} bytes of payload, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("unsupported PLY variant: {0}")]
    UnsupportedPlyVariant(String),
    #[error("schema error at {field}: {reason}")]
    Schema { field: String, reason: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Raster(#[from] crate::rasters::RasterError),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        IngestError::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(path.to_path_buf())
        } else {
            IngestError::io(path, e)
        }
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| IngestError::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| IngestError::io(path, e))
}
