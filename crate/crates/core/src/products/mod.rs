//! Raster products: DSM, hole filling, true orthophoto, coverage masks.

mod dsm;
mod ortho;

use thiserror::Error;

use crate::rasters::RasterError;

pub use dsm::{fill_holes, rasterize_dsm, Aggregator, DsmConfig};
pub use ortho::{coverage_mask, orthorectify, view_counts, OrthoConfig, OrthoView, Orthophoto, ViewRanking};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProductsError {
    #[error("no points and no AOI: raster extent is empty")]
    EmptyExtent,
    #[error("orthorectification needs at least one image")]
    NoViews,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}
