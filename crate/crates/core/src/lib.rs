//! Metric depth recovery for aerial monocular depth maps, plus the
//! surrounding pipeline: ingest, fusion into point clouds, DSM and
//! orthophoto rasterization, evaluation, and a synthetic scene generator.

pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod pipeline;
pub mod products;
pub mod rasters;
pub mod recovery;
pub mod synth;
