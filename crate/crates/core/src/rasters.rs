//! In-memory rasters: depth maps, color images, and georeferenced grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelCoord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("raster dimensions {width}x{height} do not match {len} values")]
    SizeMismatch { width: usize, height: usize, len: usize },
    #[error("raster dimensions must be positive, got {0}x{1}")]
    EmptyDimensions(usize, usize),
    #[error("cell ({col}, {row}) outside {ncols}x{nrows} grid")]
    OutOfRange {
        col: usize,
        row: usize,
        ncols: usize,
        nrows: usize,
    },
    #[error("invalid grid geometry: {0}")]
    InvalidGrid(String),
}

/// What the numbers in a [`DepthMap`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthKind {
    /// Meters along the optical axis.
    Metric,
    /// Unitless, monotone in depth.
    Relative,
    /// Unitless, inversely related to depth.
    Disparity,
}

impl std::fmt::Display for DepthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthKind::Metric => "metric",
            DepthKind::Relative => "relative",
            DepthKind::Disparity => "disparity",
        })
    }
}

impl std::str::FromStr for DepthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metric" => Ok(DepthKind::Metric),
            "relative" => Ok(DepthKind::Relative),
            "disparity" => Ok(DepthKind::Disparity),
            other => Err(format!("unknown depth kind {other:?}")),
        }
    }
}

/// Row-major depth raster with a validity mask.
///
/// Invalid pixels always store `0.0`. For metric maps every valid value is
/// finite and strictly positive; anything else is masked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    kind: DepthKind,
}

impl DepthMap {
    pub fn new(
        width: usize,
        height: usize,
        mut values: Vec<f64>,
        mut valid: Vec<bool>,
        kind: DepthKind,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions(width, height));
        }
        let len = width * height;
        if values.len() != len || valid.len() != len {
            return Err(RasterError::SizeMismatch {
                width,
                height,
                len: values.len().min(valid.len()),
            });
        }
        for (v, ok) in values.iter_mut().zip(valid.iter_mut()) {
            if *ok && (!v.is_finite() || (kind == DepthKind::Metric && *v <= 0.0)) {
                *ok = false;
            }
            if !*ok {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
            kind,
        })
    }

    /// Builds a map where non-finite entries are invalid.
    pub fn from_values(
        width: usize,
        height: usize,
        values: Vec<f64>,
        kind: DepthKind,
    ) -> Result<Self, RasterError> {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self::new(width, height, values, valid, kind)
    }

    pub fn filled(width: usize, height: usize, value: f64, kind: DepthKind) -> Result<Self, RasterError> {
        Self::from_values(width, height, vec![value; width * height], kind)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> DepthKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    /// Value at integer pixel `(col, row)` if valid.
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        if col >= self.width || row >= self.height {
            return None;
        }
        let i = row * self.width + col;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Min and max over valid pixels.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Same pixels, different interpretation.
    pub fn with_kind(self, kind: DepthKind) -> Result<Self, RasterError> {
        Self::new(self.width, self.height, self.values, self.valid, kind)
    }

    pub fn sample_bilinear(&self, px: PixelCoord) -> Option<f64> {
        sample_bilinear(self, px)
    }
}

/// Bilinear sample over the pixel-center lattice.
///
/// Returns `None` outside `[0, w-1] x [0, h-1]` or when any of the
/// contributing neighbors is invalid. Neighbors with zero weight on an exact
/// lattice line are not consulted.
pub fn sample_bilinear(map: &DepthMap, px: PixelCoord) -> Option<f64> {
    let (u, v) = (px.u, px.v);
    if !(u >= 0.0 && v >= 0.0) {
        return None;
    }
    let max_u = (map.width - 1) as f64;
    let max_v = (map.height - 1) as f64;
    if u > max_u || v > max_v {
        return None;
    }
    let x0 = (u.floor() as usize).min(map.width - 1);
    let y0 = (v.floor() as usize).min(map.height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let v00 = map.get(x0, y0)?;
    let v10 = map.get(x1, y0)?;
    let v01 = map.get(x0, y1)?;
    let v11 = map.get(x1, y1)?;
    let top = v00 + (v10 - v00) * fx;
    let bottom = v01 + (v11 - v01) * fx;
    Some(top + (bottom - top) * fy)
}

/// Bilinear rescale to `new_w x new_h`.
///
/// Outer pixel centers map onto outer pixel centers:
/// `x_src = x_dst * (w - 1) / (new_w - 1)`; a single output column samples the source middle.
pub fn resample(map: &DepthMap, new_w: usize, new_h: usize) -> Result<DepthMap, RasterError> {
    if new_w == 0 || new_h == 0 {
        return Err(RasterError::EmptyDimensions(new_w, new_h));
    }
    if new_w == map.width && new_h == map.height {
        return Ok(map.clone());
    }
    let lattice = |i: usize, n_dst: usize, n_src: usize| -> f64 {
        let span = (n_src - 1) as f64;
        if n_dst == 1 {
            0.5 * span
        } else {
            (i as f64 * span / (n_dst - 1) as f64).min(span)
        }
    };
    let mut values = Vec::with_capacity(new_w * new_h);
    let mut valid = Vec::with_capacity(new_w * new_h);
    for row in 0..new_h {
        let v = lattice(row, new_h, map.height);
        for col in 0..new_w {
            let u = lattice(col, new_w, map.width);
            match sample_bilinear(map, PixelCoord::new(u, v)) {
                Some(x) => {
                    values.push(x);
                    valid.push(true);
                }
                None => {
                    values.push(0.0);
                    valid.push(false);
                }
            }
        }
    }
    DepthMap::new(new_w, new_h, values, valid, map.kind)
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    rgb: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, rgb: Vec<[u8; 3]>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions(width, height));
        }
        if rgb.len() != width * height {
            return Err(RasterError::SizeMismatch {
                width,
                height,
                len: rgb.len(),
            });
        }
        Ok(Self { width, height, rgb })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.rgb
    }

    pub fn get(&self, col: usize, row: usize) -> Option<[u8; 3]> {
        (col < self.width && row < self.height).then(|| self.rgb[row * self.width + col])
    }

    /// Bilinear color sample in the pixel-center convention, per channel in `[0, 255]`.
    pub fn sample_bilinear(&self, px: PixelCoord) -> Option<[f64; 3]> {
        let (u, v) = (px.u, px.v);
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width - 1);
        let y0 = (v.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let c = |x: usize, y: usize| self.rgb[y * self.width + x];
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let top = c(x0, y0)[ch] as f64 * (1.0 - fx) + c(x1, y0)[ch] as f64 * fx;
            let bot = c(x0, y1)[ch] as f64 * (1.0 - fx) + c(x1, y1)[ch] as f64 * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }
}

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Georeferenced raster. Rows are stored top-down; `origin` is the lower-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    ncols: usize,
    nrows: usize,
    values: Vec<f64>,
    pub nodata: f64,
}

impl RasterGrid {
    /// All-nodata grid.
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        ncols: usize,
        nrows: usize,
        nodata: f64,
    ) -> Result<Self, RasterError> {
        Self::from_values(
            origin_x,
            origin_y,
            cell_size,
            ncols,
            nrows,
            vec![nodata; ncols * nrows],
            nodata,
        )
    }

    pub fn from_values(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        ncols: usize,
        nrows: usize,
        mut values: Vec<f64>,
        nodata: f64,
    ) -> Result<Self, RasterError> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(RasterError::InvalidGrid(format!("cell size {cell_size}")));
        }
        if !(origin_x.is_finite() && origin_y.is_finite() && nodata.is_finite()) {
            return Err(RasterError::InvalidGrid("non-finite origin or nodata".into()));
        }
        if ncols == 0 || nrows == 0 {
            return Err(RasterError::EmptyDimensions(ncols, nrows));
        }
        if values.len() != ncols * nrows {
            return Err(RasterError::SizeMismatch {
                width: ncols,
                height: nrows,
                len: values.len(),
            });
        }
        for v in values.iter_mut() {
            if !v.is_finite() {
                *v = nodata;
            }
        }
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
            ncols,
            nrows,
            values,
            nodata,
        })
    }

    /// Grid covering `[x0, x1] x [y0, y1]`, rounding the cell count up.
    pub fn covering(extent: Extent, cell_size: f64, nodata: f64) -> Result<Self, RasterError> {
        if !(cell_size > 0.0) {
            return Err(RasterError::InvalidGrid(format!("cell size {cell_size}")));
        }
        let ncols = (((extent.max_x - extent.min_x) / cell_size) - 1e-9).ceil().max(1.0) as usize;
        let nrows = (((extent.max_y - extent.min_y) / cell_size) - 1e-9).ceil().max(1.0) as usize;
        Self::new(extent.min_x, extent.min_y, cell_size, ncols, nrows, nodata)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || !v.is_finite()
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        if col >= self.ncols || row >= self.nrows {
            return None;
        }
        let v = self.values[row * self.ncols + col];
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn set(&mut self, col: usize, row: usize, value: Option<f64>) {
        let i = row * self.ncols + col;
        self.values[i] = match value {
            Some(v) if v.is_finite() => v,
            _ => self.nodata,
        };
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !self.is_nodata(**v)).count()
    }

    pub fn extent(&self) -> Extent {
        Extent {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.origin_x + self.ncols as f64 * self.cell_size,
            max_y: self.origin_y + self.nrows as f64 * self.cell_size,
        }
    }

    /// Same georeferencing, new contents.
    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
            && self.cell_size == other.cell_size
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Result<(f64, f64), RasterError> {
        grid_cell_center(self, col, row)
    }

    /// Cell containing world `(x, y)`; cells are half-open `[x0, x0 + cell)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fc = (x - self.origin_x) / self.cell_size;
        let fr = (self.origin_y + self.nrows as f64 * self.cell_size - y) / self.cell_size;
        if !(fc >= 0.0 && fr > 0.0) {
            return None;
        }
        let col = fc.floor() as usize;
        // y on the top edge belongs to row 0; otherwise rows are half-open from below
        let row = (fr.ceil() as usize).saturating_sub(1);
        (col < self.ncols && row < self.nrows).then_some((col, row))
    }
}

/// Axis-aligned rectangle in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn is_valid(&self) -> bool {
        [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite())
            && self.max_x > self.min_x
            && self.max_y > self.min_y
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }
}

pub fn grid_cell_center(grid: &RasterGrid, col: usize, row: usize) -> Result<(f64, f64), RasterError> {
    if col >= grid.ncols || row >= grid.nrows {
        return Err(RasterError::OutOfRange {
            col,
            row,
            ncols: grid.ncols,
            nrows: grid.nrows,
        });
    }
    Ok((
        grid.origin_x + (col as f64 + 0.5) * grid.cell_size,
        grid.origin_y + (grid.nrows as f64 - row as f64 - 0.5) * grid.cell_size,
    ))
}
