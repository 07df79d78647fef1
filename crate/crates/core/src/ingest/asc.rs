//! ESRI ASCII grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::rasters::{RasterGrid, DEFAULT_NODATA};

use super::{read_bytes, write_bytes, IngestError};

/// Formats `v` with 6 significant digits, `%g`-style.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    // round first so that e.g. 999999.7 moves to the next decade
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed)
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn encode(grid: &RasterGrid) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", grid.ncols());
    let _ = writeln!(out, "nrows {}", grid.nrows());
    let _ = writeln!(out, "xllcorner {}", grid.origin_x);
    let _ = writeln!(out, "yllcorner {}", grid.origin_y);
    let _ = writeln!(out, "cellsize {}", grid.cell_size);
    let _ = writeln!(out, "NODATA_value {}", format_sig6(grid.nodata));
    let nodata = format_sig6(grid.nodata);
    for row in grid.values().chunks(grid.ncols()) {
        let mut first = true;
        for &v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            if grid.is_nodata(v) {
                out.push_str(&nodata);
            } else {
                out.push_str(&format_sig6(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_asc_grid(grid: &RasterGrid, path: &Path) -> Result<(), IngestError> {
    write_bytes(path, encode(grid).as_bytes())
}

pub fn read_asc_grid(path: &Path) -> Result<RasterGrid, IngestError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| IngestError::MalformedHeader("grid file is not UTF-8 text".into()))?;
    parse_asc_grid(text)
}

pub fn parse_asc_grid(text: &str) -> Result<RasterGrid, IngestError> {
    let mut tokens = text.split_ascii_whitespace().peekable();
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut centered = (false, false);
    let mut cellsize = None;
    let mut nodata = None;

    while let Some(tok) = tokens.peek() {
        if !tok.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let key = tokens.next().unwrap().to_ascii_lowercase();
        let value = tokens
            .next()
            .ok_or_else(|| IngestError::MalformedHeader(format!("missing value for {key}")))?;
        let num = |v: &str| -> Result<f64, IngestError> {
            let x: f64 = v
                .parse()
                .map_err(|_| IngestError::MalformedHeader(format!("bad value {v:?} for {key}")))?;
            if !x.is_finite() {
                return Err(IngestError::MalformedHeader(format!("non-finite {key}")));
            }
            Ok(x)
        };
        let count = |v: &str| -> Result<usize, IngestError> {
            v.parse::<usize>()
                .ok()
                .filter(|n| *n > 0 && *n <= 1 << 24)
                .ok_or_else(|| IngestError::MalformedHeader(format!("bad value {v:?} for {key}")))
        };
        match key.as_str() {
            "ncols" => ncols = Some(count(value)?),
            "nrows" => nrows = Some(count(value)?),
            "xllcorner" => xll = Some(num(value)?),
            "yllcorner" => yll = Some(num(value)?),
            "xllcenter" => {
                xll = Some(num(value)?);
                centered.0 = true;
            }
            "yllcenter" => {
                yll = Some(num(value)?);
                centered.1 = true;
            }
            "cellsize" => cellsize = Some(num(value)?),
            "nodata_value" => nodata = Some(num(value)?),
            _ => return Err(IngestError::MalformedHeader(format!("unknown header key {key:?}"))),
        }
    }

    let missing = |k: &str| IngestError::MalformedHeader(format!("header missing {k}"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let mut xll = xll.ok_or_else(|| missing("xllcorner"))?;
    let mut yll = yll.ok_or_else(|| missing("yllcorner"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    if !(cellsize > 0.0) {
        return Err(IngestError::MalformedHeader(format!("cellsize must be positive, got {cellsize}")));
    }
    if centered.0 {
        xll -= 0.5 * cellsize;
    }
    if centered.1 {
        yll -= 0.5 * cellsize;
    }
    let nodata = nodata.unwrap_or(DEFAULT_NODATA);

    let n = ncols
        .checked_mul(nrows)
        .filter(|n| *n <= 1 << 28)
        .ok_or_else(|| IngestError::MalformedHeader("grid too large".into()))?;
    let mut values = Vec::with_capacity(n.min(1 << 20));
    for tok in tokens.by_ref() {
        if values.len() == n {
            return Err(IngestError::MalformedHeader(format!(
                "more than {n} values in grid body"
            )));
        }
        let v: f64 = tok
            .parse()
            .map_err(|_| IngestError::MalformedHeader(format!("bad cell value {tok:?}")))?;
        values.push(if v == nodata { f64::NAN } else { v });
    }
    if values.len() != n {
        return Err(IngestError::MalformedHeader(format!(
            "expected {n} values, found {}",
            values.len()
        )));
    }
    Ok(RasterGrid::from_values(xll, yll, cellsize, ncols, nrows, values, nodata)?)
}
