//! Grayscale PFM (`Pf`) depth rasters.
//!
//! Layout: `Pf\n<w> <h>\n<scale>\n` followed by `w*h` float32 samples, rows
//! stored bottom-to-top. A negative scale means little-endian. Invalid
//! pixels are written as NaN and any non-finite sample reads back as invalid.

use std::path::Path;

use crate::rasters::{DepthKind, DepthMap};

use super::{read_bytes, write_bytes, IngestError};

const MAX_DIM: usize = 1 << 20;

pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let header = format!("Pf\n{w} {h}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + 4 * w * h);
    out.extend_from_slice(header.as_bytes());
    for row in (0..h).rev() {
        for col in 0..w {
            let v = map.get(col, row).map(|v| v as f32).unwrap_or(f32::NAN);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_depth_pfm(map: &DepthMap, path: &Path) -> Result<(), IngestError> {
    write_bytes(path, &encode_pfm(map))
}

pub fn read_depth_pfm(path: &Path, kind: DepthKind) -> Result<DepthMap, IngestError> {
    parse_pfm(&read_bytes(path)?, kind)
}

/// Splits off one newline-terminated header line.
fn header_line<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a str, IngestError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .take(256)
        .position(|b| *b == b'\n')
        .ok_or_else(|| IngestError::MalformedHeader(format!("unterminated {what} line")))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end])
        .map(|s| s.trim())
        .map_err(|_| IngestError::MalformedHeader(format!("{what} line is not text")))
}

pub fn parse_pfm(bytes: &[u8], kind: DepthKind) -> Result<DepthMap, IngestError> {
    let mut pos = 0;
    let magic = header_line(bytes, &mut pos, "magic")?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(IngestError::MalformedHeader(
                "color PFM (PF) is not supported; expected grayscale Pf".into(),
            ))
        }
        other => return Err(IngestError::MalformedHeader(format!("bad magic {other:?}"))),
    }
    let dims = header_line(bytes, &mut pos, "dimension")?;
    let mut it = dims.split_whitespace();
    let parse_dim = |tok: Option<&str>| -> Result<usize, IngestError> {
        let tok = tok.ok_or_else(|| IngestError::MalformedHeader("missing dimension".into()))?;
        let n: usize = tok
            .parse()
            .map_err(|_| IngestError::MalformedHeader(format!("bad dimension {tok:?}")))?;
        if n == 0 || n > MAX_DIM {
            return Err(IngestError::MalformedHeader(format!("dimension {n} out of range")));
        }
        Ok(n)
    };
    let w = parse_dim(it.next())?;
    let h = parse_dim(it.next())?;
    if it.next().is_some() {
        return Err(IngestError::MalformedHeader("extra tokens on dimension line".into()));
    }
    let scale_line = header_line(bytes, &mut pos, "scale")?;
    let scale: f64 = scale_line
        .parse()
        .map_err(|_| IngestError::MalformedHeader(format!("bad scale {scale_line:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(IngestError::MalformedHeader(format!("scale must be nonzero, got {scale}")));
    }
    let little = scale < 0.0;

    let count = w
        .checked_mul(h)
        .ok_or_else(|| IngestError::MalformedHeader("dimensions overflow".into()))?;
    let expected = count * 4;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(IngestError::TruncatedData {
            expected,
            found: payload.len(),
        });
    }

    let mut values = vec![0.0f64; count];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / w;
        let col = i % w;
        let row = h - 1 - file_row;
        values[row * w + col] = v as f64;
    }
    Ok(DepthMap::from_values(w, h, values, kind)?)
}
