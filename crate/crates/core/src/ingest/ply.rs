//! Binary little-endian PLY point clouds.
//!
//! Written clouds carry `double x y z` and, when any point has color,
//! `uchar red green blue`. Source image ids are not persisted.

use std::fmt::Write as _;
use std::path::Path;

use crate::fusion::{CloudPoint, PointCloud};

use super::{read_bytes, write_bytes, IngestError};

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let with_color = cloud.is_empty() || cloud.points().iter().any(|p| p.color.is_some());
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if with_color {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");

    let stride = if with_color { 27 } else { 24 };
    let mut out = Vec::with_capacity(header.len() + stride * cloud.len());
    out.extend_from_slice(header.as_bytes());
    for p in cloud.points() {
        for c in [p.position.x, p.position.y, p.position.z] {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if with_color {
            out.extend_from_slice(&p.color.unwrap_or([0, 0, 0]));
        }
    }
    out
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), IngestError> {
    write_bytes(path, &encode_ply(cloud))
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IngestError> {
    parse_ply(&read_bytes(path)?)
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, IngestError> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .take(64 * 1024)
        .position(|w| w == END)
        .ok_or_else(|| IngestError::MalformedHeader("no end_header line".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| IngestError::MalformedHeader("header is not text".into()))?;
    let body = &bytes[header_end + END.len()..];

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(IngestError::MalformedHeader("missing ply magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut fields: Vec<Field> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => {
                return Err(IngestError::UnsupportedPlyVariant(format!("format {other}")))
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(IngestError::MalformedHeader("duplicate vertex element".into()));
                }
                count = Some(n.parse().map_err(|_| {
                    IngestError::MalformedHeader(format!("bad vertex count {n:?}"))
                })?);
            }
            ["element", name, ..] => {
                return Err(IngestError::UnsupportedPlyVariant(format!("element {name}")))
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(IngestError::MalformedHeader("property before element".into()));
                }
                let field = match (*ty, *name) {
                    ("double", "x") => Field::X,
                    ("double", "y") => Field::Y,
                    ("double", "z") => Field::Z,
                    ("uchar", "red") => Field::Red,
                    ("uchar", "green") => Field::Green,
                    ("uchar", "blue") => Field::Blue,
                    _ => {
                        return Err(IngestError::UnsupportedPlyVariant(format!(
                            "property {ty} {name}"
                        )))
                    }
                };
                if fields.contains(&field) {
                    return Err(IngestError::MalformedHeader(format!("duplicate property {name}")));
                }
                fields.push(field);
            }
            _ => return Err(IngestError::MalformedHeader(format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| IngestError::MalformedHeader("no vertex element".into()))?;
    for f in [Field::X, Field::Y, Field::Z] {
        if !fields.contains(&f) {
            return Err(IngestError::UnsupportedPlyVariant("vertex lacks x/y/z".into()));
        }
    }
    let colors = fields.iter().filter(|f| matches!(f, Field::Red | Field::Green | Field::Blue)).count();
    if colors != 0 && colors != 3 {
        return Err(IngestError::UnsupportedPlyVariant("partial color channels".into()));
    }

    let stride: usize = fields
        .iter()
        .map(|f| match f {
            Field::X | Field::Y | Field::Z => 8,
            _ => 1,
        })
        .sum();
    let expected = count
        .checked_mul(stride)
        .ok_or_else(|| IngestError::MalformedHeader("vertex count overflows".into()))?;
    if body.len() < expected {
        return Err(IngestError::TruncatedData {
            expected,
            found: body.len(),
        });
    }

    let mut points = Vec::with_capacity(count);
    for rec in body[..expected].chunks_exact(stride) {
        let mut xyz = [0.0f64; 3];
        let mut rgb = [0u8; 3];
        let mut off = 0;
        for f in &fields {
            match f {
                Field::X | Field::Y | Field::Z => {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(&rec[off..off + 8]);
                    let i = match f {
                        Field::X => 0,
                        Field::Y => 1,
                        _ => 2,
                    };
                    xyz[i] = f64::from_le_bytes(b);
                    off += 8;
                }
                Field::Red | Field::Green | Field::Blue => {
                    let i = match f {
                        Field::Red => 0,
                        Field::Green => 1,
                        _ => 2,
                    };
                    rgb[i] = rec[off];
                    off += 1;
                }
            }
        }
        if !xyz.iter().all(|v| v.is_finite()) {
            return Err(IngestError::MalformedHeader("non-finite vertex coordinate".into()));
        }
        points.push(CloudPoint {
            position: crate::geometry::WorldPoint::new(xyz[0], xyz[1], xyz[2]),
            color: (colors == 3).then_some(rgb),
            source: None,
        });
    }
    Ok(PointCloud::from_points(points))
}
