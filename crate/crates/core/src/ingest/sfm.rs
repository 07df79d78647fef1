//! SfM sparse-model text triad (`cameras.txt`, `images.txt`, `points3D.txt`).
//!
//! The accepted grammar is documented in `docs/sfm_text_format.md`. Pixel
//! coordinates and principal points are read verbatim in this crate's
//! pixel-center convention. Poses are world-to-camera.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::geometry::{project, CameraIntrinsics, CameraPose, PixelCoord, WorldPoint};

use super::manifest::{DatasetManifest, ImageEntry};
use super::{read_bytes, write_bytes, IngestError};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const IMAGES_FILE: &str = "images.txt";
pub const POINTS_FILE: &str = "points3D.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image_id: u32,
    pub pixel: PixelCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiePoint {
    pub id: u64,
    pub position: WorldPoint,
    pub color: [u8; 3],
    pub track: Vec<Observation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TiePointTable {
    pub points: Vec<TiePoint>,
}

impl TiePointTable {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every `(point, observation)` pair seen by `image_id`, in table order.
    pub fn observations_in(&self, image_id: u32) -> impl Iterator<Item = (&TiePoint, &Observation)> {
        self.points.iter().flat_map(move |p| {
            p.track
                .iter()
                .filter(move |o| o.image_id == image_id)
                .map(move |o| (p, o))
        })
    }
}

#[derive(Debug, Clone)]
pub struct SparseModel {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: Vec<ImageEntry>,
    pub tie_points: TiePointTable,
    /// Points dropped because fewer than two images observed them.
    pub dropped_short_tracks: usize,
}

struct Lines<'a> {
    file: &'static str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(file: &'static str, text: &'a str) -> Self {
        Self {
            file,
            inner: text.lines().enumerate(),
        }
    }

    /// Next non-comment line, blank lines included.
    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            if line.trim_start().starts_with('#') {
                continue;
            }
            return Some((i + 1, line.trim()));
        }
        None
    }

    /// Next non-comment, non-blank line.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        while let Some((n, line)) = self.next_raw() {
            if !line.is_empty() {
                return Some((n, line));
            }
        }
        None
    }

    fn err(&self, line: usize, reason: impl Into<String>) -> IngestError {
        IngestError::MalformedLine {
            file: self.file.to_string(),
            line,
            reason: reason.into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    lines: &Lines,
    line: usize,
    tok: Option<&str>,
    what: &str,
) -> Result<T, IngestError> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| lines.err(line, format!("invalid {what} {tok:?}")))
}

fn parse_finite(lines: &Lines, line: usize, tok: Option<&str>, what: &str) -> Result<f64, IngestError> {
    let v: f64 = parse_num(lines, line, tok, what)?;
    if !v.is_finite() {
        return Err(lines.err(line, format!("non-finite {what}")));
    }
    Ok(v)
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, CameraIntrinsics>, IngestError> {
    let mut lines = Lines::new(CAMERAS_FILE, text);
    let mut cameras = BTreeMap::new();
    while let Some((n, line)) = lines.next_content() {
        let mut toks = line.split_whitespace();
        let id: u32 = parse_num(&lines, n, toks.next(), "camera id")?;
        let model = toks.next().ok_or_else(|| lines.err(n, "missing camera model"))?;
        let width: u32 = parse_num(&lines, n, toks.next(), "width")?;
        let height: u32 = parse_num(&lines, n, toks.next(), "height")?;
        let params: Vec<f64> = toks
            .map(|t| parse_finite(&lines, n, Some(t), "camera parameter"))
            .collect::<Result<_, _>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE", _) | ("SIMPLE_PINHOLE", _) => {
                return Err(lines.err(n, format!("{model} expects {} parameters, got {}",
                    if model == "PINHOLE" { 4 } else { 3 }, params.len())))
            }
            _ => {
                return Err(IngestError::UnsupportedCameraModel {
                    file: CAMERAS_FILE.to_string(),
                    line: n,
                    model: model.to_string(),
                });
            }
        };
        let k = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map_err(|e| lines.err(n, e.to_string()))?;
        if cameras.insert(id, k).is_some() {
            return Err(lines.err(n, format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

struct ParsedImage {
    entry: ImageEntry,
    /// `(pixel, point3d id or -1)`
    points2d: Vec<(PixelCoord, i64)>,
}

fn parse_images(text: &str) -> Result<Vec<ParsedImage>, IngestError> {
    let mut lines = Lines::new(IMAGES_FILE, text);
    let mut images = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while let Some((n, line)) = lines.next_content() {
        let mut toks = line.split_whitespace();
        let id: u32 = parse_num(&lines, n, toks.next(), "image id")?;
        let mut q = [0.0; 4];
        for (i, v) in q.iter_mut().enumerate() {
            *v = parse_finite(&lines, n, toks.next(), ["qw", "qx", "qy", "qz"][i])?;
        }
        let mut t = [0.0; 3];
        for (i, v) in t.iter_mut().enumerate() {
            *v = parse_finite(&lines, n, toks.next(), ["tx", "ty", "tz"][i])?;
        }
        let camera_id: u32 = parse_num(&lines, n, toks.next(), "camera id")?;
        let name = toks.collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(lines.err(n, "missing image name"));
        }
        let pose = CameraPose::from_quaternion(q, Vector3::from(t))
            .map_err(|e| lines.err(n, e.to_string()))?;
        if !seen.insert(id) {
            return Err(lines.err(n, format!("duplicate image id {id}")));
        }

        let mut points2d = Vec::new();
        if let Some((n2, pts)) = lines.next_raw() {
            let toks: Vec<&str> = pts.split_whitespace().collect();
            if toks.len() % 3 != 0 {
                return Err(lines.err(n2, "2D point list is not a sequence of X Y POINT3D_ID triples"));
            }
            for tri in toks.chunks_exact(3) {
                let u = parse_finite(&lines, n2, Some(tri[0]), "x")?;
                let v = parse_finite(&lines, n2, Some(tri[1]), "y")?;
                let pid: i64 = parse_num(&lines, n2, Some(tri[2]), "point3D id")?;
                if pid < -1 {
                    return Err(lines.err(n2, format!("invalid point3D id {pid}")));
                }
                points2d.push((PixelCoord::new(u, v), pid));
            }
        }
        images.push(ParsedImage {
            entry: ImageEntry {
                id,
                name,
                path: None,
                camera_id,
                pose,
            },
            points2d,
        });
    }
    Ok(images)
}

pub fn parse_sparse_model_str(
    cameras_text: &str,
    images_text: &str,
    points_text: &str,
) -> Result<SparseModel, IngestError> {
    let cameras = parse_cameras(cameras_text)?;
    let images = parse_images(images_text)?;
    for img in &images {
        if !cameras.contains_key(&img.entry.camera_id) {
            return Err(IngestError::DanglingReference(format!(
                "image {} references unknown camera {}",
                img.entry.id, img.entry.camera_id
            )));
        }
    }
    let index: HashMap<u32, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.entry.id, i))
        .collect();

    let mut lines = Lines::new(POINTS_FILE, points_text);
    let mut points = Vec::new();
    let mut dropped_short_tracks = 0;
    let mut seen = std::collections::HashSet::new();
    while let Some((n, line)) = lines.next_content() {
        let mut toks = line.split_whitespace();
        let id: u64 = parse_num(&lines, n, toks.next(), "point3D id")?;
        let x = parse_finite(&lines, n, toks.next(), "X")?;
        let y = parse_finite(&lines, n, toks.next(), "Y")?;
        let z = parse_finite(&lines, n, toks.next(), "Z")?;
        let mut color = [0u8; 3];
        for c in color.iter_mut() {
            *c = parse_num(&lines, n, toks.next(), "color channel")?;
        }
        let _error: f64 = parse_num(&lines, n, toks.next(), "reprojection error")?;
        let rest: Vec<&str> = toks.collect();
        if rest.len() % 2 != 0 {
            return Err(lines.err(n, "track is not a sequence of IMAGE_ID POINT2D_IDX pairs"));
        }
        if !seen.insert(id) {
            return Err(lines.err(n, format!("duplicate point3D id {id}")));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks_exact(2) {
            let image_id: u32 = parse_num(&lines, n, Some(pair[0]), "track image id")?;
            let idx: usize = parse_num(&lines, n, Some(pair[1]), "track point2D index")?;
            let img = index.get(&image_id).map(|i| &images[*i]).ok_or_else(|| {
                IngestError::DanglingReference(format!(
                    "point {id} observed in unknown image {image_id}"
                ))
            })?;
            let (pixel, back_ref) = *img.points2d.get(idx).ok_or_else(|| {
                IngestError::DanglingReference(format!(
                    "point {id} references 2D index {idx} of image {image_id}, which has {}",
                    img.points2d.len()
                ))
            })?;
            if back_ref != id as i64 {
                return Err(IngestError::DanglingReference(format!(
                    "point {id} references 2D point {idx} of image {image_id}, which belongs to {back_ref}"
                )));
            }
            track.push(Observation { image_id, pixel });
        }
        if track.len() < 2 {
            dropped_short_tracks += 1;
            continue;
        }
        points.push(TiePoint {
            id,
            position: WorldPoint::new(x, y, z),
            color,
            track,
        });
    }

    Ok(SparseModel {
        cameras,
        images: images.into_iter().map(|i| i.entry).collect(),
        tie_points: TiePointTable { points },
        dropped_short_tracks,
    })
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| IngestError::MalformedLine {
        file: path.display().to_string(),
        line: 0,
        reason: "file is not UTF-8 text".into(),
    })
}

pub fn parse_sparse_model(
    cameras_file: &Path,
    images_file: &Path,
    points_file: &Path,
) -> Result<SparseModel, IngestError> {
    parse_sparse_model_str(
        &read_text(cameras_file)?,
        &read_text(images_file)?,
        &read_text(points_file)?,
    )
}

/// Tie points for a manifest; every observed image must be listed in it.
pub fn load_tie_points(manifest: &DatasetManifest) -> Result<TiePointTable, IngestError> {
    let dir = manifest.tie_point_dir();
    let model = parse_sparse_model(
        &dir.join(CAMERAS_FILE),
        &dir.join(IMAGES_FILE),
        &dir.join(POINTS_FILE),
    )?;
    for p in &model.tie_points.points {
        for o in &p.track {
            if manifest.image(o.image_id).is_none() {
                return Err(IngestError::DanglingReference(format!(
                    "tie point {} observed in image {} absent from the manifest",
                    p.id, o.image_id
                )));
            }
        }
    }
    Ok(model.tie_points)
}

/// Writes the triad into `dir`. Image names come from the entries.
pub fn write_sparse_model(
    dir: &Path,
    cameras: &BTreeMap<u32, CameraIntrinsics>,
    images: &[ImageEntry],
    table: &TiePointTable,
) -> Result<(), IngestError> {
    let mut cam_text = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for (id, k) in cameras {
        let _ = writeln!(
            cam_text,
            "{id} PINHOLE {} {} {} {} {} {}",
            k.width, k.height, k.fx, k.fy, k.cx, k.cy
        );
    }

    // per-image 2D point lists derived from tracks
    let mut per_image: BTreeMap<u32, Vec<(PixelCoord, u64)>> = BTreeMap::new();
    let mut track_refs: Vec<Vec<(u32, usize)>> = Vec::with_capacity(table.len());
    for p in &table.points {
        let mut refs = Vec::with_capacity(p.track.len());
        for o in &p.track {
            let list = per_image.entry(o.image_id).or_default();
            refs.push((o.image_id, list.len()));
            list.push((o.pixel, p.id));
        }
        track_refs.push(refs);
    }

    let mut img_text = String::from(
        "# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for img in images {
        let q = img.pose.quaternion();
        let t = img.pose.translation();
        let _ = writeln!(
            img_text,
            "{} {} {} {} {} {} {} {} {} {}",
            img.id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, img.camera_id, img.name
        );
        let pts = per_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
        let line: Vec<String> = pts
            .iter()
            .map(|(px, pid)| format!("{} {} {}", px.u, px.v, pid))
            .collect();
        let _ = writeln!(img_text, "{}", line.join(" "));
    }

    let mut pts_text =
        String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for (p, refs) in table.points.iter().zip(&track_refs) {
        let _ = write!(
            pts_text,
            "{} {} {} {} {} {} {} 0",
            p.id, p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2]
        );
        for (img, idx) in refs {
            let _ = write!(pts_text, " {img} {idx}");
        }
        pts_text.push('\n');
    }

    write_bytes(&dir.join(CAMERAS_FILE), cam_text.as_bytes())?;
    write_bytes(&dir.join(IMAGES_FILE), img_text.as_bytes())?;
    write_bytes(&dir.join(POINTS_FILE), pts_text.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionViolation {
    pub point_id: u64,
    pub image_id: u32,
    /// Pixel distance, or infinity when the point projects behind the camera.
    pub error_px: f64,
}

/// Reprojects every tie point into its track images and reports observations
/// further than `threshold_px` from the stored pixel.
pub fn reprojection_check(
    manifest: &DatasetManifest,
    table: &TiePointTable,
    threshold_px: f64,
) -> Vec<ReprojectionViolation> {
    let mut out = Vec::new();
    for p in &table.points {
        for o in &p.track {
            let Some(img) = manifest.image(o.image_id) else {
                out.push(ReprojectionViolation {
                    point_id: p.id,
                    image_id: o.image_id,
                    error_px: f64::INFINITY,
                });
                continue;
            };
            let k = &manifest.cameras[&img.camera_id];
            let err = match project(k, img.pose.world_to_camera(p.position)) {
                Ok(px) => ((px.u - o.pixel.u).powi(2) + (px.v - o.pixel.v).powi(2)).sqrt(),
                Err(_) => f64::INFINITY,
            };
            if !(err <= threshold_px) {
                out.push(ReprojectionViolation {
                    point_id: p.id,
                    image_id: o.image_id,
                    error_px: err,
                });
            }
        }
    }
    out
}
