//! Dataset manifest (JSON). Schema: `schema/manifest.schema.json`.
//!
//! Paths inside the manifest are relative to the manifest's directory.
//! Lengths are meters, image quantities are pixels.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::rasters::DepthKind;

use super::sfm::{CAMERAS_FILE, IMAGES_FILE, POINTS_FILE};
use super::{read_bytes, write_bytes, IngestError};

pub const MANIFEST_SCHEMA: &str = include_str!("../../schema/manifest.schema.json");

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: u32,
    pub name: String,
    /// Color image, relative to the manifest directory.
    pub path: Option<PathBuf>,
    pub camera_id: u32,
    pub pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: Vec<ImageEntry>,
    /// Directory holding the SfM text triad.
    pub tie_points: PathBuf,
    /// Per-image depth map path pattern; `{name}` and `{id}` are substituted.
    pub depth_maps: String,
    pub depth_kind: DepthKind,
}

impl DatasetManifest {
    pub fn image(&self, id: u32) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn camera(&self, image: &ImageEntry) -> &CameraIntrinsics {
        &self.cameras[&image.camera_id]
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.base_dir.join(rel)
        }
    }

    pub fn tie_point_dir(&self) -> PathBuf {
        self.resolve(&self.tie_points)
    }

    pub fn depth_map_path(&self, image: &ImageEntry) -> PathBuf {
        self.resolve(Path::new(&expand_pattern(&self.depth_maps, image)))
    }

    pub fn image_path(&self, image: &ImageEntry) -> Option<PathBuf> {
        image.path.as_deref().map(|p| self.resolve(p))
    }
}

/// Substitutes `{name}` and `{id}`.
pub fn expand_pattern(pattern: &str, image: &ImageEntry) -> String {
    pattern
        .replace("{name}", &image.name)
        .replace("{id}", &image.id.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUnits {
    length: String,
    image: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCamera {
    id: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: u32,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    camera_id: u32,
    pose: RawPose,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<RawUnits>,
    cameras: Vec<RawCamera>,
    images: Vec<RawImage>,
    tie_points: String,
    depth_maps: String,
    depth_kind: String,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IngestError> {
    let bytes = read_bytes(path)?;
    let raw: RawManifest = serde_json::from_slice(&bytes)
        .map_err(|e| IngestError::schema("$", e.to_string()))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = validate(raw, base_dir)?;

    let triad = manifest.tie_point_dir();
    for f in [CAMERAS_FILE, IMAGES_FILE, POINTS_FILE] {
        let p = triad.join(f);
        if !p.is_file() {
            return Err(IngestError::MissingFile(p));
        }
    }
    for img in &manifest.images {
        if let Some(p) = manifest.image_path(img) {
            if !p.is_file() {
                return Err(IngestError::MissingFile(p));
            }
        }
    }
    Ok(manifest)
}

fn validate(raw: RawManifest, base_dir: PathBuf) -> Result<DatasetManifest, IngestError> {
    if let Some(units) = &raw.units {
        if units.length != "meters" {
            return Err(IngestError::schema("units.length", format!("expected \"meters\", got {:?}", units.length)));
        }
        if units.image != "pixels" {
            return Err(IngestError::schema("units.image", format!("expected \"pixels\", got {:?}", units.image)));
        }
    }
    let depth_kind: DepthKind = raw
        .depth_kind
        .parse()
        .map_err(|e: String| IngestError::schema("depth_kind", e))?;
    if raw.depth_maps.trim().is_empty() {
        return Err(IngestError::schema("depth_maps", "empty path pattern"));
    }
    if raw.tie_points.trim().is_empty() {
        return Err(IngestError::schema("tie_points", "empty path"));
    }
    if raw.cameras.is_empty() {
        return Err(IngestError::schema("cameras", "at least one camera is required"));
    }
    if raw.images.is_empty() {
        return Err(IngestError::schema("images", "at least one image is required"));
    }

    let mut cameras = BTreeMap::new();
    for (i, c) in raw.cameras.iter().enumerate() {
        let k = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
            .map_err(|e| IngestError::schema(format!("cameras[{i}]"), e.to_string()))?;
        if cameras.insert(c.id, k).is_some() {
            return Err(IngestError::schema(format!("cameras[{i}].id"), format!("duplicate camera id {}", c.id)));
        }
    }

    let mut images = Vec::with_capacity(raw.images.len());
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    for (i, img) in raw.images.into_iter().enumerate() {
        let field = |f: &str| format!("images[{i}].{f}");
        if !ids.insert(img.id) {
            return Err(IngestError::schema(field("id"), format!("duplicate image id {}", img.id)));
        }
        if img.name.is_empty() || !names.insert(img.name.clone()) {
            return Err(IngestError::schema(field("name"), format!("empty or duplicate name {:?}", img.name)));
        }
        if !cameras.contains_key(&img.camera_id) {
            return Err(IngestError::schema(
                field("camera_id"),
                format!("unknown camera id {}", img.camera_id),
            ));
        }
        let t = Vector3::from(img.pose.translation);
        let pose = match (img.pose.rotation, img.pose.quaternion) {
            (Some(r), None) => {
                let m = Matrix3::from_fn(|row, col| r[row][col]);
                CameraPose::new(m, t)
            }
            (None, Some(q)) => CameraPose::from_quaternion(q, t),
            _ => {
                return Err(IngestError::schema(
                    field("pose"),
                    "exactly one of rotation or quaternion is required",
                ))
            }
        }
        .map_err(|e| IngestError::schema(field("pose"), e.to_string()))?;
        images.push(ImageEntry {
            id: img.id,
            name: img.name,
            path: img.path.map(PathBuf::from),
            camera_id: img.camera_id,
            pose,
        });
    }

    Ok(DatasetManifest {
        base_dir,
        cameras,
        images,
        tie_points: PathBuf::from(raw.tie_points),
        depth_maps: raw.depth_maps,
        depth_kind,
    })
}

/// Writes the manifest as pretty JSON; poses are stored as rotation matrices.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), IngestError> {
    let raw = RawManifest {
        units: Some(RawUnits {
            length: "meters".into(),
            image: "pixels".into(),
        }),
        cameras: manifest
            .cameras
            .iter()
            .map(|(id, k)| RawCamera {
                id: *id,
                width: k.width,
                height: k.height,
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
            })
            .collect(),
        images: manifest
            .images
            .iter()
            .map(|img| {
                let r = img.pose.rotation();
                let t = img.pose.translation();
                RawImage {
                    id: img.id,
                    name: img.name.clone(),
                    path: img.path.as_ref().map(|p| p.to_string_lossy().into_owned()),
                    camera_id: img.camera_id,
                    pose: RawPose {
                        rotation: Some([
                            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                        ]),
                        quaternion: None,
                        translation: [t.x, t.y, t.z],
                    },
                }
            })
            .collect(),
        tie_points: manifest.tie_points.to_string_lossy().into_owned(),
        depth_maps: manifest.depth_maps.clone(),
        depth_kind: manifest.depth_kind.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&raw).expect("manifest serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, body: &str) -> PathBuf {
        let sparse = dir.join("sparse");
        std::fs::create_dir_all(&sparse).unwrap();
        for f in [CAMERAS_FILE, IMAGES_FILE, POINTS_FILE] {
            std::fs::write(sparse.join(f), "").unwrap();
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn minimal(camera_ref: u32, kind: &str) -> String {
        format!(
            r#"{{
  "units": {{"length": "meters", "image": "pixels"}},
  "cameras": [{{"id": 1, "width": 6000, "height": 4000, "fx": 4600, "fy": 4600, "cx": 3000, "cy": 2000}}],
  "images": [{{"id": 1, "name": "a", "camera_id": {camera_ref},
              "pose": {{"rotation": [[1,0,0],[0,-1,0],[0,0,-1]], "translation": [0, 0, 200]}}}}],
  "tie_points": "sparse",
  "depth_maps": "mono/{{name}}.pfm",
  "depth_kind": "{kind}"
}}"#
        )
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&fixture(dir.path(), &minimal(1, "disparity"))).unwrap();
        assert_eq!(m.images.len(), 1);
        assert_eq!(m.depth_kind, DepthKind::Disparity);
        assert_eq!(m.depth_map_path(&m.images[0]), dir.path().join("mono/a.pfm"));
    }

    #[test]
    fn unknown_camera_reference() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&fixture(dir.path(), &minimal(99, "relative"))).unwrap_err();
        assert!(matches!(err, IngestError::Schema { ref field, .. } if field == "images[0].camera_id"));
    }

    #[test]
    fn unknown_depth_kind() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&fixture(dir.path(), &minimal(1, "magic"))).unwrap_err();
        assert!(matches!(err, IngestError::Schema { ref field, .. } if field == "depth_kind"));
    }

    #[test]
    fn missing_tie_point_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), &minimal(1, "relative"));
        std::fs::remove_file(dir.path().join("sparse").join(POINTS_FILE)).unwrap();
        assert!(matches!(load_manifest(&path), Err(IngestError::MissingFile(_))));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path(), &minimal(1, "relative"));
        let m = load_manifest(&path).unwrap();
        let out = dir.path().join("copy.json");
        write_manifest(&m, &out).unwrap();
        let again = load_manifest(&out).unwrap();
        assert_eq!(again.images, m.images);
        assert_eq!(again.cameras, m.cameras);
    }

    #[test]
    fn schema_document_is_json() {
        let v: serde_json::Value = serde_json::from_str(MANIFEST_SCHEMA).unwrap();
        assert_eq!(v["type"], "object");
    }
}
