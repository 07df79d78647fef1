//! Pinhole cameras, rigid poses, and projection math.
//!
//! Poses map world coordinates into the camera frame as
//! `x_cam = R * x_world + t`. The camera looks along its local `+z` axis,
//! `+x` points right in the image and `+y` points down. Pixel coordinates
//! are continuous with the origin at the center of the top-left pixel.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points with camera-frame depth at or below this are treated as behind the camera.
pub const EPS_Z: f64 = 1e-6;

/// Rotation matrices must satisfy `|det R - 1|` and `|R^T R - I|` below this.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl CameraPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// True iff the point lies strictly in front of the image plane.
    pub fn in_front(&self) -> bool {
        self.z > 0.0
    }
}

impl PixelCoord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Pinhole intrinsics. Distortion is not modeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Checks the field invariants; used after deserialization.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if self.width < 1 || self.height < 1 {
            return bad(format!("size {}x{} must be at least 1x1", self.width, self.height));
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx={} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy={} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Pixel is inside `[0, w-1] x [0, h-1]`.
    pub fn in_bounds(&self, px: PixelCoord) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u <= (self.width - 1) as f64
            && px.v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform, `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite entries".into()));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!("det = {det}")));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(format!(
                "R^T R deviates from identity by {ortho_err:e}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a unit quaternion `(w, x, y, z)`; the quaternion is normalized.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::InvalidRotation(format!("quaternion norm {norm}")));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Self::new(unit.to_rotation_matrix().into_inner(), translation)
    }

    /// Pose of a camera whose center sits at `center` in world coordinates.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, GeometryError> {
        let translation = -(rotation * center);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Unit quaternion `(w, x, y, z)` of the rotation.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (camera `+z`) expressed in world coordinates.
    pub fn optical_axis(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(self.rotation.transpose() * Vector3::z())
    }

    pub fn world_to_camera(&self, p: WorldPoint) -> CameraPoint {
        CameraPoint::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn camera_to_world(&self, p: CameraPoint) -> WorldPoint {
        WorldPoint::from_vector(self.rotation.transpose() * (p.to_vector() - self.translation))
    }

    /// Camera-frame depth of a world point; callers reject values `<= 0`.
    pub fn tie_point_depth(&self, p: WorldPoint) -> f64 {
        self.rotation.row(2).transpose().dot(&p.to_vector()) + self.translation.z
    }

    /// World-frame direction of the ray through `px`, scaled so its camera-frame z is 1.
    pub fn ray_direction(&self, k: &CameraIntrinsics, px: PixelCoord) -> Vector3<f64> {
        let d = Vector3::new((px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0);
        self.rotation.transpose() * d
    }
}

pub fn world_to_camera(pose: &CameraPose, p: WorldPoint) -> CameraPoint {
    pose.world_to_camera(p)
}

pub fn camera_to_world(pose: &CameraPose, p: CameraPoint) -> WorldPoint {
    pose.camera_to_world(p)
}

pub fn tie_point_depth(pose: &CameraPose, p: WorldPoint) -> f64 {
    pose.tie_point_depth(p)
}

pub fn project(k: &CameraIntrinsics, p: CameraPoint) -> Result<PixelCoord, GeometryError> {
    if !(p.z > EPS_Z) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(PixelCoord::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

pub fn backproject(
    k: &CameraIntrinsics,
    px: PixelCoord,
    depth: f64,
) -> Result<CameraPoint, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(CameraPoint::new(
        depth * (px.u - k.cx) / k.fx,
        depth * (px.v - k.cy) / k.fy,
        depth,
    ))
}

/// Nadir rotation: camera `+x` = world `+x`, camera `+y` = world `-y`, optical axis = world `-z`.
pub fn nadir_rotation() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flip_x_pose() -> CameraPose {
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        CameraPose::new(r, Vector3::new(0.0, 0.0, 200.0)).unwrap()
    }

    fn survey_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 3000.0, 2000.0, 6000, 4000).unwrap()
    }

    #[test]
    fn world_to_camera_examples() {
        let id = CameraPose::identity();
        assert_eq!(
            id.world_to_camera(WorldPoint::new(3.0, -1.0, 50.0)),
            CameraPoint::new(3.0, -1.0, 50.0)
        );
        let shifted = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
        assert_eq!(
            shifted.world_to_camera(WorldPoint::new(0.0, 0.0, 210.0)),
            CameraPoint::new(0.0, 0.0, 200.0)
        );
        assert_eq!(
            flip_x_pose().world_to_camera(WorldPoint::new(5.0, 2.0, 0.0)),
            CameraPoint::new(5.0, -2.0, 200.0)
        );
    }

    #[test]
    fn camera_to_world_examples() {
        assert_eq!(
            CameraPose::identity().camera_to_world(CameraPoint::new(1.0, 2.0, 3.0)),
            WorldPoint::new(1.0, 2.0, 3.0)
        );
        assert_eq!(
            flip_x_pose().camera_to_world(CameraPoint::new(5.0, -2.0, 200.0)),
            WorldPoint::new(5.0, 2.0, 0.0)
        );
    }

    #[test]
    fn projection_examples() {
        let k = survey_camera();
        let on_axis = project(&k, CameraPoint::new(0.0, 0.0, 37.0)).unwrap();
        assert_eq!(on_axis, PixelCoord::new(3000.0, 2000.0));
        let px = project(&k, CameraPoint::new(10.0, -5.0, 200.0)).unwrap();
        assert_eq!(px, PixelCoord::new(3050.0, 1975.0));
        assert!(matches!(
            project(&k, CameraPoint::new(0.0, 0.0, 0.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn backprojection_examples() {
        let k = survey_camera();
        assert_eq!(
            backproject(&k, PixelCoord::new(3000.0, 2000.0), 100.0).unwrap(),
            CameraPoint::new(0.0, 0.0, 100.0)
        );
        assert_eq!(
            backproject(&k, PixelCoord::new(3050.0, 1975.0), 200.0).unwrap(),
            CameraPoint::new(10.0, -5.0, 200.0)
        );
        assert!(matches!(
            backproject(&k, PixelCoord::new(1.0, 1.0), -1.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn tie_point_depth_examples() {
        assert_eq!(
            CameraPose::identity().tie_point_depth(WorldPoint::new(0.0, 0.0, 50.0)),
            50.0
        );
        let nadir = CameraPose::from_center(nadir_rotation(), Vector3::new(10.0, 20.0, 200.0)).unwrap();
        assert_eq!(nadir.tie_point_depth(WorldPoint::new(10.0, 20.0, 0.0)), 200.0);
        assert_eq!(flip_x_pose().tie_point_depth(WorldPoint::new(5.0, 2.0, 0.0)), 200.0);
    }

    #[test]
    fn rejects_bad_rotation() {
        let scaled = Matrix3::identity() * 1.01;
        assert!(CameraPose::new(scaled, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let pose = CameraPose::from_quaternion([0.9, 0.1, -0.3, 0.2], Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let q = pose.quaternion();
        let again = CameraPose::from_quaternion(q, *pose.translation()).unwrap();
        assert!((again.rotation() - pose.rotation()).amax() < 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (
            prop::array::uniform3(-3.2f64..3.2),
            prop::array::uniform3(-500.0f64..500.0),
        )
            .prop_map(|(axis_angle, t)| {
                let r = nalgebra::Rotation3::new(Vector3::from(axis_angle));
                CameraPose::new(r.into_inner(), Vector3::from(t)).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn pose_round_trip(pose in arb_pose(), p in prop::array::uniform3(-1000.0f64..1000.0)) {
            let q = WorldPoint::new(p[0], p[1], p[2]);
            let back = pose.camera_to_world(pose.world_to_camera(q));
            let scale = q.to_vector().norm().max(pose.translation().norm()).max(1.0);
            prop_assert!((back.to_vector() - q.to_vector()).norm() <= 1e-9 * scale);
        }

        #[test]
        fn projection_round_trip(
            f in 100.0f64..8000.0,
            aspect in 0.8f64..1.25,
            w in 16u32..6000,
            h in 16u32..4000,
            fu in 0.0f64..1.0,
            fv in 0.0f64..1.0,
            depth in 1.0f64..1000.0,
        ) {
            let k = CameraIntrinsics::new(f, f * aspect, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
            let px = PixelCoord::new(fu * (w - 1) as f64, fv * (h - 1) as f64);
            let again = project(&k, backproject(&k, px, depth).unwrap()).unwrap();
            prop_assert!((again.u - px.u).abs() <= 1e-9 && (again.v - px.v).abs() <= 1e-9);
        }
    }
}
