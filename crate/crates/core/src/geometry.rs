//! Rigid and similarity transforms, quaternions, and the pinhole camera.
//!
//! Quaternions are kept in canonical form (unit norm, `w >= 0`) so that two
//! equal rotations always serialize identically.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Camera-frame depth below which a point is treated as not visible.
pub const MIN_DEPTH: f64 = 1e-6;

/// Rotation stored as a unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`; fails on a zero or non-finite quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    /// Rotation by `|v|` radians about `v / |v|`.
    pub fn from_axis_angle(v: &Vector3<f64>) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps tiny finite-difference steps exact
            return Self::renormalized(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        let half = 0.5 * angle;
        let s = half.sin() / angle;
        Self::canonical(half.cos(), v.x * s, v.y * s, v.z * s)
    }

    /// Inverse of [`from_axis_angle`](Self::from_axis_angle), angle in `[0, pi]`.
    pub fn to_axis_angle(&self) -> Vector3<f64> {
        let v = Vector3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-15 {
            return 2.0 * v;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self::renormalized(w, x, y, z)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::renormalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v + 2w(q x v) + 2 q x (q x v)
        let q = Vector3::new(self.x, self.y, self.z);
        let t = 2.0 * q.cross(v);
        v + self.w * t + q.cross(&t)
    }

    /// Angle of the relative rotation between two quaternions, radians.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let d = (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z).abs();
        2.0 * d.min(1.0).acos()
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Serialize for UnitQuaternion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for UnitQuaternion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        UnitQuaternion::new(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

/// Anything that maps points of 3-space: rigid poses and similarities.
pub trait Transform3 {
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64>;
    /// Isotropic scale factor (1 for rigid transforms).
    fn scale(&self) -> f64;
    fn rotation(&self) -> UnitQuaternion;
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    #[serde(rename = "q")]
    pub rotation: UnitQuaternion,
    #[serde(rename = "t", with = "vec3_serde")]
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub const IDENTITY: Self = Self {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::IDENTITY,
            translation: t,
        }
    }

    /// `self ∘ rhs`: apply `rhs`, then `self`.
    pub fn compose(&self, rhs: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation.mul(&rhs.rotation),
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r = self.rotation.inverse();
        PoseSE3 {
            rotation: r,
            translation: -r.rotate(&self.translation),
        }
    }

    /// Rotation by `rot` about `center`, followed by a translation `shift`.
    pub fn about_center(rot: UnitQuaternion, center: &Vector3<f64>, shift: &Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: rot,
            translation: center + shift - rot.rotate(center),
        }
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Transform3 for PoseSE3 {
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
    fn scale(&self) -> f64 {
        1.0
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
}

/// Similarity `p -> s R p + t`, the registration transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    #[serde(rename = "q")]
    pub rotation: UnitQuaternion,
    #[serde(rename = "t", with = "vec3_serde")]
    pub translation: Vector3<f64>,
    #[serde(rename = "s")]
    scale: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "similarity scale must be > 0, got {scale}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("similarity translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale
    }

    /// Rigid part `[R, t]` with the scale dropped.
    pub fn rigid_part(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Transform3 for SimilarityTransform {
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.rotate(p) + self.translation
    }
    fn scale(&self) -> f64 {
        self.scale
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
}

/// Pinhole camera with square pixels. Pixel centers sit on integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera transform.
    pub extrinsic: PoseSE3,
}

/// Result of projecting a point: pixel position and camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Camera {
    pub fn new(
        focal: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: PoseSE3,
    ) -> Result<Self> {
        let cam = Camera {
            focal,
            cx,
            cy,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid(format!(
                "camera focal must be > 0, got {}",
                self.focal
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::invalid(format!(
                "camera size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsic.apply(p)
    }

    /// Projects a world point; fails with `BehindCamera` at depth <= 1e-6.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Projection> {
        self.project_camera_frame(&self.to_camera_frame(p))
    }

    pub fn project_camera_frame(&self, pc: &Vector3<f64>) -> Result<Projection> {
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(pc.z));
        }
        Ok(Projection {
            pixel: Vector2::new(
                self.focal * pc.x / pc.z + self.cx,
                self.focal * pc.y / pc.z + self.cy,
            ),
            depth: pc.z,
        })
    }

    /// World-frame displacement for an image-plane shift `(du, dv)` at fixed depth.
    pub fn back_project_shift(&self, du: f64, dv: f64, depth: f64) -> Vector3<f64> {
        let dc = Vector3::new(du * depth / self.focal, dv * depth / self.focal, 0.0);
        self.extrinsic.rotation.inverse().rotate(&dc)
    }
}

pub(crate) mod vec3_serde {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(x, y, z))
    }
}
