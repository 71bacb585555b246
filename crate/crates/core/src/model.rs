//! Domain types shared by the mapping and tracking halves of the system.
//!
//! Both the dense and the sparse map are [`GaussianMap`]s with an identical
//! attribute schema; only [`MapKind`] tells them apart.

use std::sync::Arc;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::image::{ColorImage, GrayImage};

/// Which frequency mask spawned a gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrequencyClass {
    High,
    Low,
}

/// One splat: the shared unit of both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub frequency_class: FrequencyClass,
}

impl Gaussian {
    pub fn covariance(&self) -> Result<Covariance3> {
        covariance_from_scale_rotation(&self.scale, &self.rotation)
    }

    /// Checks every attribute invariant.
    pub fn validate(&self) -> Result<()> {
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("non-positive scale {:?}", self.scale)));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rotation quaternion is not normalized"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::invalid(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("color {:?} outside [0,1]", self.color)));
        }
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        Ok(())
    }
}

/// Symmetric positive semidefinite 3x3 covariance, meters squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Splits the covariance back into per-axis standard deviations and the
    /// rotation whose columns are the principal axes. Eigenvalues are floored
    /// at `min_variance` so the result is a valid gaussian scale.
    pub fn to_scale_rotation(&self, min_variance: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let eig = SymmetricEigen::new(self.0);
        let mut axes = eig.eigenvectors;
        if axes.determinant() < 0.0 {
            axes.column_mut(2).neg_mut();
        }
        let scale = eig.eigenvalues.map(|l| l.max(min_variance).sqrt());
        let rotation = UnitQuaternion::from_matrix(&axes);
        (scale, rotation)
    }
}

/// C = R S Sᵀ Rᵀ with S = diag(scale).
pub fn covariance_from_scale_rotation(
    scale: &Vector3<f64>,
    rotation: &UnitQuaternion<f64>,
) -> Result<Covariance3> {
    if !scale.iter().all(|&s| s > 0.0) {
        return Err(Error::invalid(format!("scale entries must be positive, got {scale:?}")));
    }
    let r = rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let c = r * s2 * r.transpose();
    // exact symmetry
    Ok(Covariance3((c + c.transpose()) * 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Dense,
    Sparse,
}

/// Growable set of gaussians. Indices are stable until the next prune.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
    pub kind: MapKind,
}

impl GaussianMap {
    pub fn new(kind: MapKind) -> Self {
        Self {
            gaussians: Vec::new(),
            kind,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
    }

    pub fn extend(&mut self, gs: impl IntoIterator<Item = Gaussian>) {
        self.gaussians.extend(gs);
    }

    /// Keeps gaussians for which `keep` holds and compacts storage. Returns
    /// the keep flag of every pre-compaction index so callers can compact
    /// parallel per-gaussian state the same way.
    pub fn retain(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> Vec<bool> {
        let flags: Vec<bool> = self.gaussians.iter().map(&mut keep).collect();
        let mut i = 0;
        self.gaussians.retain(|_| {
            let k = flags[i];
            i += 1;
            k
        });
        flags
    }

    /// Bytes needed to hold the attribute payload.
    pub fn memory_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<Gaussian>()
    }
}

/// Pinhole intrinsics. Pixel (u, v) has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Pixel plus depth (camera z) to camera-frame point.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Mean focal length, used when a single `f` is needed.
    #[inline]
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Nearest pixel of a projection, if it lands inside the image.
    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = u.round();
        let y = v.round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

pub fn compose_poses(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(a: &Pose) -> Pose {
    a.inverse()
}

pub fn transform_point(a: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    a.transform_point(p)
}

/// One timestamped colour + depth observation.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub color: ColorImage,
    /// Meters along the camera z axis, 0 marks an invalid sample.
    pub depth: GrayImage,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(
        color: ColorImage,
        depth: GrayImage,
        timestamp: f64,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        color.check_same_dims(&depth)?;
        if color.dims() != (intrinsics.width, intrinsics.height) {
            return Err(Error::DimensionMismatch {
                expected: (intrinsics.width, intrinsics.height),
                actual: color.dims(),
            });
        }
        if depth.as_slice().iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::invalid("depth values must be finite and non-negative"));
        }
        Ok(Self {
            color,
            depth,
            timestamp,
            intrinsics,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.color.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.color.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeRole {
    Tracking,
    MappingOnly,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame: Arc<RgbdFrame>,
    pub pose: Pose,
    pub role: KeyframeRole,
    /// Sequence number, strictly increasing in insertion order.
    pub index: usize,
}
