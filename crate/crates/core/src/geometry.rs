//! Pinhole X-ray camera model.
//!
//! World units are millimeters. A camera pose is the world→camera extrinsic
//! `[R | t]`; the camera looks down its +z axis, image columns follow +x and
//! image rows follow +y. Pixel `(i, j)` (row, column) is sampled at its center
//! `(j + 0.5, i + 0.5)`.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::liealg::{RigidTransform, ORTHONORMAL_TOL};

/// Relative threshold on the smallest singular value of the camera's left
/// 3×3 block.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsic metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera matrix is rank deficient (smallest singular value {sigma_min:e})")]
    SingularCamera { sigma_min: f64 },
}

/// Detector metadata from which the intrinsic matrix is built.
///
/// The optical center is given in millimeters on the detector, relative to
/// the detector center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicMeta {
    pub focal_length: f64,
    pub optical_center: [f64; 2],
    pub pixel_spacing: [f64; 2],
    /// `(height, width)` in pixels.
    pub image_size: [usize; 2],
}

impl IntrinsicMeta {
    pub fn new(
        focal_length: f64,
        optical_center: [f64; 2],
        pixel_spacing: [f64; 2],
        image_size: [usize; 2],
    ) -> Result<Self, GeometryError> {
        let meta = Self {
            focal_length,
            optical_center,
            pixel_spacing,
            image_size,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.focal_length.is_finite() && self.focal_length > 0.0) {
            return Err(GeometryError::InvalidMetadata(format!(
                "focal length must be positive, got {}",
                self.focal_length
            )));
        }
        if !self.pixel_spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(GeometryError::InvalidMetadata(format!(
                "pixel spacing must be positive, got {:?}",
                self.pixel_spacing
            )));
        }
        if !self.optical_center.iter().all(|o| o.is_finite()) {
            return Err(GeometryError::InvalidMetadata(
                "optical center must be finite".into(),
            ));
        }
        if self.image_size.iter().any(|&n| n < 2) {
            return Err(GeometryError::InvalidMetadata(format!(
                "image dimensions must be at least 2, got {:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }
}

/// `K = [[1/sx, 0, W/2], [0, 1/sy, H/2], [0, 0, 1]] · [[f, 0, ox], [0, f, oy], [0, 0, 1]]`.
pub fn build_intrinsics(meta: &IntrinsicMeta) -> Result<Matrix3<f64>, GeometryError> {
    meta.validate()?;
    let [sx, sy] = meta.pixel_spacing;
    let [ox, oy] = meta.optical_center;
    let h = meta.height() as f64;
    let w = meta.width() as f64;
    let f = meta.focal_length;
    let image_to_pixel = Matrix3::new(1.0 / sx, 0.0, w / 2.0, 0.0, 1.0 / sy, h / 2.0, 0.0, 0.0, 1.0);
    let camera_to_image = Matrix3::new(f, 0.0, ox, 0.0, f, oy, 0.0, 0.0, 1.0);
    Ok(image_to_pixel * camera_to_image)
}

/// World→camera extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        RigidTransform::new(rotation, translation)
            .map_err(|e| GeometryError::InvalidPose(e.to_string()))?;
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

    pub fn from_rigid(t: &RigidTransform) -> Self {
        Self {
            rotation: *t.rotation(),
            translation: *t.translation(),
        }
    }

    pub fn to_rigid(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
            .expect("camera pose invariants hold by construction")
    }

    /// Pose of a camera at `source` looking at `target`, with image rows
    /// aligned to `-up` as closely as possible.
    pub fn look_at(
        source: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = target - source;
        if z.norm() == 0.0 {
            return Err(GeometryError::InvalidPose("source equals target".into()));
        }
        let z = z.normalize();
        let y = -(up - z * up.dot(&z));
        if y.norm() < 1e-12 {
            return Err(GeometryError::InvalidPose("up vector is parallel to the view".into()));
        }
        let y = y.normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * source);
        Self::new(rotation, translation)
    }
}

/// X-ray source position in world coordinates, `S = −Rᵀt`.
pub fn source_position(pose: &CameraPose) -> Vector3<f64> {
    -(pose.rotation.transpose() * pose.translation)
}

/// A calibrated projective camera `Π = K [R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMatrix {
    intrinsic: Matrix3<f64>,
    pose: CameraPose,
    focal_length: f64,
    matrix: Matrix3x4<f64>,
}

impl CameraMatrix {
    /// Builds the camera from an explicit intrinsic matrix. The top-left 2×2
    /// block of `intrinsic` must have a positive diagonal.
    pub fn new(
        intrinsic: Matrix3<f64>,
        pose: CameraPose,
        focal_length: f64,
    ) -> Result<Self, GeometryError> {
        if !(intrinsic[(0, 0)] > 0.0 && intrinsic[(1, 1)] > 0.0) {
            return Err(GeometryError::InvalidCamera(
                "intrinsic diagonal must be positive".into(),
            ));
        }
        if !(focal_length.is_finite() && focal_length > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal length must be positive, got {focal_length}"
            )));
        }
        let rt = pose.rotation.transpose() * pose.rotation - Matrix3::identity();
        if rt.abs().max() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose("rotation is not orthonormal".into()));
        }
        let mut extrinsic = Matrix3x4::zeros();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
        Ok(Self {
            intrinsic,
            pose,
            focal_length,
            matrix: intrinsic * extrinsic,
        })
    }

    pub fn from_meta(meta: &IntrinsicMeta, pose: CameraPose) -> Result<Self, GeometryError> {
        Self::new(build_intrinsics(meta)?, pose, meta.focal_length)
    }

    pub fn intrinsic(&self) -> &Matrix3<f64> {
        &self.intrinsic
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn focal_length(&self) -> f64 {
        self.focal_length
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.matrix
    }

    pub fn source(&self) -> Vector3<f64> {
        source_position(&self.pose)
    }

    /// Projects a world point to pixel coordinates. Returns `None` for
    /// points on the source's principal plane.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let h = self.matrix * x.push(1.0);
        (h.z.abs() > f64::MIN_POSITIVE).then(|| Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Location of `pixel` on the detector plane in world coordinates.
    ///
    /// This is the point `P` with `Π [P; 1] = f · p̃`, i.e. the back-projected
    /// pixel at depth `f` in front of the source. It is obtained from the
    /// left 3×3 block of `Π` through an SVD solve.
    pub fn detector_point(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        let (solver, _) = self.detector_solver()?;
        Ok(solver(pixel))
    }

    fn detector_solver(
        &self,
    ) -> Result<(impl Fn(&Vector2<f64>) -> Vector3<f64> + '_, f64), GeometryError> {
        let a = self.matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let b = self.matrix.column(3).into_owned();
        let svd = a.svd(true, true);
        let sigma_max = svd.singular_values.max();
        let sigma_min = svd.singular_values.min();
        if !(sigma_min > RANK_TOL * sigma_max.max(1.0)) {
            return Err(GeometryError::SingularCamera { sigma_min });
        }
        let f = self.focal_length;
        let solve = move |p: &Vector2<f64>| {
            let rhs = Vector3::new(p.x, p.y, 1.0) * f - b;
            svd.solve(&rhs, 0.0).expect("svd carries both factors")
        };
        Ok((solve, sigma_min))
    }
}

/// A back-projected ray from the source `S` to the detector point `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
}

impl Ray {
    pub fn new(source: Vector3<f64>, target: Vector3<f64>) -> Result<Self, GeometryError> {
        if source == target {
            return Err(GeometryError::InvalidCamera("degenerate ray".into()));
        }
        Ok(Self { source, target })
    }

    /// `S + λ (P − S)`.
    #[inline]
    pub fn at(&self, lambda: f64) -> Vector3<f64> {
        self.source + (self.target - self.source) * lambda
    }

    pub fn length(&self) -> f64 {
        (self.target - self.source).norm()
    }
}

/// One ray per pixel, row-major, through the pixel centers.
pub fn pixel_rays(camera: &CameraMatrix, meta: &IntrinsicMeta) -> Result<Vec<Ray>, GeometryError> {
    meta.validate()?;
    let (solve, _) = camera.detector_solver()?;
    let source = camera.source();
    let (h, w) = (meta.height(), meta.width());
    let rays: Vec<Ray> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            let p = Vector2::new(j as f64 + 0.5, i as f64 + 0.5);
            Ray {
                source,
                target: solve(&p),
            }
        })
        .collect();
    if rays.iter().any(|r| r.target == r.source) {
        return Err(GeometryError::InvalidCamera("a pixel ray has zero length".into()));
    }
    Ok(rays)
}
