//! Spatial calibration: image pixel -> probe frame -> world (robot base) frame.
//!
//! The image frame has its origin at the top-left pixel with `x` growing
//! laterally and `y` growing with depth (`y = 0` is the transducer face). The
//! probe frame has its origin at the centre of the transducer face, `x`
//! lateral, `y` elevational (image-plane normal) and `z` along the beam.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `R * R^T = I` and `det(R) = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    /// Lateral image size in pixels (`L_I`).
    pub lateral_px: u32,
    /// Axial image size in pixels (`W_I`).
    pub axial_px: u32,
    /// Physical scan depth in mm (`D_I`).
    pub depth_mm: f64,
    /// Physical length of the transducer elements in mm (`L_p`).
    pub element_length_mm: f64,
    /// Offset from probe origin to image origin along the beam, mm.
    pub offset_mm: f64,
}

impl Default for CalibrationParams {
    /// 400x300 frames, 40 mm depth, 37.5 mm linear array.
    fn default() -> Self {
        Self {
            lateral_px: 400,
            axial_px: 300,
            depth_mm: 40.0,
            element_length_mm: 37.5,
            offset_mm: 0.0,
        }
    }
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.lateral_px < 2 || self.axial_px < 2 {
            return Err(Error::Invalid(format!(
                "image must be at least 2x2 pixels, got {}x{}",
                self.lateral_px, self.axial_px
            )));
        }
        let positive = [self.depth_mm, self.element_length_mm];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid(
                "scan depth and element length must be positive".into(),
            ));
        }
        if !(self.offset_mm.is_finite() && self.offset_mm >= 0.0) {
            return Err(Error::Invalid("probe offset must be >= 0".into()));
        }
        Ok(())
    }

    /// Lateral pixel pitch, mm/px.
    pub fn lateral_scale(&self) -> f64 {
        self.element_length_mm / self.lateral_px as f64
    }

    /// Axial pixel pitch, mm/px.
    pub fn axial_scale(&self) -> f64 {
        self.depth_mm / self.axial_px as f64
    }

    /// Area of one pixel in mm².
    pub fn pixel_area(&self) -> f64 {
        self.lateral_scale() * self.axial_scale()
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.lateral_px, self.axial_px)
    }

    /// Homogeneous image-to-probe transform.
    pub fn image_to_probe(&self) -> Matrix4<f64> {
        let l = self.element_length_mm;
        #[rustfmt::skip]
        let m = Matrix4::new(
            self.lateral_scale(), 0.0, 0.0, -l / 2.0,
            0.0, 0.0, -1.0, 0.0,
            0.0, self.axial_scale(), 0.0, self.offset_mm,
            0.0, 0.0, 0.0, 1.0,
        );
        m
    }
}

/// Sub-pixel image position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Bounds are inclusive of the far image edge so `(L_I, W_I)` is valid.
    pub fn check_bounds(&self, cal: &CalibrationParams) -> Result<()> {
        let in_range = |v: f64, hi: u32| v.is_finite() && v >= 0.0 && v <= hi as f64;
        if in_range(self.x, cal.lateral_px) && in_range(self.y, cal.axial_px) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "pixel ({}, {}) outside {}x{} image",
                self.x, self.y, cal.lateral_px, cal.axial_px
            )))
        }
    }
}

/// Rigid probe pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    /// Probe origin in world coordinates, mm.
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
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a pose, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn is_proper_rotation(&self) -> bool {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return false;
        }
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        err <= ROTATION_TOLERANCE && (r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_proper_rotation() {
            Ok(())
        } else {
            Err(Error::Invalid("pose rotation is not orthonormal with det +1".into()))
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Direction the probe pushes into tissue (probe `z` axis) in world coordinates.
    pub fn beam_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// `[r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    /// Inverse of [`Pose::to_row_major`]; does not validate.
    pub fn from_row_major(v: &[f64; 12]) -> Pose {
        Pose {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }
}

/// Pixel position in the probe frame, mm.
pub fn pixel_to_probe(p: PixelCoord, cal: &CalibrationParams) -> Result<Vector3<f64>> {
    p.check_bounds(cal)?;
    Ok(pixel_to_probe_unchecked(p.x, p.y, cal))
}

#[inline]
pub(crate) fn pixel_to_probe_unchecked(x: f64, y: f64, cal: &CalibrationParams) -> Vector3<f64> {
    Vector3::new(
        cal.lateral_scale() * x - cal.element_length_mm / 2.0,
        0.0,
        cal.axial_scale() * y + cal.offset_mm,
    )
}

/// Pixel position in the world frame for a probe at `probe_pose`, mm.
pub fn pixel_to_world(p: PixelCoord, cal: &CalibrationParams, probe_pose: &Pose) -> Result<Vector3<f64>> {
    Ok(probe_pose.transform_point(&pixel_to_probe(p, cal)?))
}
