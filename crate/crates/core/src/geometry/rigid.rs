use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_proper(1e-6) {
            return Err(Error::invalid("rotation block is not a proper rotation"));
        }
        Ok(t)
    }

    /// Row-major 4x4 matrix with last row `0 0 0 1`.
    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        let last = [m[12], m[13], m[14], m[15]];
        if (last[0].abs() + last[1].abs() + last[2].abs()) > 1e-9 || (last[3] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("last row of a rigid transform must be 0 0 0 1, got {last:?}")));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    #[rustfmt::skip]
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Mat3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Angle in radians of the relative rotation between the two transforms.
    pub fn rotation_error(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_error(&self, other: &Self) -> f64 {
        (self.translation - other.translation).norm()
    }
}
