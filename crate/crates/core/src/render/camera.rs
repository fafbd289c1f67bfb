use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, PI};

use rand::Rng;

use super::dual::{dcross, dconst, ddot, dnormalize, dsub, dvalue, DVec3, Dual};
use crate::error::{Error, Result};
use crate::geometry::{deparallelize, PointCloud, Vec3};

pub const IMAGE_SIZE: usize = 64;
pub const NEAR: f64 = 0.01;
pub const FAR: f64 = 4.0;

/// Lower corner of the viewpoint box (theta, phi, rho).
pub const VIEWPOINT_LOWER: [f64; 3] = [0.0, 0.0, 0.3];
/// Upper corner of the viewpoint box (theta, phi, rho).
pub const VIEWPOINT_UPPER: [f64; 3] = [2.0 * PI, FRAC_PI_2, 1.0];

pub fn default_up() -> Vec3 {
    Vec3::new(0.0, -1.0, 0.0)
}

pub fn vertical_fov() -> f64 {
    60f64.to_radians()
}

/// `n` spherical viewpoints around the keypoint plus the shared up vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewpointSet {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub up: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewpointInit {
    Random,
    Orbited,
}

impl ViewpointSet {
    pub fn new(theta: Vec<f64>, phi: Vec<f64>, rho: Vec<f64>, up: Vec3) -> Result<Self> {
        if theta.is_empty() || theta.len() != phi.len() || theta.len() != rho.len() {
            return Err(Error::invalid(format!(
                "viewpoint arrays must be nonempty and equal length, got {}/{}/{}",
                theta.len(),
                phi.len(),
                rho.len()
            )));
        }
        if (up.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("viewpoint up vector must be unit length"));
        }
        Ok(Self { theta, phi, rho, up })
    }

    /// Uniform samples inside the viewpoint box.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let mut theta = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(rng.random_range(VIEWPOINT_LOWER[0]..VIEWPOINT_UPPER[0]));
            phi.push(rng.random_range(VIEWPOINT_LOWER[1]..VIEWPOINT_UPPER[1]));
            rho.push(rng.random_range(VIEWPOINT_LOWER[2]..VIEWPOINT_UPPER[2]));
        }
        Self::new(theta, phi, rho, default_up())
    }

    /// rho = 0.3, phi = pi/6, theta stepped by pi/4.
    pub fn orbited(n: usize) -> Result<Self> {
        Self::new(
            (0..n).map(|k| k as f64 * FRAC_PI_4).collect(),
            vec![FRAC_PI_6; n],
            vec![0.3; n],
            default_up(),
        )
    }

    pub fn init<R: Rng + ?Sized>(mode: ViewpointInit, n: usize, rng: &mut R) -> Result<Self> {
        match mode {
            ViewpointInit::Random => Self::random(n, rng),
            ViewpointInit::Orbited => Self::orbited(n),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn camera(&self, k: usize) -> Result<Camera> {
        Camera::from_viewpoint(self.theta[k], self.phi[k], self.rho[k], self.up)
    }
}

/// Look-at pinhole camera in LRF coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub fov_y: f64,
    pub image_size: usize,
    pub near: f64,
    pub far: f64,
    params: [f64; 3],
    up_hint: Vec3,
}

/// Screen-space footprint of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub radius: f64,
    pub culled: bool,
}

struct DualBasis {
    position: DVec3,
    forward: DVec3,
    right: DVec3,
    up: DVec3,
}

fn dual_basis(params: [f64; 3], up_hint: &Vec3, seeded: bool) -> DualBasis {
    let var = |slot: usize| {
        if seeded {
            Dual::variable(params[slot], slot)
        } else {
            Dual::constant(params[slot])
        }
    };
    let (theta, phi, rho) = (var(0), var(1), var(2));
    let position = [
        rho * phi.cos() * theta.cos(),
        rho * phi.cos() * theta.sin(),
        rho * phi.sin(),
    ];
    let forward = dnormalize(&position.map(|c| -c));
    let up = deparallelize(*up_hint, &dvalue(&forward));
    let right = dnormalize(&dcross(&forward, &dconst(&up)));
    let cam_up = dcross(&right, &forward);
    DualBasis {
        position,
        forward,
        right,
        up: cam_up,
    }
}

impl Camera {
    pub fn from_viewpoint(theta: f64, phi: f64, rho: f64, up: Vec3) -> Result<Self> {
        if !(rho > 0.0) || !theta.is_finite() || !phi.is_finite() || !rho.is_finite() {
            return Err(Error::invalid(format!(
                "viewpoint needs finite angles and rho > 0, got ({theta}, {phi}, {rho})"
            )));
        }
        let params = [theta, phi, rho];
        let b = dual_basis(params, &up, false);
        Ok(Self {
            position: dvalue(&b.position),
            forward: dvalue(&b.forward),
            right: dvalue(&b.right),
            up: dvalue(&b.up),
            fov_y: vertical_fov(),
            image_size: IMAGE_SIZE,
            near: NEAR,
            far: FAR,
            params,
            up_hint: up,
        })
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    /// (theta, phi, rho) this camera was built from.
    pub fn params(&self) -> [f64; 3] {
        self.params
    }

    pub fn focal_px(&self) -> f64 {
        0.5 * self.image_size as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn principal_point(&self) -> f64 {
        0.5 * (self.image_size as f64 - 1.0)
    }

    /// Nearer is brighter; 0 is reserved for background.
    pub fn encode_depth(&self, z: f64) -> f64 {
        ((self.far - z) / (self.far - self.near)).clamp(0.0, 1.0)
    }
}

/// Pinhole projection of every point. Pixel `(row, col)` has its center at
/// `(x, y) = (col, row)`.
pub fn project_points(camera: &Camera, cloud: &PointCloud) -> Result<Vec<Projected>> {
    let radii = cloud
        .radii()
        .ok_or_else(|| Error::invalid("projection needs per-point radii"))?;
    let f = camera.focal_px();
    let c0 = camera.principal_point();
    Ok(cloud
        .points()
        .iter()
        .zip(radii)
        .map(|(q, &r)| {
            let rel = q - camera.position;
            let z = rel.dot(&camera.forward);
            let culled = z <= camera.near || z >= camera.far;
            Projected {
                x: c0 + f * rel.dot(&camera.right) / z,
                y: c0 - f * rel.dot(&camera.up) / z,
                depth: z,
                radius: r * f / z,
                culled,
            }
        })
        .collect())
}

/// Jacobian rows d(x, y, radius, depth)/d(theta, phi, rho) per point; culled
/// points get `None`.
pub(crate) fn projection_jacobians(camera: &Camera, cloud: &PointCloud) -> Result<Vec<Option<[[f64; 3]; 4]>>> {
    let radii = cloud
        .radii()
        .ok_or_else(|| Error::invalid("projection needs per-point radii"))?;
    let b = dual_basis(camera.params, &camera.up_hint, true);
    let f = camera.focal_px();
    Ok(cloud
        .points()
        .iter()
        .zip(radii)
        .map(|(q, &r)| {
            let rel = dsub(&dconst(q), &b.position);
            let z = ddot(&rel, &b.forward);
            if z.v <= camera.near || z.v >= camera.far {
                return None;
            }
            let x = ddot(&rel, &b.right) / z * f;
            let y = -(ddot(&rel, &b.up) / z * f);
            let radius = Dual::constant(r * f) / z;
            Some([x.d, y.d, radius.d, z.d])
        })
        .collect())
}
