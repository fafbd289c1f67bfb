//! Multi-view depth rendering of local point neighbourhoods.
//!
//! Points are drawn as spheres (screen-space disks). The forward pass is
//! either a z-buffer (`ForwardMode::Hard`) or a soft probabilistic
//! aggregation; gradients with respect to the viewpoint parameters always
//! come from the soft model.

mod camera;
mod dual;
mod raster;

use std::sync::Arc;

pub use camera::{
    default_up, project_points, vertical_fov, Camera, Projected, ViewpointInit, ViewpointSet, FAR, IMAGE_SIZE,
    NEAR, VIEWPOINT_LOWER, VIEWPOINT_UPPER,
};
pub use raster::{
    augment_rotations, render_backward, render_hard, render_soft, rotation_gather, soft_pixel_weights,
    SoftRenderConfig, ViewPatch,
};

use crate::error::{Error, Result};
use crate::geometry::{build_lrf, crop_local, PointCloud, SpatialIndex, Vec3};
use crate::tensor::{CustomBackward, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub soft: SoftRenderConfig,
    pub crop_radius: f64,
    pub image_size: usize,
    pub forward: ForwardMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            soft: SoftRenderConfig::default(),
            crop_radius: 1.0,
            image_size: IMAGE_SIZE,
            forward: ForwardMode::Hard,
        }
    }
}

impl RenderConfig {
    fn camera(&self, theta: f64, phi: f64, rho: f64, up: Vec3) -> Result<Camera> {
        Ok(Camera::from_viewpoint(theta, phi, rho, up)?.with_image_size(self.image_size))
    }

    fn render(&self, camera: &Camera, local: &PointCloud) -> Result<ViewPatch> {
        match self.forward {
            ForwardMode::Hard => render_hard(camera, local),
            ForwardMode::Soft => render_soft(camera, local, &self.soft),
        }
    }
}

/// Crops the neighbourhood of `keypoint` and expresses it in its LRF.
/// The cloud must carry normals and radii.
pub fn local_patch(
    cloud: &PointCloud,
    index: &SpatialIndex,
    keypoint: usize,
    up: Vec3,
    crop_radius: f64,
) -> Result<PointCloud> {
    if keypoint >= cloud.len() {
        return Err(Error::invalid(format!(
            "keypoint {keypoint} out of range for a cloud of {} points",
            cloud.len()
        )));
    }
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("rendering needs per-point normals"))?;
    if cloud.radii().is_none() {
        return Err(Error::invalid("rendering needs per-point radii"));
    }
    let frame = build_lrf(cloud.point(keypoint), normals[keypoint], up);
    crop_local(cloud, index, &frame, crop_radius)
}

/// Renders all viewpoints of one keypoint with rotation augmentation:
/// `4 n` patches ordered view-major, rotation-minor.
pub fn render_keypoint(
    cloud: &PointCloud,
    index: &SpatialIndex,
    keypoint: usize,
    viewpoints: &ViewpointSet,
    config: &RenderConfig,
) -> Result<Vec<ViewPatch>> {
    let local = local_patch(cloud, index, keypoint, viewpoints.up, config.crop_radius)?;
    let mut out = Vec::with_capacity(4 * viewpoints.len());
    for k in 0..viewpoints.len() {
        let cam = config.camera(viewpoints.theta[k], viewpoints.phi[k], viewpoints.rho[k], viewpoints.up)?;
        let mut patch = config.render(&cam, &local)?;
        patch.view_index = k;
        out.extend(augment_rotations(&patch));
    }
    Ok(out)
}

struct RenderRule {
    local: Arc<PointCloud>,
    view: usize,
    up: Vec3,
    config: RenderConfig,
}

impl CustomBackward for RenderRule {
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let k = self.view;
        let n = inputs[0].len();
        let grads = self
            .config
            .camera(inputs[0][k], inputs[1][k], inputs[2][k], self.up)
            .and_then(|cam| render_backward(&cam, &self.local, &self.config.soft, grad_output))
            // Forward already validated the camera and config.
            .expect("render backward on a validated camera");
        grads
            .iter()
            .map(|&g| {
                let mut v = vec![0.0; n];
                v[k] = g;
                Some(v)
            })
            .collect()
    }
}

/// Records the `4 n` rotated patches of `local` on `tape`, each shaped
/// `[1, S, S]`, as differentiable functions of the viewpoint variables
/// `theta`, `phi`, `rho` (each shaped `[n]`).
pub fn render_views_on_tape<'a>(
    tape: &mut Tape<'a>,
    viewpoints: [Var; 3],
    up: Vec3,
    local: Arc<PointCloud>,
    config: &RenderConfig,
) -> Result<Vec<Var>> {
    config.soft.validate()?;
    let n = tape.shape(viewpoints[0]).iter().product::<usize>();
    if viewpoints.iter().any(|&v| tape.shape(v) != [n]) {
        return Err(Error::shape("viewpoint variables must share shape [n]"));
    }
    let s = config.image_size;
    let gathers: Vec<Vec<usize>> = (0..4).map(|k| rotation_gather(s, k)).collect();
    let mut out = Vec::with_capacity(4 * n);
    for k in 0..n {
        let [t, p, r] = viewpoints.map(|v| tape.value(v)[k]);
        let cam = config.camera(t, p, r, up)?;
        let patch = config.render(&cam, &local)?;
        let rule = RenderRule {
            local: Arc::clone(&local),
            view: k,
            up,
            config: *config,
        };
        let base = tape.custom(&viewpoints, vec![1, s, s], patch.pixels, Box::new(rule))?;
        out.push(base);
        for gather in &gathers[1..] {
            out.push(tape.permute(base, vec![1, s, s], gather.clone())?);
        }
    }
    Ok(out)
}
