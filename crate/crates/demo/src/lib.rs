//! Browser demo: render a keypoint of a synthetic fragment from a movable
//! camera, show the four rotated patches, and descend the renderer's
//! viewpoint gradient towards a target view.

use wasm_bindgen::prelude::*;

use mvdesc::geometry::{PointCloud, SpatialIndex};
use mvdesc::io::{generate_pairs, prepare_fragment, FragmentOptions, SyntheticConfig};
use mvdesc::render::{
    augment_rotations, default_up, local_patch, render_backward, render_hard, render_soft, Camera, SoftRenderConfig,
    ViewPatch,
};

const CROP_RADIUS: f64 = 1.0;

fn js_err(e: mvdesc::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_bytes(p: &ViewPatch) -> Vec<u8> {
    p.pixels.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

#[wasm_bindgen]
pub struct Scene {
    cloud: PointCloud,
    index: SpatialIndex,
    local: PointCloud,
    keypoint: usize,
    soft: SoftRenderConfig,
}

#[wasm_bindgen]
impl Scene {
    /// One synthetic fragment of roughly `points` points.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, points: u32) -> Result<Scene, JsError> {
        let cfg = SyntheticConfig {
            n_pairs: 1,
            points_per_fragment: points as usize,
            ..SyntheticConfig::default()
        };
        let pair = generate_pairs(&cfg, seed as u64).map_err(js_err)?.remove(0);
        let cloud =
            prepare_fragment(pair.fragment_a, Some(pair.sensor_a), &FragmentOptions::default()).map_err(js_err)?;
        let index = SpatialIndex::build(cloud.points());
        let mut scene = Scene {
            local: PointCloud::new(Vec::new()).map_err(js_err)?,
            cloud,
            index,
            keypoint: 0,
            soft: SoftRenderConfig {
                sigma: 2e-3,
                gamma: 0.05,
                ..SoftRenderConfig::default()
            },
        };
        scene.set_keypoint(0)?;
        Ok(scene)
    }

    pub fn point_count(&self) -> u32 {
        self.cloud.len() as u32
    }

    pub fn keypoint(&self) -> u32 {
        self.keypoint as u32
    }

    pub fn set_keypoint(&mut self, keypoint: u32) -> Result<(), JsError> {
        let k = keypoint as usize % self.cloud.len();
        self.local = local_patch(&self.cloud, &self.index, k, default_up(), CROP_RADIUS).map_err(js_err)?;
        self.keypoint = k;
        Ok(())
    }

    /// Soft renderer sharpness and depth temperature used by `render` and `fit_step`.
    pub fn set_softness(&mut self, sigma: f64, gamma: f64) -> Result<(), JsError> {
        let soft = SoftRenderConfig { sigma, gamma, ..self.soft };
        soft.validate().map_err(js_err)?;
        self.soft = soft;
        Ok(())
    }

    /// 64x64 grayscale bytes, row-major.
    pub fn render(&self, theta: f64, phi: f64, rho: f64, soft: bool) -> Result<Vec<u8>, JsError> {
        let cam = Camera::from_viewpoint(theta, phi, rho, default_up()).map_err(js_err)?;
        let p = if soft {
            render_soft(&cam, &self.local, &self.soft)
        } else {
            render_hard(&cam, &self.local)
        }
        .map_err(js_err)?;
        Ok(to_bytes(&p))
    }

    /// The four quarter-turn patches side by side: a 256x64 strip.
    pub fn rotations(&self, theta: f64, phi: f64, rho: f64) -> Result<Vec<u8>, JsError> {
        let cam = Camera::from_viewpoint(theta, phi, rho, default_up()).map_err(js_err)?;
        let p = render_hard(&cam, &self.local).map_err(js_err)?;
        let rots = augment_rotations(&p);
        let s = p.size;
        let mut out = vec![0u8; 4 * s * s];
        for (k, r) in rots.iter().enumerate() {
            let bytes = to_bytes(r);
            for row in 0..s {
                out[row * 4 * s + k * s..row * 4 * s + (k + 1) * s].copy_from_slice(&bytes[row * s..(row + 1) * s]);
            }
        }
        Ok(out)
    }

    /// Squared pixel error of the soft render at `current` against the hard
    /// render at `target`, and its gradient: `[loss, d_theta, d_phi, d_rho]`.
    pub fn fit_step(&self, current: &[f64], target: &[f64]) -> Result<Vec<f64>, JsError> {
        if current.len() != 3 || target.len() != 3 {
            return Err(JsError::new("viewpoints are [theta, phi, rho]"));
        }
        let up = default_up();
        let cam_t = Camera::from_viewpoint(target[0], target[1], target[2], up).map_err(js_err)?;
        let cam = Camera::from_viewpoint(current[0], current[1], current[2], up).map_err(js_err)?;
        let want = render_hard(&cam_t, &self.local).map_err(js_err)?;
        let got = render_soft(&cam, &self.local, &self.soft).map_err(js_err)?;
        let diff: Vec<f64> = got.pixels.iter().zip(&want.pixels).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>();
        let upstream: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        let g = render_backward(&cam, &self.local, &self.soft, &upstream).map_err(js_err)?;
        Ok(vec![loss, g[0], g[1], g[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_ops() {
        let mut s = Scene::new(1, 1500).unwrap();
        s.set_keypoint(17).unwrap();
        let img = s.render(0.5, 0.8, 0.6, false).unwrap();
        assert_eq!(img.len(), 64 * 64);
        assert!(img.iter().any(|&v| v > 0));
        assert_eq!(s.render(0.5, 0.8, 0.6, true).unwrap().len(), 64 * 64);
        let strip = s.rotations(0.5, 0.8, 0.6).unwrap();
        assert_eq!(strip.len(), 4 * 64 * 64);
        assert_eq!(&strip[..64], &img[..64]);

        let v = [0.5, 0.8, 0.6];
        let at_target = s.fit_step(&v, &v).unwrap();
        let away = s.fit_step(&[0.7, 0.8, 0.6], &v).unwrap();
        assert!(away[0] > at_target[0]);
        assert!(away[1..].iter().any(|g| *g != 0.0));
    }
}
