use std::io::Write;

use super::camera::{project_points, projection_jacobians, Camera, Projected};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// `-ln(1e-12)`: contributions with coverage probability below 1e-12 are
/// dropped, which bounds each splat's soft footprint.
const COVERAGE_CUTOFF: f64 = 27.631021115928547;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftRenderConfig {
    pub sigma: f64,
    pub gamma: f64,
    pub background_eps: f64,
}

impl Default for SoftRenderConfig {
    fn default() -> Self {
        Self {
            sigma: 1e-4,
            gamma: 1e-4,
            background_eps: 0.01,
        }
    }
}

impl SoftRenderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("background_eps", self.background_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Square depth image. `view_index` is zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPatch {
    pub pixels: Vec<f64>,
    pub size: usize,
    pub view_index: usize,
    pub rotation_index: usize,
}

impl ViewPatch {
    pub fn blank(size: usize) -> Self {
        Self {
            pixels: vec![0.0; size * size],
            size,
            view_index: 0,
            rotation_index: 0,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    /// Binary PGM (P5), one byte per pixel.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.size, self.size)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        w.write_all(&bytes)
    }
}

/// Gather map for `k` quarter turns: `out[i] = in[map[i]]`. One turn sends
/// pixel `(r, c)` to `(c, size - 1 - r)`.
pub fn rotation_gather(size: usize, k: usize) -> Vec<usize> {
    let mut map: Vec<usize> = (0..size * size).collect();
    for _ in 0..k % 4 {
        map = (0..size * size)
            .map(|i| {
                let (row, col) = (i / size, i % size);
                map[(size - 1 - col) * size + row]
            })
            .collect();
    }
    map
}

/// The four quarter-turn rotations of `patch`, indexed 0..4.
pub fn augment_rotations(patch: &ViewPatch) -> [ViewPatch; 4] {
    std::array::from_fn(|k| {
        let map = rotation_gather(patch.size, k);
        ViewPatch {
            pixels: map.iter().map(|&i| patch.pixels[i]).collect(),
            size: patch.size,
            view_index: patch.view_index,
            rotation_index: k,
        }
    })
}

/// Inclusive pixel index range whose centers lie within `extent` of `center`.
fn pixel_span(center: f64, extent: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - extent).ceil().max(0.0);
    let hi = (center + extent).floor().min(size as f64 - 1.0);
    (lo <= hi).then(|| (lo as usize, hi as usize))
}

/// Z-buffered disks tested at pixel centers; equal depths keep the lower index.
pub fn render_hard(camera: &Camera, cloud: &PointCloud) -> Result<ViewPatch> {
    let s = camera.image_size;
    let proj = project_points(camera, cloud)?;
    let mut depth = vec![f64::INFINITY; s * s];
    for p in proj.iter().filter(|p| !p.culled) {
        let (Some((r0, r1)), Some((c0, c1))) = (pixel_span(p.y, p.radius, s), pixel_span(p.x, p.radius, s)) else {
            continue;
        };
        let r2 = p.radius * p.radius;
        for row in r0..=r1 {
            let dy = row as f64 - p.y;
            for col in c0..=c1 {
                let dx = col as f64 - p.x;
                let slot = &mut depth[row * s + col];
                if dx * dx + dy * dy <= r2 && p.depth < *slot {
                    *slot = p.depth;
                }
            }
        }
    }
    let pixels = depth
        .into_iter()
        .map(|z| if z.is_finite() { camera.encode_depth(z) } else { 0.0 })
        .collect();
    Ok(ViewPatch {
        pixels,
        size: s,
        view_index: 0,
        rotation_index: 0,
    })
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One splat's contribution to one pixel.
struct Sample {
    /// Aggregation score `ln D + c / gamma`.
    score: f64,
    /// Sigmoid argument `d |d| / sigma`.
    arg: f64,
    /// Signed distance to the disk edge in normalized screen units.
    d: f64,
    dist: f64,
    dx: f64,
    dy: f64,
}

struct Splats<'c> {
    camera: &'c Camera,
    config: SoftRenderConfig,
    proj: Vec<Projected>,
    extent_pad: f64,
}

impl<'c> Splats<'c> {
    fn new(camera: &'c Camera, cloud: &PointCloud, config: SoftRenderConfig) -> Result<Self> {
        config.validate()?;
        let proj = project_points(camera, cloud)?;
        let extent_pad = camera.image_size as f64 * (config.sigma * COVERAGE_CUTOFF).sqrt();
        Ok(Self {
            camera,
            config,
            proj,
            extent_pad,
        })
    }

    /// Visits every (pixel, sample) pair of splat `j` above the coverage cutoff.
    fn for_each_sample(&self, j: usize, mut f: impl FnMut(usize, &Sample)) {
        let p = &self.proj[j];
        if p.culled {
            return;
        }
        let s = self.camera.image_size;
        let ext = p.radius + self.extent_pad;
        let (Some((r0, r1)), Some((c0, c1))) = (pixel_span(p.y, ext, s), pixel_span(p.x, ext, s)) else {
            return;
        };
        let depth_term = self.camera.encode_depth(p.depth) / self.config.gamma;
        for row in r0..=r1 {
            let dy = p.y - row as f64;
            for col in c0..=c1 {
                let dx = p.x - col as f64;
                let dist = (dx * dx + dy * dy).sqrt();
                let d = (p.radius - dist) / s as f64;
                let arg = d * d.abs() / self.config.sigma;
                if arg < -COVERAGE_CUTOFF {
                    continue;
                }
                let sample = Sample {
                    score: log_sigmoid(arg) + depth_term,
                    arg,
                    d,
                    dist,
                    dx,
                    dy,
                };
                f(row * s + col, &sample);
            }
        }
    }

    /// Per-pixel running max, normalizer and weighted depth, accumulated in
    /// point-index order with the background folded in as the initial term.
    fn aggregate(&self) -> Aggregate {
        let n = self.camera.image_size * self.camera.image_size;
        let bg = self.config.background_eps / self.config.gamma;
        let mut agg = Aggregate {
            max: vec![bg; n],
            norm: vec![1.0; n],
            acc: vec![0.0; n],
        };
        for j in 0..self.proj.len() {
            let c = self.camera.encode_depth(self.proj[j].depth);
            self.for_each_sample(j, |i, smp| {
                if smp.score > agg.max[i] {
                    let scale = (agg.max[i] - smp.score).exp();
                    agg.norm[i] = agg.norm[i] * scale + 1.0;
                    agg.acc[i] = agg.acc[i] * scale + c;
                    agg.max[i] = smp.score;
                } else {
                    let e = (smp.score - agg.max[i]).exp();
                    agg.norm[i] += e;
                    agg.acc[i] += e * c;
                }
            });
        }
        agg
    }
}

struct Aggregate {
    max: Vec<f64>,
    norm: Vec<f64>,
    acc: Vec<f64>,
}

impl Aggregate {
    fn intensity(&self, i: usize) -> f64 {
        self.acc[i] / self.norm[i]
    }
}

/// Probabilistic aggregation of all splats (see [`SoftRenderConfig`]).
pub fn render_soft(camera: &Camera, cloud: &PointCloud, config: &SoftRenderConfig) -> Result<ViewPatch> {
    let splats = Splats::new(camera, cloud, *config)?;
    let agg = splats.aggregate();
    let s = camera.image_size;
    Ok(ViewPatch {
        pixels: (0..s * s).map(|i| agg.intensity(i)).collect(),
        size: s,
        view_index: 0,
        rotation_index: 0,
    })
}

/// Soft weights at one pixel: `(point index, w_j)` for every contributing
/// point, plus the background weight.
pub fn soft_pixel_weights(
    camera: &Camera,
    cloud: &PointCloud,
    config: &SoftRenderConfig,
    row: usize,
    col: usize,
) -> Result<(Vec<(usize, f64)>, f64)> {
    let s = camera.image_size;
    if row >= s || col >= s {
        return Err(Error::invalid(format!("pixel ({row}, {col}) outside a {s}x{s} image")));
    }
    let splats = Splats::new(camera, cloud, *config)?;
    let agg = splats.aggregate();
    let target = row * s + col;
    let (m, z) = (agg.max[target], agg.norm[target]);
    let mut weights = Vec::new();
    for j in 0..splats.proj.len() {
        splats.for_each_sample(j, |i, smp| {
            if i == target {
                weights.push((j, (smp.score - m).exp() / z));
            }
        });
    }
    let bg = (config.background_eps / config.gamma - m).exp() / z;
    Ok((weights, bg))
}

/// Gradient of `sum(grad_pixels * render_soft(...))` with respect to the
/// camera's (theta, phi, rho). The soft model is used whichever forward
/// produced the pixels.
pub fn render_backward(
    camera: &Camera,
    cloud: &PointCloud,
    config: &SoftRenderConfig,
    grad_pixels: &[f64],
) -> Result<[f64; 3]> {
    let s = camera.image_size;
    if grad_pixels.len() != s * s {
        return Err(Error::shape(format!(
            "render_backward: {} upstream values for a {s}x{s} image",
            grad_pixels.len()
        )));
    }
    let mut out = [0.0; 3];
    if grad_pixels.iter().all(|&g| g == 0.0) {
        return Ok(out);
    }
    let splats = Splats::new(camera, cloud, *config)?;
    let agg = splats.aggregate();
    let jac = projection_jacobians(camera, cloud)?;
    let inv_s = 1.0 / s as f64;
    let dc_dz = -1.0 / (camera.far - camera.near);
    for (j, jac) in jac.iter().enumerate() {
        let Some(jac) = jac else { continue };
        let c = camera.encode_depth(splats.proj[j].depth);
        // Accumulated dL/d(x, y, radius, c) for this splat.
        let mut g = [0.0; 4];
        splats.for_each_sample(j, |i, smp| {
            let up = grad_pixels[i];
            if up == 0.0 {
                return;
            }
            let w = (smp.score - agg.max[i]).exp() / agg.norm[i];
            let g_score = up * w * (c - agg.intensity(i));
            g[3] += up * w + g_score / config.gamma;
            let g_d = g_score * sigmoid(-smp.arg) * 2.0 * smp.d.abs() / config.sigma;
            g[2] += g_d * inv_s;
            if smp.dist > 0.0 {
                g[0] -= g_d * smp.dx / smp.dist * inv_s;
                g[1] -= g_d * smp.dy / smp.dist * inv_s;
            }
        });
        let g_depth = g[3] * dc_dz;
        for (slot, o) in out.iter_mut().enumerate() {
            *o += g[0] * jac[0][slot] + g[1] * jac[1][slot] + g[2] * jac[2][slot] + g_depth * jac[3][slot];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::render::camera::default_up;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1)))
            .collect();
        let radii = (0..n).map(|_| rng.random_range(0.02..0.05)).collect();
        PointCloud::new(pts).unwrap().with_radii(radii).unwrap()
    }

    fn cam(p: [f64; 3], size: usize) -> Camera {
        Camera::from_viewpoint(p[0], p[1], p[2], default_up()).unwrap().with_image_size(size)
    }

    #[test]
    fn empty_cloud_is_background() {
        let c = cam([0.5, 0.5, 0.5], 64);
        let empty = PointCloud::default().with_radii(vec![]).unwrap();
        assert!(render_hard(&c, &empty).unwrap().pixels.iter().all(|&v| v == 0.0));
        let soft = render_soft(&c, &empty, &SoftRenderConfig::default()).unwrap();
        assert!(soft.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sphere_disk() {
        let c = cam([0.4, 1.0, 0.5], 64);
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap().with_radii(vec![0.05]).unwrap();
        let patch = render_hard(&c, &cloud).unwrap();
        let r = 0.05 * c.focal_px() / 0.5;
        let value = c.encode_depth(0.5);
        for row in 0..64 {
            for col in 0..64 {
                let d2 = (row as f64 - 31.5).powi(2) + (col as f64 - 31.5).powi(2);
                let expect = if d2 <= r * r { value } else { 0.0 };
                assert_eq!(patch.get(row, col), expect, "pixel ({row}, {col})");
            }
        }
    }

    #[test]
    fn nearer_sphere_wins() {
        let c = cam([0.0, std::f64::consts::FRAC_PI_2, 0.8], 64);
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 0.3)])
            .unwrap()
            .with_radii(vec![0.05, 0.01])
            .unwrap();
        let patch = render_hard(&c, &cloud).unwrap();
        // The center pixel of an even image sits half a pixel off axis.
        assert_eq!(patch.get(31, 31), c.encode_depth(0.5));
        assert_eq!(patch.get(29, 31), c.encode_depth(0.8));
    }

    #[test]
    fn weights_are_normalized() {
        let cloud = random_scene(4, 40);
        for params in [[0.3, 0.9, 0.4], [2.0, 0.2, 0.9]] {
            let c = cam(params, 16);
            for cfg in [SoftRenderConfig::default(), SoftRenderConfig { sigma: 1e-2, gamma: 0.1, background_eps: 0.05 }] {
                for (row, col) in [(0, 0), (7, 8), (8, 8), (15, 3)] {
                    let (w, bg) = soft_pixel_weights(&c, &cloud, &cfg, row, col).unwrap();
                    let total: f64 = w.iter().map(|x| x.1).sum::<f64>() + bg;
                    assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn far_away_cloud_renders_background() {
        let c = cam([0.0, 1.2, 0.5], 64);
        let cloud = PointCloud::new(vec![Vec3::new(5.0, 5.0, -0.2)]).unwrap().with_radii(vec![0.01]).unwrap();
        let soft = render_soft(&c, &cloud, &SoftRenderConfig::default()).unwrap();
        assert!(soft.pixels.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn soft_converges_to_hard() {
        let c = cam([0.4, 1.0, 0.5], 64);
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap().with_radii(vec![0.05]).unwrap();
        let hard = render_hard(&c, &cloud).unwrap();
        let cfg = SoftRenderConfig { sigma: 1e-6, gamma: 1e-6, background_eps: 0.01 };
        let soft = render_soft(&c, &cloud, &cfg).unwrap();
        let r = 0.05 * c.focal_px() / 0.5;
        let mut worst: f64 = 0.0;
        for row in 0..64 {
            for col in 0..64 {
                let dist = ((row as f64 - 31.5).powi(2) + (col as f64 - 31.5).powi(2)).sqrt();
                if (dist - r).abs() <= 1.0 {
                    continue;
                }
                worst = worst.max((soft.get(row, col) - hard.get(row, col)).abs());
            }
        }
        assert!(worst < 1e-3, "max diff {worst}");
    }

    #[test]
    fn order_invariance() {
        let cloud = random_scene(8, 30);
        let mut rev: Vec<usize> = (0..30).collect();
        rev.reverse();
        let shuffled = cloud.select(&rev);
        let c = cam([1.0, 0.8, 0.45], 32);
        let cfg = SoftRenderConfig { sigma: 1e-3, gamma: 0.05, background_eps: 0.01 };
        let a = render_soft(&c, &cloud, &cfg).unwrap();
        let b = render_soft(&c, &shuffled, &cfg).unwrap();
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let c = cam([0.3, 0.9, 0.4], 16);
        let g = render_backward(&c, &random_scene(1, 10), &SoftRenderConfig::default(), &[0.0; 256]).unwrap();
        assert_eq!(g, [0.0; 3]);
        assert!(render_backward(&c, &random_scene(1, 10), &SoftRenderConfig::default(), &[0.0; 10]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = SoftRenderConfig { sigma: 2e-3, gamma: 0.1, background_eps: 0.01 };
        for seed in 0..4 {
            let cloud = random_scene(seed, 20);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let upstream: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let params = [0.3 + seed as f64, 0.7, 0.45];
            let loss = |p: [f64; 3]| -> f64 {
                let img = render_soft(&cam(p, 16), &cloud, &cfg).unwrap();
                img.pixels.iter().zip(&upstream).map(|(a, b)| a * b).sum()
            };
            let analytic = render_backward(&cam(params, 16), &cloud, &cfg, &upstream).unwrap();
            let h = 1e-6;
            for slot in 0..3 {
                let mut a = params;
                let mut b = params;
                a[slot] += h;
                b[slot] -= h;
                let fd = (loss(a) - loss(b)) / (2.0 * h);
                let rel = (fd - analytic[slot]).abs() / fd.abs().max(analytic[slot].abs()).max(1e-8);
                assert!(rel < 1e-3, "seed {seed} slot {slot}: fd {fd} analytic {}", analytic[slot]);
            }
        }
    }

    #[test]
    fn occluded_point_still_gets_weight() {
        let c = cam([0.0, std::f64::consts::FRAC_PI_2, 0.8], 16);
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 0.2)])
            .unwrap()
            .with_radii(vec![0.05, 0.05])
            .unwrap();
        let cfg = SoftRenderConfig { sigma: 1e-3, gamma: 0.1, background_eps: 0.01 };
        let hard = render_hard(&c, &cloud).unwrap();
        assert_eq!(hard.get(8, 8), c.encode_depth(0.6));
        let (w, _) = soft_pixel_weights(&c, &cloud, &cfg, 8, 8).unwrap();
        let hidden = w.iter().find(|x| x.0 == 0).unwrap().1;
        assert!(hidden > 0.0);
        let mut up = vec![0.0; 256];
        up[8 * 16 + 8] = 1.0;
        let g_both = render_backward(&c, &cloud, &cfg, &up).unwrap();
        let g_front = render_backward(&c, &cloud.select(&[1]), &cfg, &up).unwrap();
        assert_ne!(g_both, g_front);
    }

    #[test]
    fn rotations() {
        let mut p = ViewPatch::blank(5);
        p.pixels[1 * 5 + 3] = 1.0;
        let rots = augment_rotations(&p);
        assert_eq!(rots[0].pixels, p.pixels);
        assert_eq!(rots[1].get(3, 5 - 1 - 1), 1.0);
        for (k, r) in rots.iter().enumerate() {
            assert_eq!(r.rotation_index, k);
        }
        let mut q = p.clone();
        for _ in 0..4 {
            q = augment_rotations(&q)[1].clone();
        }
        assert_eq!(q.pixels, p.pixels);
        assert_eq!(rots[2].pixels, augment_rotations(&rots[1])[1].pixels);
    }

    #[test]
    fn pgm_layout() {
        let mut p = ViewPatch::blank(2);
        p.pixels = vec![0.0, 0.5, 1.0, 0.25];
        let mut buf = Vec::new();
        p.write_pgm(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n2 2\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 64]);
    }
}
