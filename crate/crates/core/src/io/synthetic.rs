//! Seeded synthetic scenes: a floor with boxes, spheres, cylinders and a
//! wall, z up. Each scene yields two overlapping half-space crops of the
//! same surface samples; the second is moved by a random rotation about the
//! y axis plus a translation.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::manifest::{Manifest, ManifestEntry};
use super::ply::{write_ply, PlyFormat, PlyWriteOptions};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Query, RigidTransform, SpatialIndex, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    /// Approximate point count of each fragment.
    pub points_per_fragment: usize,
    /// Side length of the square floor, meters.
    pub extent: f64,
    /// Per-coordinate Gaussian position noise, meters.
    pub noise_sigma: f64,
    /// Probability of dropping each point of each fragment.
    pub dropout: f64,
    pub max_translation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 8,
            points_per_fragment: 5000,
            extent: 1.5,
            noise_sigma: 0.002,
            dropout: 0.0,
            max_translation: 0.5,
        }
    }
}

/// Radius used to measure overlap.
pub const OVERLAP_RADIUS: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub fragment_a: PointCloud,
    pub fragment_b: PointCloud,
    /// Maps fragment_b into fragment_a's frame.
    pub transform_gt: RigidTransform,
    pub overlap: f64,
    pub sensor_a: Vec3,
    pub sensor_b: Vec3,
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    /// `origin + a u + b v`, a, b in [0, 1].
    Rect { origin: Vec3, u: Vec3, v: Vec3 },
    Sphere { center: Vec3, r: f64 },
    /// Open vertical tube standing on `base`.
    Tube { base: Vec3, r: f64, h: f64 },
    /// Horizontal disk.
    Disk { center: Vec3, r: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { u, v, .. } => u.cross(&v).norm(),
            Surface::Sphere { r, .. } => 4.0 * PI * r * r,
            Surface::Tube { r, h, .. } => 2.0 * PI * r * h,
            Surface::Disk { r, .. } => PI * r * r,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Surface::Rect { origin, u, v } => origin + u * rng.random::<f64>() + v * rng.random::<f64>(),
            Surface::Sphere { center, r } => {
                let d = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                center + d.normalize() * r
            }
            Surface::Tube { base, r, h } => {
                let a = rng.random_range(0.0..2.0 * PI);
                base + Vec3::new(r * a.cos(), r * a.sin(), h * rng.random::<f64>())
            }
            Surface::Disk { center, r } => {
                let a = rng.random_range(0.0..2.0 * PI);
                let s = r * rng.random::<f64>().sqrt();
                center + Vec3::new(s * a.cos(), s * a.sin(), 0.0)
            }
        }
    }
}

/// Floor regions covered by an object resting on it.
#[derive(Clone, Copy, Debug)]
enum Footprint {
    Circle { x: f64, y: f64, r: f64 },
    Rect { x: f64, y: f64, yaw: f64, hx: f64, hy: f64 },
}

impl Footprint {
    fn covers(&self, p: &Vec3) -> bool {
        match *self {
            Footprint::Circle { x, y, r } => (p.x - x).powi(2) + (p.y - y).powi(2) < r * r,
            Footprint::Rect { x, y, yaw, hx, hy } => {
                let (dx, dy) = (p.x - x, p.y - y);
                let (c, s) = (yaw.cos(), yaw.sin());
                (c * dx + s * dy).abs() < hx && (-s * dx + c * dy).abs() < hy
            }
        }
    }
}

struct Scene {
    surfaces: Vec<Surface>,
    floor_holes: Vec<Footprint>,
}

fn random_scene<R: Rng>(rng: &mut R, extent: f64) -> Scene {
    let h = extent / 2.0;
    let mut surfaces = vec![Surface::Rect {
        origin: Vec3::new(-h, -h, 0.0),
        u: Vec3::new(extent, 0.0, 0.0),
        v: Vec3::new(0.0, extent, 0.0),
    }];
    let mut holes = Vec::new();

    // One wall along a random side of the floor.
    let wall_h = rng.random_range(0.4..0.9);
    let side = rng.random_range(0..4);
    let corners = [
        Vec3::new(-h, -h, 0.0),
        Vec3::new(h, -h, 0.0),
        Vec3::new(h, h, 0.0),
        Vec3::new(-h, h, 0.0),
    ];
    let (a, b) = (corners[side], corners[(side + 1) % 4]);
    surfaces.push(Surface::Rect {
        origin: a,
        u: b - a,
        v: Vec3::new(0.0, 0.0, wall_h),
    });

    let n_objects = rng.random_range(3..=6);
    let inner = 0.8 * h;
    for _ in 0..n_objects {
        let x = rng.random_range(-inner..inner);
        let y = rng.random_range(-inner..inner);
        match rng.random_range(0..3) {
            0 => {
                let (hx, hy) = (rng.random_range(0.08..0.25), rng.random_range(0.08..0.25));
                let bh = rng.random_range(0.1..0.5);
                let yaw = rng.random_range(0.0..PI);
                let (c, s) = (yaw.cos(), yaw.sin());
                let ex = Vec3::new(c, s, 0.0) * (2.0 * hx);
                let ey = Vec3::new(-s, c, 0.0) * (2.0 * hy);
                let ez = Vec3::new(0.0, 0.0, bh);
                let o = Vec3::new(x, y, 0.0) - ex / 2.0 - ey / 2.0;
                surfaces.push(Surface::Rect { origin: o + ez, u: ex, v: ey });
                surfaces.push(Surface::Rect { origin: o, u: ex, v: ez });
                surfaces.push(Surface::Rect { origin: o + ey, u: ex, v: ez });
                surfaces.push(Surface::Rect { origin: o, u: ey, v: ez });
                surfaces.push(Surface::Rect { origin: o + ex, u: ey, v: ez });
                holes.push(Footprint::Rect { x, y, yaw, hx, hy });
            }
            1 => {
                let r = rng.random_range(0.08..0.22);
                let lift = if rng.random_bool(0.3) { rng.random_range(0.1..0.3) } else { 0.0 };
                surfaces.push(Surface::Sphere {
                    center: Vec3::new(x, y, r + lift),
                    r,
                });
            }
            _ => {
                let r = rng.random_range(0.05..0.18);
                let ch = rng.random_range(0.15..0.6);
                surfaces.push(Surface::Tube {
                    base: Vec3::new(x, y, 0.0),
                    r,
                    h: ch,
                });
                surfaces.push(Surface::Disk {
                    center: Vec3::new(x, y, ch),
                    r,
                });
                holes.push(Footprint::Circle { x, y, r });
            }
        }
    }
    Scene {
        surfaces,
        floor_holes: holes,
    }
}

fn sample_scene<R: Rng>(rng: &mut R, scene: &Scene, n: usize) -> Vec<Vec3> {
    let areas: Vec<f64> = scene.surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut pick = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < areas.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let p = scene.surfaces[k].sample(rng);
        // The floor (surface 0) is hidden under objects standing on it.
        if k == 0 && scene.floor_holes.iter().any(|f| f.covers(&p)) {
            continue;
        }
        out.push(p);
    }
    out
}

/// Fraction of points of `a` within `radius` of some point of `b`.
pub fn measure_overlap(a: &PointCloud, b: &PointCloud, radius: f64) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let index = SpatialIndex::build(b.points());
    let hits = a
        .points()
        .iter()
        .filter(|p| {
            index
                .query(b.points(), p, Query::Knn(1))
                .first()
                .is_some_and(|&j| (b.point(j) - *p).norm() <= radius)
        })
        .count();
    hits as f64 / a.len() as f64
}

fn synthetic_pair<R: Rng>(rng: &mut R, cfg: &SyntheticConfig) -> Result<SyntheticPair> {
    let scene = random_scene(rng, cfg.extent);
    // Each fragment keeps about 82% of the scene samples.
    let n_scene = (cfg.points_per_fragment as f64 / 0.82).ceil() as usize;
    let pts = sample_scene(rng, &scene, n_scene);

    let dir_angle = rng.random_range(0.0..2.0 * PI);
    let d = Vec3::new(dir_angle.cos(), dir_angle.sin(), 0.0);
    let mut t: Vec<f64> = pts.iter().map(|p| p.dot(&d)).collect();
    t.sort_by(f64::total_cmp);
    let quantile = |q: f64| t[((q * (t.len() - 1) as f64).round() as usize).min(t.len() - 1)];
    let hi = quantile(rng.random_range(0.75..0.9));
    let lo = quantile(rng.random_range(0.1..0.25));

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let crop = |keep: &dyn Fn(f64) -> bool, rng: &mut R| -> Vec<Vec3> {
        let mut out = Vec::new();
        for p in &pts {
            if !keep(p.dot(&d)) || (cfg.dropout > 0.0 && rng.random_bool(cfg.dropout)) {
                continue;
            }
            out.push(p + Vec3::from_fn(|_, _| noise.sample(rng)));
        }
        out
    };
    let a_pts = crop(&|s| s <= hi, rng);
    let b_world = crop(&|s| s >= lo, rng);

    let angle = rng.random_range(-PI..PI);
    let rotation = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), angle).into_inner();
    let m = cfg.max_translation;
    let translation = Vec3::new(rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m));
    let motion = RigidTransform::new(rotation, translation)?;

    let sensor = Vec3::new(0.0, 0.0, 3.0);
    let fragment_a = PointCloud::new(a_pts)?;
    let b_world = PointCloud::new(b_world)?;
    let overlap = measure_overlap(&fragment_a, &b_world, OVERLAP_RADIUS);
    let fragment_b = b_world.transformed(&motion.rotation, &motion.translation);
    Ok(SyntheticPair {
        fragment_a,
        fragment_b,
        transform_gt: motion.inverse(),
        overlap,
        sensor_a: sensor,
        sensor_b: motion.apply(&sensor),
    })
}

/// `cfg.n_pairs` pairs; identical for identical `(cfg, seed)`.
pub fn generate_pairs(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<SyntheticPair>> {
    if cfg.points_per_fragment < 32 || !(cfg.extent > 0.0) || !(cfg.noise_sigma >= 0.0) || !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config(format!("invalid synthetic configuration {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_pairs).map(|_| synthetic_pair(&mut rng, cfg)).collect()
}

/// Writes `pair_XXX_{a,b}.ply` and `manifest.txt` into `dir`.
pub fn gen_synthetic(dir: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::format(dir, e.to_string()))?;
    let pairs = generate_pairs(cfg, seed)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let (fa, fb) = (format!("pair_{k:03}_a.ply"), format!("pair_{k:03}_b.ply"));
        for (name, cloud, sensor) in [(&fa, &p.fragment_a, p.sensor_a), (&fb, &p.fragment_b, p.sensor_b)] {
            let opts = PlyWriteOptions {
                colors: None,
                sensor_origin: Some(sensor),
            };
            write_ply(&dir.join(name), cloud, PlyFormat::BinaryLittleEndian, opts)?;
        }
        entries.push(ManifestEntry {
            fragment_a: fa.into(),
            fragment_b: fb.into(),
            transform_gt: p.transform_gt,
            overlap: p.overlap,
            keypoints: None,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
