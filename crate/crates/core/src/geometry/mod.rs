//! Point clouds, normal estimation, local reference frames and neighbour
//! queries.

mod index;
mod lrf;
mod normals;
mod rigid;

pub use index::{Neighbors, Query, SpatialIndex};
pub use lrf::{build_lrf, LocalFrame};
pub(crate) use lrf::deparallelize;
pub use normals::estimate_normals;
pub use rigid::RigidTransform;

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Positions in meters with optional unit normals and splat radii.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    radii: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
            radii: None,
        })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vec3::from(*p)).collect())
    }

    /// Attaches normals, which must be unit length within 1e-6.
    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Attaches strictly positive radii.
    pub fn with_radii(mut self, radii: Vec<f64>) -> Result<Self> {
        if radii.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} radii for {} points",
                radii.len(),
                self.points.len()
            )));
        }
        if let Some(i) = radii.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid(format!("radius {i} is not strictly positive")));
        }
        self.radii = Some(radii);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn radii(&self) -> Option<&[f64]> {
        self.radii.as_deref()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            radii: self
                .radii
                .as_ref()
                .map(|r| indices.iter().map(|&i| r[i]).collect()),
        }
    }

    /// Applies `x -> rotation * x + translation`; normals are rotated.
    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| (rotation * v).normalize()).collect()),
            radii: self.radii.clone(),
        }
    }
}

/// Splat radius assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadiusMode {
    Fixed(f64),
    /// `scale` times the mean distance to the `k` nearest other points.
    Adaptive { k: usize, scale: f64 },
}

impl Default for RadiusMode {
    fn default() -> Self {
        RadiusMode::Adaptive { k: 8, scale: 1.0 }
    }
}

pub fn compute_radii(cloud: &PointCloud, mode: RadiusMode) -> Result<PointCloud> {
    let radii = match mode {
        RadiusMode::Fixed(r) => {
            if !(r > 0.0) {
                return Err(Error::invalid(format!("fixed radius must be positive, got {r}")));
            }
            vec![r; cloud.len()]
        }
        RadiusMode::Adaptive { k, scale } => {
            if !(scale > 0.0) {
                return Err(Error::invalid(format!("radius scale must be positive, got {scale}")));
            }
            if k == 0 || cloud.len() <= k {
                return Err(Error::invalid(format!(
                    "adaptive radii need more than k = {k} points, cloud has {}",
                    cloud.len()
                )));
            }
            let index = SpatialIndex::build(cloud.points());
            let mut scratch = Neighbors::default();
            cloud
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    index.knn_into(p, k + 1, &mut scratch);
                    let total: f64 = scratch
                        .iter()
                        .filter(|&&(j, _)| j != i)
                        .take(k)
                        .map(|&(_, d2)| d2.sqrt())
                        .sum();
                    scale * total / k as f64
                })
                .collect()
        }
    };
    cloud.clone().with_radii(radii)
}

/// Points within `crop_radius` of the frame origin, expressed in frame
/// coordinates. Output keeps ascending source-index order.
pub fn crop_local(
    cloud: &PointCloud,
    index: &SpatialIndex,
    frame: &LocalFrame,
    crop_radius: f64,
) -> Result<PointCloud> {
    if !(crop_radius > 0.0) {
        return Err(Error::invalid(format!("crop radius must be positive, got {crop_radius}")));
    }
    let ids = index.query(cloud.points(), &frame.origin, Query::Radius(crop_radius));
    let mut local = cloud.select(&ids);
    for p in &mut local.points {
        *p = frame.to_local(p);
    }
    if let Some(normals) = &mut local.normals {
        for n in normals {
            *n = frame.rotation.transpose() * *n;
        }
    }
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, h: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Vec3::new(i as f64 * h, j as f64 * h, 0.0));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PointCloud::from_arrays(&[[0.0, f64::NAN, 0.0]]).is_err());
        let c = PointCloud::from_arrays(&[[0.0; 3]]).unwrap();
        assert!(c.clone().with_normals(vec![Vec3::new(0.0, 0.0, 2.0)]).is_err());
        assert!(c.clone().with_radii(vec![0.0]).is_err());
        assert!(c.with_radii(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn fixed_radii() {
        let c = compute_radii(&grid(3, 0.1), RadiusMode::Fixed(0.01)).unwrap();
        assert!(c.radii().unwrap().iter().all(|&r| r == 0.01));
        assert!(compute_radii(&grid(3, 0.1), RadiusMode::Fixed(0.0)).is_err());
    }

    #[test]
    fn adaptive_radius_on_a_grid() {
        let h = 0.05;
        let c = compute_radii(&grid(7, h), RadiusMode::Adaptive { k: 4, scale: 1.0 }).unwrap();
        let r = c.radii().unwrap();
        for i in 1..6 {
            for j in 1..6 {
                assert!((r[i * 7 + j] - h).abs() < 1e-9);
            }
        }
        let single = PointCloud::from_arrays(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(compute_radii(&single, RadiusMode::default()).is_err());
        let bad = RadiusMode::Adaptive { k: 4, scale: -1.0 };
        assert!(compute_radii(&grid(3, 0.1), bad).is_err());
    }

    #[test]
    fn crop_keeps_keypoint_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let index = SpatialIndex::build(cloud.points());
        let key = 17;
        let frame = build_lrf(cloud.point(key), Vec3::new(0.3, -0.2, 0.9).normalize(), Vec3::new(0.0, -1.0, 0.0));
        let r = 0.35;
        let local = crop_local(&cloud, &index, &frame, r).unwrap();
        assert!(local.points().iter().any(|p| p.norm() == 0.0));
        assert!(local.points().iter().all(|p| p.norm() <= r + 1e-9));

        // A radius below the nearest-neighbour distance keeps only the keypoint.
        let nn = cloud
            .points()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != key)
            .map(|(_, p)| (p - cloud.point(key)).norm())
            .fold(f64::INFINITY, f64::min);
        let alone = crop_local(&cloud, &index, &frame, nn * 0.5).unwrap();
        assert_eq!(alone.len(), 1);

        for (i, p) in cloud.points().iter().enumerate().take(20) {
            let back = frame.to_world(&frame.to_local(p));
            assert!((back - p).norm() < 1e-12, "point {i}");
        }
        assert!(crop_local(&cloud, &index, &frame, 0.0).is_err());
    }
}
