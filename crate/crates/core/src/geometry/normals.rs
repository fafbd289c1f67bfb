use nalgebra::SymmetricEigen;

use super::{Mat3, Neighbors, PointCloud, SpatialIndex, Vec3};
use crate::error::{Error, Result};

/// PCA normals from the `k` nearest neighbours (the point itself included),
/// flipped to face `orientation_reference`.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    orientation_reference: Vec3,
) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    if cloud.len() <= k {
        return Err(Error::invalid(format!(
            "normal estimation needs more than k = {k} points, cloud has {}",
            cloud.len()
        )));
    }
    let index = SpatialIndex::build(cloud.points());
    let mut scratch = Neighbors::default();
    let normals = cloud
        .points()
        .iter()
        .map(|p| {
            index.knn_into(p, k, &mut scratch);
            let n = smallest_axis(scratch.iter().map(|&(j, _)| cloud.point(j)));
            if n.dot(&(orientation_reference - p)) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect();
    cloud.clone().with_normals(normals)
}

/// Eigenvector of the smallest covariance eigenvalue.
fn smallest_axis(points: impl Iterator<Item = Vec3> + Clone) -> Vec3 {
    let n = points.clone().count() as f64;
    let mean = points.clone().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cov = points.fold(Mat3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_normals_face_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random(), rng.random(), 0.0))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let out = estimate_normals(&cloud, 10, Vec3::new(0.5, 0.5, 3.0)).unwrap();
        for n in out.normals().unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-9);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let center = Vec3::new(0.3, -0.2, 1.0);
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                center + Vec3::new(r * t.cos(), r * t.sin(), z)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        // Reference at the center orients every normal inwards.
        let out = estimate_normals(&cloud, 16, center).unwrap();
        let cos5 = 5f64.to_radians().cos();
        for (i, (p, n)) in cloud.points().iter().zip(out.normals().unwrap()).enumerate() {
            let radial = (p - center).normalize();
            assert!(-n.dot(&radial) > cos5, "point {i}: {}", n.dot(&radial));
        }
    }

    #[test]
    fn k_not_below_n_is_an_error() {
        let cloud = PointCloud::from_arrays(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.1]]).unwrap();
        assert!(estimate_normals(&cloud, 4, Vec3::zeros()).is_err());
        assert!(estimate_normals(&cloud, 2, Vec3::zeros()).is_err());
        assert!(estimate_normals(&cloud, 3, Vec3::zeros()).is_ok());
    }
}
