use nalgebra::{Matrix3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

/// Least-squares rigid transform mapping `b` onto `a`, with the reflection
/// case corrected to a proper rotation.
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Result<RigidTransform> {
    let m = a.len();
    if m != b.len() {
        return Err(Error::shape(format!("{m} target points for {} source points", b.len())));
    }
    if m < 3 {
        return Err(Error::Degenerate(format!("alignment needs at least 3 points, got {m}")));
    }
    let ca = a.iter().sum::<Vec3>() / m as f64;
    let cb = b.iter().sum::<Vec3>() / m as f64;
    let mut h = Matrix3::zeros();
    let mut spread_b = Matrix3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        let (da, db) = (pa - ca, pb - cb);
        h += db * da.transpose();
        spread_b += db * db.transpose();
    }
    // Collinear (or coincident) sources leave a rotation about the line free.
    let sv = spread_b.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(f64::total_cmp);
    if !(sorted[1] > 1e-12 * sorted[2].max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate("source points are collinear".into()));
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * fix * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: ca - rotation * cb,
    })
}

const REFIT_ROUNDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl RansacParams {
    /// Iteration budget used with an inlier-ratio threshold of 0.05.
    pub const ITERATIONS_STRICT: usize = 55_000;
    /// Iteration budget used with an inlier-ratio threshold of 0.2.
    pub const ITERATIONS_LOOSE: usize = 860;

    pub fn strict(seed: u64) -> Self {
        Self {
            iterations: Self::ITERATIONS_STRICT,
            inlier_threshold: super::TAU1,
            seed,
        }
    }

    pub fn loose(seed: u64) -> Self {
        Self {
            iterations: Self::ITERATIONS_LOOSE,
            inlier_threshold: super::TAU1,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Positions in the match list, ascending.
    pub inliers: Vec<usize>,
}

fn inliers_of(t: &RigidTransform, matches: &[(usize, usize)], kp_p: &[Vec3], kp_q: &[Vec3], thr: f64) -> Vec<usize> {
    (0..matches.len())
        .filter(|&k| {
            let (i, j) = matches[k];
            (kp_p[i] - t.apply(&kp_q[j])).norm() < thr
        })
        .collect()
}

fn fit(ids: &[usize], matches: &[(usize, usize)], kp_p: &[Vec3], kp_q: &[Vec3]) -> Result<RigidTransform> {
    let a: Vec<Vec3> = ids.iter().map(|&k| kp_p[matches[k].0]).collect();
    let b: Vec<Vec3> = ids.iter().map(|&k| kp_q[matches[k].1]).collect();
    kabsch(&a, &b)
}

/// Estimates the transform mapping Q keypoints onto P from putative matches.
/// The best minimal-sample model is refit on its inliers, repeatedly.
pub fn ransac_register(
    matches: &[(usize, usize)],
    kp_p: &[Vec3],
    kp_q: &[Vec3],
    params: RansacParams,
) -> Result<Registration> {
    if matches.len() < 3 {
        return Err(Error::NotEnoughCorrespondences {
            requested: 3,
            available: matches.len(),
        });
    }
    if matches.iter().any(|&(i, j)| i >= kp_p.len() || j >= kp_q.len()) {
        return Err(Error::invalid("match index out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = matches.len();
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    for _ in 0..params.iterations {
        let s = rand::seq::index::sample(&mut rng, n, 3).into_vec();
        let Ok(t) = fit(&s, matches, kp_p, kp_q) else {
            continue;
        };
        let inl = inliers_of(&t, matches, kp_p, kp_q, params.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((t, inl));
        }
        // Nothing left to gain once every match agrees.
        if best.as_ref().is_some_and(|(_, b)| b.len() == n) {
            break;
        }
    }
    let Some((mut t, mut inl)) = best.filter(|(_, b)| b.len() >= 3) else {
        return Err(Error::NoConsensus);
    };
    // Refit on the consensus set until it stops changing.
    for _ in 0..REFIT_ROUNDS {
        let Ok(refit) = fit(&inl, matches, kp_p, kp_q) else {
            break;
        };
        let refit_inl = inliers_of(&refit, matches, kp_p, kp_q, params.inlier_threshold);
        if refit_inl.len() < 3 {
            break;
        }
        t = refit;
        if refit_inl == inl {
            break;
        }
        inl = refit_inl;
    }
    Ok(Registration { transform: t, inliers: inl })
}
