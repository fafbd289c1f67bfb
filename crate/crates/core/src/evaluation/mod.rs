//! Matching and registration metrics.

mod registration;

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use registration::{kabsch, ransac_register, RansacParams, Registration};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::par::map_collect;

/// Correctness radius for a match, in meters.
pub const TAU1: f64 = 0.10;
/// Inlier-ratio thresholds reported by default.
pub const TAU2_STRICT: f64 = 0.05;
pub const TAU2_LOOSE: f64 = 0.2;
/// Keypoints per fragment at desk scale.
pub const DEFAULT_KEYPOINTS: usize = 250;

/// `(index in P, index in Q)`.
pub type MatchSet = Vec<(usize, usize)>;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row in `set`, lowest index on ties.
fn nearest(x: &[f64], set: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, y) in set.iter().enumerate() {
        let d = sq_dist(x, y);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn check_descriptors(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<usize> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("matching needs two nonempty descriptor sets"));
    }
    let dim = p[0].len();
    if p.iter().chain(q).any(|d| d.len() != dim) {
        return Err(Error::shape("descriptor dimensions differ"));
    }
    Ok(dim)
}

/// Mutual nearest neighbours in descriptor space, sorted by P index.
/// Exact brute force.
pub fn mutual_nn_matches(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<MatchSet> {
    check_descriptors(p, q)?;
    let p_to_q = map_collect(p, |_, x| nearest(x, q));
    let q_to_p = map_collect(q, |_, y| nearest(y, p));
    Ok(p_to_q
        .iter()
        .enumerate()
        .filter(|&(i, &j)| q_to_p[j] == i)
        .map(|(i, &j)| (i, j))
        .collect())
}

fn is_correct(m: (usize, usize), kp_p: &[Vec3], kp_q: &[Vec3], gt: &RigidTransform, tau1: f64) -> bool {
    (kp_p[m.0] - gt.apply(&kp_q[m.1])).norm() < tau1
}

/// Number of matches with `|p - T(q)| < tau1`.
pub fn count_correct(matches: &[(usize, usize)], kp_p: &[Vec3], kp_q: &[Vec3], gt: &RigidTransform, tau1: f64) -> usize {
    matches.iter().filter(|&&m| is_correct(m, kp_p, kp_q, gt, tau1)).count()
}

/// Fraction of correct matches; 0 for an empty set.
pub fn inlier_fraction(matches: &[(usize, usize)], kp_p: &[Vec3], kp_q: &[Vec3], gt: &RigidTransform, tau1: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    count_correct(matches, kp_p, kp_q, gt, tau1) as f64 / matches.len() as f64
}

/// Fraction of pairs whose inlier fraction exceeds `tau2`.
pub fn recall(inlier_fractions: &[f64], tau2: f64) -> f64 {
    if inlier_fractions.is_empty() {
        return 0.0;
    }
    inlier_fractions.iter().filter(|&&f| f > tau2).count() as f64 / inlier_fractions.len() as f64
}

/// `count` distinct indices below `n`, in ascending order.
pub fn sample_keypoints(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = sample(&mut rng, n, count.min(n)).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairReport {
    pub pair_id: String,
    pub n_matches: usize,
    pub n_correct: usize,
    pub inlier_fraction: f64,
    pub passed: bool,
}

pub fn evaluate_pair(
    pair_id: &str,
    descs_p: &[Vec<f64>],
    descs_q: &[Vec<f64>],
    kp_p: &[Vec3],
    kp_q: &[Vec3],
    gt: &RigidTransform,
    tau1: f64,
    tau2: f64,
) -> Result<PairReport> {
    if descs_p.len() != kp_p.len() || descs_q.len() != kp_q.len() {
        return Err(Error::shape("one descriptor per keypoint is required"));
    }
    let matches = mutual_nn_matches(descs_p, descs_q)?;
    let n_correct = count_correct(&matches, kp_p, kp_q, gt, tau1);
    let inlier_fraction = inlier_fraction(&matches, kp_p, kp_q, gt, tau1);
    Ok(PairReport {
        pair_id: pair_id.to_string(),
        n_matches: matches.len(),
        n_correct,
        inlier_fraction,
        passed: inlier_fraction > tau2,
    })
}

pub const REPORT_HEADER: &str = "pair_id,n_matches,n_correct,inlier_fraction,passed@tau2";

/// Per-pair CSV rows followed by a `#` summary line with recall and the
/// mean correct-match count.
pub fn write_report<W: Write>(mut out: W, reports: &[PairReport], tau2: f64) -> Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.pair_id, r.n_matches, r.n_correct, r.inlier_fraction, r.passed as u8
        )?;
    }
    let fractions: Vec<f64> = reports.iter().map(|r| r.inlier_fraction).collect();
    let mean_correct = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.n_correct as f64).sum::<f64>() / reports.len() as f64
    };
    writeln!(
        out,
        "# tau2={tau2} recall={} mean_correct={mean_correct}",
        recall(&fractions, tau2)
    )?;
    Ok(())
}

/// Projects descriptors onto their top three principal components and
/// min-max scales each channel to [0, 1]. Channels without spread are 0.5.
pub fn pca_colorize(descriptors: &[Vec<f64>]) -> Result<Vec<[f64; 3]>> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::invalid(format!("colorization needs at least 2 descriptors, got {n}")));
    }
    let d = descriptors[0].len();
    if d == 0 || descriptors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("descriptors must share a positive dimension"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| descriptors[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    // Spread below this is rounding noise from centering.
    let floor = 1e-12 * descriptors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut colors = vec![[0.5; 3]; n];
    for (c, &k) in order.iter().take(3).enumerate() {
        let proj = &x * eig.eigenvectors.column(k);
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        if span <= floor || span == 0.0 {
            continue;
        }
        for (i, &v) in proj.iter().enumerate() {
            colors[i][c] = (v - lo) / span;
        }
    }
    Ok(colors)
}
