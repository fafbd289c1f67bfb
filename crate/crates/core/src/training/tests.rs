use super::*;
use crate::geometry::{compute_radii, estimate_normals, Mat3, RadiusMode, Vec3};
use nalgebra::Rotation3;

fn surface(n: usize) -> PointCloud {
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = i as f64 / n as f64 - 0.5;
            let z = j as f64 / n as f64 - 0.5;
            let y = 0.08 * (7.0 * x).sin() * (5.0 * z).cos() + 0.05 * (x * x - z);
            pts.push(Vec3::new(x, y, z));
        }
    }
    let cloud = PointCloud::new(pts).unwrap();
    let cloud = estimate_normals(&cloud, 12, Vec3::new(0.0, 5.0, 0.0)).unwrap();
    compute_radii(&cloud, RadiusMode::Fixed(0.02)).unwrap()
}

fn pair(n: usize) -> FragmentPair {
    let p = surface(n);
    let gt = RigidTransform::new(
        Rotation3::from_axis_angle(&Vec3::y_axis(), 0.4).into_inner(),
        Vec3::new(0.2, 0.0, -0.1),
    )
    .unwrap();
    let inv = gt.inverse();
    let q = p.transformed(&inv.rotation, &inv.translation);
    FragmentPair::new(p, q, gt, 1.0).unwrap()
}

fn brute_force(pair: &FragmentPair, tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..pair.cloud_p.len() {
        for j in 0..pair.cloud_q.len() {
            if (pair.cloud_p.point(i) - pair.transform_gt.apply(&pair.cloud_q.point(j))).norm() < tol {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn identity_pairs_are_diagonal() {
    let p = surface(10);
    let pair = FragmentPair::new(p.clone(), p, RigidTransform::identity(), 1.0).unwrap();
    let batch = sample_match_batch(&pair, 24, 1e-6, 3).unwrap();
    assert_eq!(batch.len(), 24);
    assert!(batch.pairs.iter().all(|&(i, j)| i == j));
    let mut seen: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 24);
}

#[test]
fn sampled_pairs_satisfy_the_bound() {
    let mut pr = pair(12);
    // Perturb q so only part of the cloud matches within tolerance.
    let pts: Vec<Vec3> = pr
        .cloud_q
        .points()
        .iter()
        .enumerate()
        .map(|(k, p)| p + Vec3::new(0.0, 0.004 * (k % 5) as f64, 0.0))
        .collect();
    let q = PointCloud::new(pts)
        .unwrap()
        .with_normals(pr.cloud_q.normals().unwrap().to_vec())
        .unwrap()
        .with_radii(pr.cloud_q.radii().unwrap().to_vec())
        .unwrap();
    pr.cloud_q = q;
    let tol = 0.01;
    let oracle = brute_force(&pr, tol);
    let index = SpatialIndex::build(pr.cloud_p.points());
    let cands = pr.correspondences(&index, tol);
    assert!(!cands.is_empty() && cands.len() < pr.cloud_q.len());
    for c in &cands {
        assert!(oracle.contains(c));
    }
    for seed in 0..5 {
        let batch = sample_match_batch(&pr, 16, tol, seed).unwrap();
        assert_eq!(batch, sample_match_batch(&pr, 16, tol, seed).unwrap());
        for c in &batch.pairs {
            assert!(oracle.contains(c));
        }
    }
    match sample_match_batch(&pr, cands.len() + 1, tol, 0) {
        Err(Error::NotEnoughCorrespondences { requested, available }) => {
            assert_eq!((requested, available), (cands.len() + 1, cands.len()));
        }
        other => panic!("expected NotEnoughCorrespondences, got {other:?}"),
    }
}

#[test]
fn pair_validation() {
    let p = surface(6);
    let mut low = FragmentPair::new(p.clone(), p.clone(), RigidTransform::identity(), 0.2).unwrap();
    assert!(sample_match_batch(&low, 2, 1e-6, 0).is_err());
    low.overlap = 0.3;
    assert!(sample_match_batch(&low, 2, 1e-6, 0).is_ok());
    assert!(FragmentPair::new(p.clone(), p.clone(), RigidTransform::identity(), 1.5).is_err());
    let mirror = RigidTransform {
        rotation: Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)),
        translation: Vec3::zeros(),
    };
    assert!(FragmentPair::new(p.clone(), p, mirror, 0.5).is_err());
}

fn tiny_config() -> TrainConfig {
    TrainConfig::parse(
        "epochs = 2\nbatch_size = 4\nn_views = 2\ndescriptor_dim = 8\nimage_size = 16\nsigma = 2e-3\ngamma = 0.1\ncrop_radius = 0.25\nseed = 7\n",
    )
    .unwrap()
}

#[test]
fn retained_and_recomputed_gradients_agree() {
    let pr = pair(12);
    let model = Model::new(tiny_config().model_config(), 1).unwrap();
    let index = SpatialIndex::build(pr.cloud_p.points());
    let locals: Vec<_> = [3, 40, 77, 100]
        .iter()
        .map(|&i| model.prepare(&pr.cloud_p, &index, i).unwrap())
        .collect();
    let seeds = |d: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        Ok(d.iter().enumerate().map(|(k, v)| v.iter().map(|x| x * (k as f64 - 1.5)).collect()).collect())
    };
    let (da, ga) = batch_gradients(&model, &locals, true, seeds).unwrap();
    let (db, gb) = batch_gradients(&model, &locals, false, seeds).unwrap();
    assert_eq!(da, db);
    assert_eq!(ga, gb);
    // Gradient reaches the viewpoint azimuths through the renderer.
    assert!(ga[18].iter().any(|&g| g != 0.0));
}

#[test]
fn training_is_reproducible_and_logs() {
    let data = vec![pair(12), pair(11)];
    let cfg = tiny_config();
    let mut seen = 0;
    let a = train(&data, &cfg, |_| seen += 1).unwrap();
    let b = train(&data, &cfg, |_| {}).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(a.history, b.history);
    for (x, y) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(x.data(), y.data());
    }
    let init = Model::new(cfg.model_config(), cfg.seed).unwrap();
    let moved = (18..21).any(|k| {
        init.params()[k]
            .data()
            .iter()
            .zip(a.model.params()[k].data())
            .any(|(u, v)| u != v)
    });
    assert!(moved);
    assert_eq!(epoch_means(&a.history).len(), 2);

    let mut csv = Vec::new();
    write_history(&mut csv, &a.history).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,batch,bh_loss,ov_loss,total"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(first[4], a.history[0].total);
}

#[test]
fn non_finite_is_named() {
    let names = ["a", "b", "c"];
    let vals = vec![vec![1.0], vec![2.0, f64::NAN], vec![f64::INFINITY]];
    assert_eq!(first_non_finite(names, &vals).as_deref(), Some("b"));
    assert_eq!(first_non_finite(names, &vals[..1]), None);
}

#[test]
fn training_rejects_bad_input() {
    let cfg = tiny_config();
    assert!(train(&[], &cfg, |_| {}).is_err());
    let mut pr = pair(6);
    pr.overlap = 0.1;
    assert!(train(&[pr], &cfg, |_| {}).is_err());
}
