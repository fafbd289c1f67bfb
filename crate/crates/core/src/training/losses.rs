use crate::error::{Error, Result};
use crate::render::{VIEWPOINT_LOWER, VIEWPOINT_UPPER};

/// Value and gradients of a loss over two descriptor sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub grad_p: Vec<Vec<f64>>,
    pub grad_q: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds `scale * (a - b) / |a - b|` to `ga` and subtracts it from `gb`.
fn push_apart(ga: &mut [f64], gb: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let d = distance(a, b);
    if d == 0.0 {
        return;
    }
    for k in 0..a.len() {
        let g = scale * (a[k] - b[k]) / d;
        ga[k] += g;
        gb[k] -= g;
    }
}

/// Batch-hard triplet loss with anchors `p`, positives `q[i]` and the
/// hardest in-batch negative `q[j != i]` (lowest `j` on ties):
/// `mean_i max(0, m + |p_i - q_i| - min_j |p_i - q_j|)`.
pub fn batch_hard_triplet_loss(p: &[Vec<f64>], q: &[Vec<f64>], margin: f64) -> Result<TripletLoss> {
    let b = p.len();
    if b != q.len() {
        return Err(Error::shape(format!("{b} anchors for {} positives", q.len())));
    }
    if b < 2 {
        return Err(Error::invalid(format!("batch-hard loss needs at least 2 pairs, got {b}")));
    }
    let dim = p[0].len();
    if p.iter().chain(q).any(|v| v.len() != dim) {
        return Err(Error::shape("descriptors must share one dimension"));
    }
    let mut out = TripletLoss {
        value: 0.0,
        grad_p: vec![vec![0.0; dim]; b],
        grad_q: vec![vec![0.0; dim]; b],
    };
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let pos = distance(&p[i], &q[i]);
        let (hard, neg) = (0..b)
            .filter(|&j| j != i)
            .map(|j| (j, distance(&p[i], &q[j])))
            .fold((usize::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let hinge = margin + pos - neg;
        if hinge > 0.0 {
            out.value += hinge * scale;
            let (gp, gq) = (&mut out.grad_p, &mut out.grad_q);
            push_apart(&mut gp[i], &mut gq[i], &p[i], &q[i], scale);
            push_apart(&mut gp[i], &mut gq[hard], &p[i], &q[hard], -scale);
        }
    }
    Ok(out)
}

/// Mean over viewpoints of the distance of (theta, phi, rho) outside the
/// viewpoint box, summed over coordinates. Returns the value and the
/// gradient for each of theta, phi, rho.
pub fn viewpoint_range_loss(theta: &[f64], phi: &[f64], rho: &[f64]) -> (f64, [Vec<f64>; 3]) {
    let n = theta.len().max(1) as f64;
    let mut value = 0.0;
    let grads = [theta, phi, rho].map(|xs| vec![0.0; xs.len()]);
    let mut grads = grads;
    for (c, xs) in [theta, phi, rho].into_iter().enumerate() {
        let (lo, hi) = (VIEWPOINT_LOWER[c], VIEWPOINT_UPPER[c]);
        for (k, &x) in xs.iter().enumerate() {
            // |x - mid| - half, written so in-box values give exactly zero.
            if x < lo {
                value += (lo - x) / n;
                grads[c][k] = -1.0 / n;
            } else if x > hi {
                value += (x - hi) / n;
                grads[c][k] = 1.0 / n;
            }
        }
    }
    (value, grads)
}

pub fn total_loss(bh: f64, ov: f64, lambda: f64) -> f64 {
    bh + lambda * ov
}
