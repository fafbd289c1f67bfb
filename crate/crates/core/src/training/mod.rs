//! Correspondence sampling, losses, Adam and the joint training loop.

mod adam;
mod config;
mod losses;

use std::io::Write;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use config::TrainConfig;
pub use losses::{batch_hard_triplet_loss, total_loss, viewpoint_range_loss, TripletLoss};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Query, RigidTransform, SpatialIndex};
use crate::network::{Model, ModelVars};
use crate::par::map_collect;
use crate::tensor::{Tape, Var};

/// Minimum overlap for a pair to be used in training.
pub const MIN_OVERLAP: f64 = 0.3;

/// Two partial scans of one scene. `transform_gt` maps q into p's frame.
#[derive(Clone, Debug)]
pub struct FragmentPair {
    pub cloud_p: PointCloud,
    pub cloud_q: PointCloud,
    pub transform_gt: RigidTransform,
    pub overlap: f64,
}

impl FragmentPair {
    pub fn new(cloud_p: PointCloud, cloud_q: PointCloud, transform_gt: RigidTransform, overlap: f64) -> Result<Self> {
        if !transform_gt.is_proper(1e-6) {
            return Err(Error::invalid("ground-truth rotation is not proper orthonormal"));
        }
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::invalid(format!("overlap must lie in [0, 1], got {overlap}")));
        }
        Ok(Self {
            cloud_p,
            cloud_q,
            transform_gt,
            overlap,
        })
    }

    /// Every `(i, j)` with `|p_i - T(q_j)| < tol`, one per `p_i` (the closest
    /// `q_j`, lowest index on ties), sorted by `i`.
    pub fn correspondences(&self, index_p: &SpatialIndex, tol: f64) -> Vec<(usize, usize)> {
        let mut best: Vec<Option<(usize, f64)>> = vec![None; self.cloud_p.len()];
        for (j, q) in self.cloud_q.points().iter().enumerate() {
            let tq = self.transform_gt.apply(q);
            let Some(&i) = index_p.query(self.cloud_p.points(), &tq, Query::Knn(1)).first() else {
                continue;
            };
            let d = (self.cloud_p.point(i) - tq).norm();
            if d < tol && best[i].is_none_or(|(_, bd)| d < bd) {
                best[i] = Some((j, d));
            }
        }
        best.iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|(j, _)| (i, j)))
            .collect()
    }
}

/// Matching keypoint indices `(in p, in q)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchBatch {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sample_from(candidates: &[(usize, usize)], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<MatchBatch> {
    if candidates.len() < batch_size {
        return Err(Error::NotEnoughCorrespondences {
            requested: batch_size,
            available: candidates.len(),
        });
    }
    let pairs = candidates.choose_multiple(rng, batch_size).copied().collect();
    Ok(MatchBatch { pairs })
}

/// Uniformly samples `batch_size` distinct correspondences closer than `tol`.
pub fn sample_match_batch(pair: &FragmentPair, batch_size: usize, tol: f64, seed: u64) -> Result<MatchBatch> {
    let prep = PreparedPair::new(pair, tol)?;
    sample_from(&prep.candidates, batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub bh: f64,
    pub ov: f64,
    pub total: f64,
}

pub const HISTORY_HEADER: &str = "epoch,batch,bh_loss,ov_loss,total";

pub fn write_history<W: Write>(mut out: W, history: &[LossRecord]) -> Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.batch, r.bh, r.ov, r.total)?;
    }
    Ok(())
}

/// Per-epoch mean of `total`, in epoch order.
pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let epochs = history.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); epochs];
    for r in history {
        sums[r.epoch].0 += r.total;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
}

/// A pair with spatial indices and its correspondence list, built once.
pub struct PreparedPair<'d> {
    pub pair: &'d FragmentPair,
    pub index_p: SpatialIndex,
    pub index_q: SpatialIndex,
    pub candidates: Vec<(usize, usize)>,
}

impl<'d> PreparedPair<'d> {
    pub fn new(pair: &'d FragmentPair, match_tolerance: f64) -> Result<Self> {
        if pair.overlap < MIN_OVERLAP {
            return Err(Error::invalid(format!(
                "pair overlap {} is below the training minimum {MIN_OVERLAP}",
                pair.overlap
            )));
        }
        let index_p = SpatialIndex::build(pair.cloud_p.points());
        let index_q = SpatialIndex::build(pair.cloud_q.points());
        let candidates = pair.correspondences(&index_p, match_tolerance);
        Ok(Self {
            pair,
            index_p,
            index_q,
            candidates,
        })
    }
}

// Above this many bytes of retained tapes a batch recomputes the forward pass
// per keypoint during backward instead of keeping every tape alive.
const TAPE_BUDGET: usize = 1 << 31;

fn tape_bytes_estimate(model: &Model) -> usize {
    let s = model.config.render.image_size;
    // Roughly 24 activations per input pixel across the backbone, in f64.
    4 * model.config.n_views * s * s * 24 * 8
}

fn first_non_finite<'n>(names: impl IntoIterator<Item = &'n str>, values: &[Vec<f64>]) -> Option<String> {
    names
        .into_iter()
        .zip(values)
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n.to_string())
}

/// Descriptors and summed parameter gradients for one batch, given the
/// loss gradient function `loss_grads(descriptors) -> per-descriptor seeds`.
fn batch_gradients<F>(
    model: &Model,
    locals: &[Arc<PointCloud>],
    retain: bool,
    loss_grads: F,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let forward = |local: &Arc<PointCloud>| -> Result<(Tape<'_>, ModelVars, Var)> {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let d = model.describe_on_tape(&mut tape, &vars, local.clone())?;
        Ok((tape, vars, d))
    };
    let backward = |tape: &Tape<'_>, vars: &ModelVars, d, seed: &[f64]| -> Result<Vec<Vec<f64>>> {
        let grads = tape.backward_with_seed(d, seed)?;
        Ok(vars.all().iter().map(|&v| grads.wrt(tape, v)).collect())
    };

    let mut param_grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let descs;
    let per_keypoint: Vec<Option<Vec<Vec<f64>>>>;
    if retain {
        let tapes = map_collect(locals, |_, l| forward(l)).into_iter().collect::<Result<Vec<_>>>()?;
        descs = tapes.iter().map(|(t, _, d)| t.value(*d).to_vec()).collect::<Vec<_>>();
        let seeds = loss_grads(&descs)?;
        let work: Vec<_> = tapes.iter().zip(&seeds).collect();
        per_keypoint = map_collect(&work, |_, ((t, vars, d), seed)| {
            if seed.iter().all(|&g| g == 0.0) {
                return Ok(None);
            }
            backward(t, vars, *d, seed).map(Some)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    } else {
        descs = map_collect(locals, |_, l| forward(l).map(|(t, _, d)| t.value(d).to_vec()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let seeds = loss_grads(&descs)?;
        let work: Vec<_> = locals.iter().zip(&seeds).collect();
        per_keypoint = map_collect(&work, |_, (l, seed)| {
            if seed.iter().all(|&g| g == 0.0) {
                return Ok(None);
            }
            let (t, vars, d) = forward(l)?;
            backward(&t, &vars, d, seed).map(Some)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    }
    // Summed in keypoint order so results do not depend on scheduling.
    for g in per_keypoint.into_iter().flatten() {
        for (acc, gi) in param_grads.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += x;
            }
        }
    }
    Ok((descs, param_grads))
}

/// Model plus optimizer state; one `step` per batch.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    names: Vec<String>,
    retain: bool,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        let adam = Adam::new(model.params(), config.lr);
        let names = model.names().to_vec();
        let retain = 2 * config.batch_size * tape_bytes_estimate(&model) <= TAPE_BUDGET;
        Ok(Self {
            model,
            config: config.clone(),
            adam,
            names,
            retain,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    /// One optimizer step on `batch`; `epoch` and `batch_no` only label the record.
    pub fn step(&mut self, prep: &PreparedPair<'_>, batch: &MatchBatch, epoch: usize, batch_no: usize) -> Result<LossRecord> {
        let (model, cfg) = (&self.model, &self.config);
        let mut locals = Vec::with_capacity(2 * batch.len());
        for &(i, _) in &batch.pairs {
            locals.push(model.prepare(&prep.pair.cloud_p, &prep.index_p, i)?);
        }
        for &(_, j) in &batch.pairs {
            locals.push(model.prepare(&prep.pair.cloud_q, &prep.index_q, j)?);
        }
        let b = batch.len();
        let mut bh = 0.0;
        let (_, mut grads) = batch_gradients(model, &locals, self.retain, |descs| {
            if let Some(i) = descs.iter().position(|d| d.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("descriptor {i} of batch {batch_no}")));
            }
            let loss = batch_hard_triplet_loss(&descs[..b], &descs[b..], cfg.margin)?;
            bh = loss.value;
            Ok(loss.grad_p.into_iter().chain(loss.grad_q).collect())
        })?;
        let vp = model.viewpoints();
        let (ov, ov_grads) = viewpoint_range_loss(&vp.theta, &vp.phi, &vp.rho);
        for (g, og) in grads[18..21].iter_mut().zip(&ov_grads) {
            for (a, x) in g.iter_mut().zip(og) {
                *a += cfg.lambda * x;
            }
        }
        let total = total_loss(bh, ov, cfg.lambda);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {batch_no}")));
        }
        if let Some(name) = first_non_finite(self.names.iter().map(String::as_str), &grads) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        let values: Vec<Vec<f64>> = self.model.params().iter().map(|p| p.data().to_vec()).collect();
        if let Some(name) = first_non_finite(self.names.iter().map(String::as_str), &values) {
            return Err(Error::NonFinite(name));
        }
        Ok(LossRecord {
            epoch,
            batch: batch_no,
            bh,
            ov,
            total,
        })
    }
}

/// Jointly trains viewpoints, backbone, fusion and head on `dataset`.
/// `observer` sees every loss record as it is produced.
pub fn train<F>(dataset: &[FragmentPair], config: &TrainConfig, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&LossRecord),
{
    let mut trainer = Trainer::new(config)?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one fragment pair"));
    }
    let mut prepared = Vec::with_capacity(dataset.len());
    for (k, pair) in dataset.iter().enumerate() {
        let prep = PreparedPair::new(pair, config.match_tolerance).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::invalid(format!("pair {k}: {m}")),
            other => other,
        })?;
        if prep.candidates.len() < config.batch_size {
            return Err(Error::NotEnoughCorrespondences {
                requested: config.batch_size,
                available: prep.candidates.len(),
            });
        }
        prepared.push(prep);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1f);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        trainer.set_lr(config.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut batch_no = 0;
        for &k in &order {
            for _ in 0..config.batches_per_pair {
                let batch = sample_from(&prepared[k].candidates, config.batch_size, &mut rng)?;
                let record = trainer.step(&prepared[k], &batch, epoch, batch_no)?;
                observer(&record);
                history.push(record);
                batch_no += 1;
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}

#[cfg(test)]
mod tests;
