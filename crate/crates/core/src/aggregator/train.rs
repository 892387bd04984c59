//! Stage-2 objective and training loop.

use super::{Aggregator, AggregatorError, WeightedSet};
use crate::autograd::{accumulate, Tape, Var};
use crate::blockstore::TraditionalBbv;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_c: f64,
    pub huber_delta: f64,
    pub margin: f64,
    pub consistency_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_r: 1.0, w_c: 0.5, huber_delta: 1.0, margin: 0.5, consistency_margin: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub cpi_reg: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Indices into a batch (or dataset).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

pub(crate) struct LossNodes {
    pub triplet: Var,
    pub cpi_reg: Var,
    pub consistency: Var,
    pub total: Var,
}

impl LossNodes {
    fn values(&self, t: &Tape) -> LossBreakdown {
        LossBreakdown {
            triplet: t.scalar(self.triplet),
            cpi_reg: t.scalar(self.cpi_reg),
            consistency: t.scalar(self.consistency),
            total: t.scalar(self.total),
        }
    }
}

/// Builds the objective over stacked signatures `z` (`B × m`) and predicted
/// CPIs `c` (`B × 1`). Distances are taken between L2-normalized signatures.
pub(crate) fn loss_on_tape(t: &mut Tape, z: Var, c: Var, cpis: &[f64], triplets: &[MinedTriplet], lw: &LossWeights) -> LossNodes {
    let b = t.value(z).rows;
    let zn = t.l2_normalize_rows(z);
    let d = t.pairwise_dist(zn);
    let dv = t.value(d).clone();

    // Triplet hinge; inactive terms contribute zero value and gradient.
    let mut pos = Matrix::zeros(b, b);
    let mut neg = Matrix::zeros(b, b);
    let mut active = 0.0;
    for tr in triplets {
        if dv.get(tr.anchor, tr.positive) - dv.get(tr.anchor, tr.negative) + lw.margin > 0.0 {
            pos.data[tr.anchor * b + tr.positive] += 1.0;
            neg.data[tr.anchor * b + tr.negative] += 1.0;
            active += 1.0;
        }
    }
    let (ps, ns) = (t.leaf(pos), t.leaf(neg));
    let dp = t.mul(d, ps);
    let dn = t.mul(d, ns);
    let s = t.sub(dp, dn);
    let s = t.sum(s);
    let s = t.affine(s, 1.0, lw.margin * active);
    let triplet = t.scale(s, 1.0 / triplets.len().max(1) as f64);

    let target = t.leaf(Matrix::from_vec(b, 1, cpis.to_vec()));
    let r = t.sub(c, target);
    let h = t.huber(r, lw.huber_delta);
    let cpi_reg = t.mean(h);

    // Pairs i < j, weighted by |ΔCPI|.
    let mut w = Matrix::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            w.data[i * b + j] = (cpis[i] - cpis[j]).abs();
        }
    }
    let pairs = (b * b.saturating_sub(1) / 2).max(1) as f64;
    let wl = t.leaf(w);
    let hinge = t.affine(d, -1.0, lw.consistency_margin);
    let hinge = t.relu(hinge);
    let cw = t.mul(hinge, wl);
    let cs = t.sum(cw);
    let consistency = t.scale(cs, 1.0 / pairs);

    let wr = t.scale(cpi_reg, lw.w_r);
    let wc = t.scale(consistency, lw.w_c);
    let total = t.add(triplet, wr);
    let total = t.add(total, wc);
    LossNodes { triplet, cpi_reg, consistency, total }
}

/// Consistency term on plain vectors, for checking the tape version.
pub fn consistency_value(z: &[Vec<f64>], cpis: &[f64], margin: f64) -> f64 {
    let zn: Vec<Vec<f64>> = z.iter().map(|v| crate::tensor::l2_normalize(v)).collect();
    let n = z.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = crate::tensor::sq_dist(&zn[i], &zn[j]).sqrt();
            s += (margin - d).max(0.0) * (cpis[i] - cpis[j]).abs();
        }
    }
    s / (n * n.saturating_sub(1) / 2).max(1) as f64
}

/// One training example.
#[derive(Clone, Debug)]
pub struct IntervalSample {
    pub program_id: String,
    pub interval_index: usize,
    pub set: WeightedSet,
    pub cpi: f64,
    pub bbv: TraditionalBbv,
}

/// Candidate positives and negatives for each anchor, by BBV cosine.
/// Anchors with no positive or no negative are left out.
pub fn mine_triplets(samples: &[IntervalSample], pos_threshold: f64, neg_threshold: f64) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    let n = samples.len();
    let sims: Vec<Vec<f64>> = crate::par::map_indexed(n, |i| (0..n).map(|j| samples[i].bbv.cosine(&samples[j].bbv)).collect());
    (0..n)
        .filter_map(|a| {
            let pos: Vec<usize> = (0..n).filter(|&j| j != a && sims[a][j] >= pos_threshold).collect();
            let neg: Vec<usize> = (0..n).filter(|&j| sims[a][j] <= neg_threshold).collect();
            (!pos.is_empty() && !neg.is_empty()).then_some((a, pos, neg))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Triplets per batch; each adds up to three intervals.
    pub triplets_per_batch: usize,
    /// Extra random intervals per batch for the regression and consistency terms.
    pub extra_per_batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Set per stage from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            triplets_per_batch: 8,
            extra_per_batch: 8,
            lr: 2e-3,
            weights: LossWeights::default(),
            pos_threshold: 0.9,
            neg_threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<LossBreakdown>,
    pub anchors_with_triplets: usize,
}

/// Loss terms over a batch of samples without updating.
pub fn batch_losses(agg: &Aggregator, samples: &[&IntervalSample], triplets: &[MinedTriplet], lw: &LossWeights) -> Result<LossBreakdown, AggregatorError> {
    let outs = crate::par::try_map(samples, |s| agg.infer(&s.set))?;
    let mut t = Tape::new();
    let m = outs[0].0.len();
    let z = t.leaf(Matrix::from_vec(outs.len(), m, outs.iter().flat_map(|o| o.0.clone()).collect()));
    let c = t.leaf(Matrix::from_vec(outs.len(), 1, outs.iter().map(|o| o.1).collect()));
    let cpis: Vec<f64> = samples.iter().map(|s| s.cpi).collect();
    Ok(loss_on_tape(&mut t, z, c, &cpis, triplets, lw).values(&t))
}

fn step(agg: &mut Aggregator, adam: &mut Adam, batch: &[&IntervalSample], triplets: &[MinedTriplet], lw: &LossWeights) -> Result<LossBreakdown, AggregatorError> {
    // Pass 1: signatures and CPIs, then the loss over them as leaves.
    let outs = crate::par::try_map(batch, |s| agg.infer(&s.set))?;
    let m = outs[0].0.len();
    let mut t = Tape::new();
    let z = t.leaf(Matrix::from_vec(outs.len(), m, outs.iter().flat_map(|o| o.0.clone()).collect()));
    let c = t.leaf(Matrix::from_vec(outs.len(), 1, outs.iter().map(|o| o.1).collect()));
    let cpis: Vec<f64> = batch.iter().map(|s| s.cpi).collect();
    let nodes = loss_on_tape(&mut t, z, c, &cpis, triplets, lw);
    let losses = nodes.values(&t);
    t.backward(nodes.total);
    let dz = t.grad(z).cloned().unwrap_or_else(|| Matrix::zeros(outs.len(), m));
    let dc = t.grad(c).cloned().unwrap_or_else(|| Matrix::zeros(outs.len(), 1));
    // Pass 2: per-interval backward seeded with the output adjoints.
    let model = &*agg;
    let per = crate::par::try_map(&(0..batch.len()).collect::<Vec<_>>(), |&i| {
        let mut seed = dz.row(i).to_vec();
        seed.push(dc.get(i, 0));
        if seed.iter().all(|&g| g == 0.0) {
            return Ok(None);
        }
        let mut tt = Tape::new();
        let f = model.forward(&mut tt, &model.params, &batch[i].set)?;
        let root = tt.concat_cols(&[f.signature, f.cpi]);
        tt.backward_with(root, Matrix::row_vector(seed));
        Ok::<_, AggregatorError>(Some(tt.param_grads(&model.params)))
    })?;
    let mut grads = agg.params.zeros_like();
    for g in per.iter().flatten() {
        accumulate(&mut grads, g);
    }
    adam.step(&mut agg.params, &grads, &[]);
    Ok(losses)
}

/// Trains (or fine-tunes, when started from trained weights) on `samples`.
pub fn train(agg: &mut Aggregator, samples: &[IntervalSample], config: &TrainConfig) -> Result<TrainReport, AggregatorError> {
    if samples.is_empty() {
        return Err(AggregatorError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mined = mine_triplets(samples, config.pos_threshold, config.neg_threshold);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, &agg.params);
    let mut report = TrainReport { trace: Vec::with_capacity(config.steps), anchors_with_triplets: mined.len() };
    for _ in 0..config.steps {
        // Dataset index → batch position, in first-use order.
        let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order: Vec<usize> = Vec::new();
        let mut take = |i: usize, order: &mut Vec<usize>| {
            *slot.entry(i).or_insert_with(|| {
                order.push(i);
                order.len() - 1
            })
        };
        let mut triplets = Vec::new();
        if !mined.is_empty() {
            for _ in 0..config.triplets_per_batch {
                let (a, pos, neg) = &mined[rng.gen_range(0..mined.len())];
                let p = *pos.choose(&mut rng).expect("non-empty");
                let n = *neg.choose(&mut rng).expect("non-empty");
                triplets.push(MinedTriplet { anchor: take(*a, &mut order), positive: take(p, &mut order), negative: take(n, &mut order) });
            }
        }
        for _ in 0..config.extra_per_batch.max(usize::from(order.is_empty())) {
            take(rng.gen_range(0..samples.len()), &mut order);
        }
        let batch: Vec<&IntervalSample> = order.iter().map(|&i| &samples[i]).collect();
        let l = step(agg, &mut adam, &batch, &triplets, &config.weights)?;
        log::debug!("aggregator step {}: total {:.4} triplet {:.4} cpi {:.4} cons {:.4}", adam.steps(), l.total, l.triplet, l.cpi_reg, l.consistency);
        report.trace.push(l);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorConfig;
    use crate::autograd::huber;
    use crate::blockstore::BlockId;

    fn tape_losses(z: &[Vec<f64>], cpi_pred: &[f64], cpis: &[f64], triplets: &[MinedTriplet], lw: &LossWeights) -> LossBreakdown {
        let mut t = Tape::new();
        let zl = t.leaf(Matrix::from_rows(z));
        let c = t.leaf(Matrix::from_vec(cpi_pred.len(), 1, cpi_pred.to_vec()));
        loss_on_tape(&mut t, zl, c, cpis, triplets, lw).values(&t)
    }

    #[test]
    fn huber_examples_and_continuity() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
        // Value and slope agree on both sides of δ.
        for k in 1..=5 {
            let e = 10f64.powi(-k - 3);
            assert!((huber(1.0 + e, 1.0) - huber(1.0 - e, 1.0)).abs() < 3.0 * e);
            let slope = |r: f64| (huber(r + 1e-9, 1.0) - huber(r - 1e-9, 1.0)) / 2e-9;
            assert!((slope(1.0 + e) - slope(1.0 - e)).abs() < 1e-3);
        }
    }

    #[test]
    fn consistency_zero_cases() {
        let z = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let lw = LossWeights::default();
        let equal = tape_losses(&z, &[1.0; 3], &[2.0; 3], &[], &lw);
        assert_eq!(equal.consistency, 0.0);
        // Orthogonal and opposite unit vectors sit at distance ≥ √2 > margin.
        let far = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        let l = tape_losses(&far, &[1.0; 3], &[1.0, 5.0, 9.0], &[], &lw);
        assert_eq!(l.consistency, 0.0);
        let close = tape_losses(&z, &[1.0; 3], &[1.0, 5.0, 9.0], &[], &lw);
        assert!((close.consistency - consistency_value(&z, &[1.0, 5.0, 9.0], lw.consistency_margin)).abs() < 1e-5);
        assert!(close.consistency > 0.0);
    }

    #[test]
    fn terms_nonnegative_and_total_is_triplet_without_weights() {
        let z = vec![vec![1.0, 0.2], vec![0.8, -0.3], vec![-0.5, 1.0], vec![0.1, 0.1]];
        let tr = [MinedTriplet { anchor: 0, positive: 2, negative: 1 }, MinedTriplet { anchor: 3, positive: 0, negative: 2 }];
        let lw = LossWeights { w_r: 0.0, w_c: 0.0, ..Default::default() };
        let l = tape_losses(&z, &[1.0, 2.0, 3.0, 4.0], &[4.0, 1.0, 2.0, 3.0], &tr, &lw);
        assert!(l.triplet > 0.0 && l.cpi_reg > 0.0 && l.consistency >= 0.0);
        assert_eq!(l.total, l.triplet);
        let full = tape_losses(&z, &[1.0, 2.0, 3.0, 4.0], &[4.0, 1.0, 2.0, 3.0], &tr, &LossWeights::default());
        assert!((full.total - (full.triplet + full.cpi_reg + 0.5 * full.consistency)).abs() < 1e-12);
    }

    fn toy_samples() -> Vec<IntervalSample> {
        // Two behaviors: set A (CPI 1.5) and set B (CPI 6).
        (0..12)
            .map(|i| {
                let a = i % 2 == 0;
                let (blk, cpi) = if a { (1, 1.5) } else { (2, 6.0) };
                let x = if a { vec![0.5, -0.5, 0.5, 1.0] } else { vec![-0.3, 0.8, 0.1, 1.0] };
                IntervalSample {
                    program_id: "toy".into(),
                    interval_index: i,
                    set: WeightedSet { elements: Matrix::from_rows(&[x]), blocks: vec![BlockId(blk)] },
                    cpi,
                    bbv: TraditionalBbv { weights: vec![(BlockId(blk), 1.0)] },
                }
            })
            .collect()
    }

    #[test]
    fn mining_uses_bbv_similarity() {
        let s = toy_samples();
        let m = mine_triplets(&s, 0.9, 0.5);
        assert_eq!(m.len(), 12);
        for (a, pos, neg) in &m {
            assert!(pos.iter().all(|p| p % 2 == a % 2 && p != a));
            assert!(neg.iter().all(|n| n % 2 != a % 2));
        }
    }

    #[test]
    fn training_reduces_loss_and_zero_steps_is_identity() {
        let s = toy_samples();
        let mut agg = Aggregator::new(AggregatorConfig { bbe_size: 3, width: 8, heads: 2, cpi_hidden: 8, ..Default::default() }, 1).unwrap();
        let before = agg.params.clone();
        train(&mut agg, &s, &TrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(agg.params.values(), before.values());
        let all: Vec<&IntervalSample> = s.iter().collect();
        let l0 = batch_losses(&agg, &all, &[], &LossWeights::default()).unwrap();
        let r = train(&mut agg, &s, &TrainConfig { steps: 150, lr: 1e-2, ..Default::default() }).unwrap();
        assert_eq!(r.trace.len(), 150);
        let l1 = batch_losses(&agg, &all, &[], &LossWeights::default()).unwrap();
        assert!(l1.cpi_reg < 0.1 * l0.cpi_reg, "{l0:?} {l1:?}");
    }

    #[test]
    fn pure_triplet_leaves_head_untouched() {
        let s = toy_samples();
        let mut agg = Aggregator::new(AggregatorConfig { bbe_size: 3, width: 8, heads: 2, cpi_hidden: 8, ..Default::default() }, 1).unwrap();
        let head = agg.params.id_of("cpi.w2").unwrap();
        let before = agg.params.get(head).clone();
        let lw = LossWeights { w_r: 0.0, w_c: 0.0, ..Default::default() };
        train(&mut agg, &s, &TrainConfig { steps: 5, weights: lw, ..Default::default() }).unwrap();
        assert_eq!(agg.params.get(head), &before);
    }
}
