//! Triplet fine-tuning on groups of semantically identical sequences.

use super::{Encoder, EncoderError};
use crate::asmnorm::EncodedToken;
use crate::autograd::{accumulate, Tape, Var};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{l2_normalize, sq_dist, Matrix};
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Groups per batch; each contributes an anchor and a positive.
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    /// Set per stage from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 100, batch_size: 32, lr: 1e-3, margin: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Triplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `max(0, d(a,p) - d(a,n) + margin)` with Euclidean distance between
/// L2-normalized vectors.
pub fn triplet_loss_value(t: &Triplet, margin: f64) -> f64 {
    let (a, p, n) = (l2_normalize(&t.anchor), l2_normalize(&t.positive), l2_normalize(&t.negative));
    (sq_dist(&a, &p).sqrt() - sq_dist(&a, &n).sqrt() + margin).max(0.0)
}

/// Distance node between two `1 × m` rows after normalization.
fn dist(t: &mut Tape, a: Var, b: Var) -> Var {
    let diff = t.sub(a, b);
    let sq = t.square(diff);
    let s = t.sum(sq);
    t.sqrt_eps(s)
}

/// Hinge for a single triplet of `1 × m` embeddings.
pub(crate) fn triplet_on_tape(t: &mut Tape, a: Var, p: Var, n: Var, margin: f64) -> Var {
    let (a, p, n) = (t.l2_normalize_rows(a), t.l2_normalize_rows(p), t.l2_normalize_rows(n));
    let dp = dist(t, a, p);
    let dn = dist(t, a, n);
    let gap = t.sub(dp, dn);
    let gap = t.affine(gap, 1.0, margin);
    t.relu(gap)
}

/// Batch-all loss over `2B` rows laid out as `[a_0, p_0, a_1, p_1, …]`:
/// every other row not from the anchor's group is a negative.
fn batch_loss(t: &mut Tape, z: Var, margin: f64) -> Var {
    let rows = t.value(z).rows;
    let zn = t.l2_normalize_rows(z);
    let d = t.pairwise_dist(zn);
    let groups = rows / 2;
    let dv = t.value(d).clone();
    // Gather (i, positive, negative) index triples into flat selectors.
    let mut pos_sel = Matrix::zeros(rows, rows);
    let mut neg_sel = Matrix::zeros(rows, rows);
    let mut count = 0usize;
    for g in 0..groups {
        let (a, p) = (2 * g, 2 * g + 1);
        for n in 0..rows {
            if n / 2 == g {
                continue;
            }
            // Only the hinge-active terms carry gradient, but the mean is
            // over all triplets.
            if dv.get(a, p) - dv.get(a, n) + margin > 0.0 {
                pos_sel.data[a * rows + p] += 1.0;
                neg_sel.data[a * rows + n] += 1.0;
            }
            count += 1;
        }
    }
    let ps = t.leaf(pos_sel);
    let ns = t.leaf(neg_sel);
    let active = t.value(ps).sum();
    let dp = t.mul(d, ps);
    let dn = t.mul(d, ns);
    let s = t.sub(dp, dn);
    let s = t.sum(s);
    let s = t.affine(s, 1.0, margin * active);
    t.scale(s, 1.0 / count.max(1) as f64)
}

/// Trains `encoder` so that members of the same group embed closer than
/// members of other groups. Returns the per-step batch loss.
pub fn finetune(encoder: &mut Encoder, groups: &[Vec<Vec<EncodedToken>>], config: &FinetuneConfig) -> Result<Vec<f64>, EncoderError> {
    let usable: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() >= 2).collect();
    if usable.len() < 2 {
        return Err(EncoderError::Config("fine-tuning needs at least two groups with two members".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, &encoder.params);
    let mut trace = Vec::with_capacity(config.steps);
    let b = config.batch_size.min(usable.len()).max(2);
    for _ in 0..config.steps {
        let picked: Vec<usize> = sample(&mut rng, usable.len(), b).into_iter().map(|i| usable[i]).collect();
        let mut seqs: Vec<&[EncodedToken]> = Vec::with_capacity(2 * b);
        for &g in &picked {
            let mut members: Vec<usize> = (0..groups[g].len()).collect();
            members.shuffle(&mut rng);
            seqs.push(&groups[g][members[0]]);
            seqs.push(&groups[g][members[1]]);
        }
        // Pass 1: embeddings only.
        let embs = crate::par::try_map(&seqs, |s| encoder.encode(s))?;
        let width = embs[0].len();
        let mut t = Tape::new();
        let z = t.leaf(Matrix::from_vec(embs.len(), width, embs.concat()));
        let loss = batch_loss(&mut t, z, config.margin);
        t.backward(loss);
        let dz = t.grad(z).cloned().unwrap_or_else(|| Matrix::zeros(embs.len(), width));
        trace.push(t.scalar(loss));
        // Pass 2: re-run each sequence seeded with its embedding adjoint.
        let params = &encoder.params;
        let per = crate::par::try_map(&(0..seqs.len()).collect::<Vec<_>>(), |&i| {
            let seed = Matrix::row_vector(dz.row(i).to_vec());
            if seed.max_abs() == 0.0 {
                return Ok(None);
            }
            let mut tt = Tape::new();
            let f = encoder.forward(&mut tt, params, seqs[i])?;
            tt.backward_with(f.bbe, seed);
            Ok::<_, EncoderError>(Some(tt.param_grads(params)))
        })?;
        let mut grads = encoder.params.zeros_like();
        for g in per.iter().flatten() {
            accumulate(&mut grads, g);
        }
        adam.step(&mut encoder.params, &grads, &[]);
        log::debug!("finetune step {}: loss {:.4}", adam.steps(), trace.last().unwrap());
    }
    Ok(trace)
}
