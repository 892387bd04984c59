//! Interval signatures: a set transformer over frequency-weighted block
//! embeddings, with a CPI regression head.

mod io;
mod train;

pub use io::{load_model, load_signatures, save_model, save_signatures, ModelMeta, SignatureIndexEntry, SignatureSet};
pub use train::{
    batch_losses, consistency_value, mine_triplets, train, IntervalSample, LossBreakdown, LossWeights, MinedTriplet, TrainConfig,
    TrainReport,
};

use crate::autograd::{grad_check, GradCheckReport, ParamId, ParamSet, Tape, Var};
use crate::blockstore::{BlockId, IntervalProfile};
use crate::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("no embedding for block {0}")]
    MissingBbe(BlockId),
    #[error("empty set")]
    EmptySet,
    #[error("set of {size} elements exceeds the cap of {cap}")]
    SetTooLarge { size: usize, cap: usize },
    #[error("element width {found} does not match the model's {expected}")]
    Width { expected: usize, found: usize },
    #[error("invalid aggregator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub bbe_size: usize,
    pub width: usize,
    pub heads: usize,
    pub sab_blocks: usize,
    /// PMA seed vectors; the signature is `seeds × width` flattened.
    pub seeds: usize,
    pub cpi_hidden: usize,
    pub max_set: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { bbe_size: 64, width: 64, heads: 4, sab_blocks: 2, seeds: 1, cpi_hidden: 32, max_set: 4096 }
    }
}

impl AggregatorConfig {
    pub fn tiny() -> Self {
        AggregatorConfig { bbe_size: 3, width: 4, heads: 2, sab_blocks: 2, seeds: 1, cpi_hidden: 3, max_set: 16 }
    }

    pub fn signature_size(&self) -> usize {
        self.seeds * self.width
    }

    fn validate(&self) -> Result<(), AggregatorError> {
        if [self.bbe_size, self.width, self.heads, self.seeds, self.cpi_hidden, self.max_set].contains(&0) {
            return Err(AggregatorError::Config("sizes must be at least 1".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(AggregatorError::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Set elements, one row each: `w·BBE` followed by `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSet {
    pub elements: Matrix,
    pub blocks: Vec<BlockId>,
}

impl WeightedSet {
    pub fn len(&self) -> usize {
        self.elements.rows
    }

    pub fn is_empty(&self) -> bool {
        self.elements.rows == 0
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|r| self.elements.get(r, self.elements.cols - 1)).collect()
    }

    /// Rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> WeightedSet {
        let cols = self.elements.cols;
        let data = perm.iter().flat_map(|&r| self.elements.row(r).to_vec()).collect();
        WeightedSet { elements: Matrix::from_vec(perm.len(), cols, data), blocks: perm.iter().map(|&r| self.blocks[r]).collect() }
    }
}

/// Builds the weighted set of an interval: `w_b = instrs_b / instr_total`.
pub fn weight_bbes(iv: &IntervalProfile, bbes: &HashMap<BlockId, Vec<f64>>) -> Result<WeightedSet, AggregatorError> {
    if iv.counts.is_empty() {
        return Err(AggregatorError::EmptySet);
    }
    let width = bbes.values().next().map(Vec::len).ok_or(AggregatorError::MissingBbe(iv.counts[0].block))?;
    let total = iv.instr_total as f64;
    let mut data = Vec::with_capacity(iv.counts.len() * (width + 1));
    for c in &iv.counts {
        let v = bbes.get(&c.block).ok_or(AggregatorError::MissingBbe(c.block))?;
        let w = c.instrs as f64 / total;
        data.extend(v.iter().map(|x| w * x));
        data.push(w);
    }
    Ok(WeightedSet { elements: Matrix::from_vec(iv.counts.len(), width + 1, data), blocks: iv.counts.iter().map(|c| c.block).collect() })
}

#[derive(Clone, Debug)]
struct MabIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    f1: ParamId,
    fb1: ParamId,
    f2: ParamId,
    fb2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    in_w: ParamId,
    in_b: ParamId,
    sabs: Vec<MabIds>,
    seeds: ParamId,
    pma: MabIds,
    c1: ParamId,
    cb1: ParamId,
    c2: ParamId,
    cb2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub params: ParamSet,
    ids: Ids,
}

/// Tape handles from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AggForward {
    /// `1 × signature_size`.
    pub signature: Var,
    /// `1 × 1`, positive.
    pub cpi: Var,
}

fn mab_ids(p: &mut ParamSet, name: &str, d: usize, rng: &mut ChaCha8Rng) -> MabIds {
    let sd = 1.0 / (d as f64).sqrt();
    let n = |s: &str| format!("{name}.{s}");
    MabIds {
        wq: p.add(n("wq"), Matrix::randn(d, d, sd, rng)),
        wk: p.add(n("wk"), Matrix::randn(d, d, sd, rng)),
        wv: p.add(n("wv"), Matrix::randn(d, d, sd, rng)),
        wo: p.add(n("wo"), Matrix::randn(d, d, sd, rng)),
        f1: p.add(n("f1"), Matrix::randn(d, d, sd, rng)),
        fb1: p.add(n("fb1"), Matrix::zeros(1, d)),
        f2: p.add(n("f2"), Matrix::randn(d, d, sd, rng)),
        fb2: p.add(n("fb2"), Matrix::zeros(1, d)),
    }
}

impl Aggregator {
    pub fn new(config: AggregatorConfig, seed: u64) -> Result<Self, AggregatorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let inp = config.bbe_size + 1;
        let mut p = ParamSet::new();
        let in_w = p.add("in.w", Matrix::randn(inp, d, 1.0 / (inp as f64).sqrt(), &mut rng));
        let in_b = p.add("in.b", Matrix::zeros(1, d));
        let sabs = (0..config.sab_blocks).map(|i| mab_ids(&mut p, &format!("sab{i}"), d, &mut rng)).collect();
        let seeds = p.add("pma.seeds", Matrix::randn(config.seeds, d, 1.0, &mut rng));
        let pma = mab_ids(&mut p, "pma", d, &mut rng);
        let sig = config.signature_size();
        let h = config.cpi_hidden;
        let ids = Ids {
            in_w,
            in_b,
            sabs,
            seeds,
            pma,
            c1: p.add("cpi.w1", Matrix::randn(sig, h, 1.0 / (sig as f64).sqrt(), &mut rng)),
            cb1: p.add("cpi.b1", Matrix::zeros(1, h)),
            c2: p.add("cpi.w2", Matrix::randn(h, 1, 1.0 / (h as f64).sqrt(), &mut rng)),
            cb2: p.add("cpi.b2", Matrix::filled(1, 1, 1.0)),
        };
        Ok(Aggregator { config, params: p, ids })
    }

    /// Multihead attention block: `H = LN(Q + MHA(Q, K))`, `LN(H + FF(H))`.
    fn mab(&self, t: &mut Tape, params: &ParamSet, ids: &MabIds, q: Var, k: Var) -> Var {
        let d = self.config.width;
        let dh = d / self.config.heads;
        let p = |t: &mut Tape, id| t.param(params, id);
        let (wq, wk, wv, wo) = (p(t, ids.wq), p(t, ids.wk), p(t, ids.wv), p(t, ids.wo));
        let qh = t.matmul(q, wq);
        let kh = t.matmul(k, wk);
        let vh = t.matmul(k, wv);
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let qs = t.slice_cols(qh, h * dh, dh);
                let ks = t.slice_cols(kh, h * dh, dh);
                let vs = t.slice_cols(vh, h * dh, dh);
                let s = t.matmul_bt(qs, ks);
                let s = t.scale(s, 1.0 / (dh as f64).sqrt());
                let a = t.softmax_rows(s, None);
                t.matmul(a, vs)
            })
            .collect();
        let o = t.concat_cols(&heads);
        let o = t.matmul(o, wo);
        let h = t.add(q, o);
        let h = t.layer_norm(h);
        let (f1, fb1, f2, fb2) = (p(t, ids.f1), p(t, ids.fb1), p(t, ids.f2), p(t, ids.fb2));
        let f = t.matmul(h, f1);
        let f = t.add_row(f, fb1);
        let f = t.silu(f);
        let f = t.matmul(f, f2);
        let f = t.add_row(f, fb2);
        let out = t.add(h, f);
        t.layer_norm(out)
    }

    fn check(&self, set: &WeightedSet) -> Result<(), AggregatorError> {
        if set.is_empty() {
            return Err(AggregatorError::EmptySet);
        }
        if set.len() > self.config.max_set {
            return Err(AggregatorError::SetTooLarge { size: set.len(), cap: self.config.max_set });
        }
        if set.elements.cols != self.config.bbe_size + 1 {
            return Err(AggregatorError::Width { expected: self.config.bbe_size + 1, found: set.elements.cols });
        }
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, params: &ParamSet, set: &WeightedSet) -> Result<AggForward, AggregatorError> {
        self.check(set)?;
        let x = t.leaf(set.elements.clone());
        let (iw, ib) = (t.param(params, self.ids.in_w), t.param(params, self.ids.in_b));
        let x = t.matmul(x, iw);
        let mut x = t.add_row(x, ib);
        for ids in &self.ids.sabs {
            x = self.mab(t, params, ids, x, x);
        }
        let s = t.param(params, self.ids.seeds);
        let pooled = self.mab(t, params, &self.ids.pma, s, x);
        // Flatten seeds × width into one row.
        let signature = if self.config.seeds == 1 {
            pooled
        } else {
            let rows: Vec<Var> = (0..self.config.seeds).map(|r| t.gather(pooled, vec![r])).collect();
            t.concat_cols(&rows)
        };
        let cpi = self.cpi_head(t, params, signature);
        Ok(AggForward { signature, cpi })
    }

    /// Two-layer head ending in softplus.
    pub fn cpi_head(&self, t: &mut Tape, params: &ParamSet, z: Var) -> Var {
        let p = |t: &mut Tape, id| t.param(params, id);
        let (c1, cb1, c2, cb2) = (p(t, self.ids.c1), p(t, self.ids.cb1), p(t, self.ids.c2), p(t, self.ids.cb2));
        let h = t.matmul(z, c1);
        let h = t.add_row(h, cb1);
        let h = t.silu(h);
        let o = t.matmul(h, c2);
        let o = t.add_row(o, cb2);
        t.softplus(o)
    }

    /// `(signature, predicted CPI)`.
    pub fn infer(&self, set: &WeightedSet) -> Result<(Vec<f64>, f64), AggregatorError> {
        let mut t = Tape::new();
        let f = self.forward(&mut t, &self.params, set)?;
        Ok((t.value(f.signature).data.clone(), t.scalar(f.cpi)))
    }

    pub fn signature(&self, set: &WeightedSet) -> Result<Vec<f64>, AggregatorError> {
        Ok(self.infer(set)?.0)
    }

    /// Signatures for many sets; parallel across sets when enabled.
    pub fn infer_many(&self, sets: &[WeightedSet]) -> Result<Vec<(Vec<f64>, f64)>, AggregatorError> {
        crate::par::try_map(sets, |s| self.infer(s))
    }

    pub fn report_params(&self) -> Vec<(String, usize)> {
        self.params.names().iter().cloned().zip(self.params.values().iter().map(Matrix::len)).collect()
    }

    /// Finite-difference check of the full objective on a tiny model.
    pub fn grad_check(seed: u64) -> Result<GradCheckReport, AggregatorError> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = AggregatorConfig::tiny();
        let agg = Aggregator::new(config.clone(), seed)?;
        let mut params = agg.params.clone();
        for m in params.values_mut() {
            for v in &mut m.data {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let set = |rng: &mut ChaCha8Rng, n: usize| {
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let data = w
                .iter()
                .flat_map(|&wi| (0..config.bbe_size).map(|_| wi * rng.gen_range(-1.0..1.0)).chain(std::iter::once(wi)).collect::<Vec<_>>())
                .collect();
            WeightedSet { elements: Matrix::from_vec(n, config.bbe_size + 1, data), blocks: vec![BlockId(0); n] }
        };
        let sets: Vec<WeightedSet> = [3, 2, 4, 3].iter().map(|&n| set(&mut rng, n)).collect();
        let cpis = [1.5, 2.5, 1.2, 4.0];
        let lw = LossWeights { margin: 3.0, consistency_margin: 3.0, ..LossWeights::default() };
        let triplets = [MinedTriplet { anchor: 0, positive: 1, negative: 2 }, MinedTriplet { anchor: 3, positive: 0, negative: 1 }];
        let loss = |ps: &ParamSet, grads: bool| -> (f64, Vec<Matrix>) {
            let mut t = Tape::new();
            let outs: Vec<AggForward> = sets.iter().map(|s| agg.forward(&mut t, ps, s).unwrap()).collect();
            let z: Vec<Var> = outs.iter().map(|o| o.signature).collect();
            let c: Vec<Var> = outs.iter().map(|o| o.cpi).collect();
            let z = t.concat_rows(&z);
            let c = t.concat_rows(&c);
            let parts = train::loss_on_tape(&mut t, z, c, &cpis, &triplets, &lw);
            let v = t.scalar(parts.total);
            if grads {
                t.backward(parts.total);
                (v, t.param_grads(ps))
            } else {
                (v, vec![])
            }
        };
        let (_, analytic) = loss(&params, true);
        Ok(grad_check(&params, 1e-5, &analytic, |ps| loss(ps, false).0))
    }
}
