//! Next-token and next-instruction pretraining.

use super::{Encoder, EncoderError};
use crate::asmnorm::{tokenize_with, EncodedToken, Instruction, SemanticTable, Vocabulary, DIMS, PAD};
use crate::autograd::{accumulate, ParamId, ParamSet, Tape, Var};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub head_width: usize,
    /// Next-instruction lookahead, in tokens.
    pub lookahead: usize,
    /// Set per stage from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 200, batch_size: 32, lr: 1e-3, head_width: 32, lookahead: 4, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub ntp: f64,
    pub nip: f64,
}

impl PretrainLosses {
    pub fn total(&self) -> f64 {
        self.ntp + self.nip
    }
}

/// Cross entropy of a uniform predictor summed over the six dimensions.
pub fn ntp_uniform_baseline(vocab_sizes: &[usize; DIMS]) -> f64 {
    vocab_sizes.iter().map(|&v| (v as f64).ln()).sum()
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new(params: &mut ParamSet, name: &str, d: usize, h: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: params.add(format!("{name}.w1"), Matrix::randn(d, h, 1.0 / (d as f64).sqrt(), rng)),
            b1: params.add(format!("{name}.b1"), Matrix::zeros(1, h)),
            // Near-zero logits start the loss at the uniform baseline.
            w2: params.add(format!("{name}.w2"), Matrix::randn(h, out, 1e-3, rng)),
            b2: params.add(format!("{name}.b2"), Matrix::zeros(1, out)),
        }
    }

    fn apply(&self, t: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let (w1, b1, w2, b2) = (t.param(params, self.w1), t.param(params, self.b1), t.param(params, self.w2), t.param(params, self.b2));
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.silu(h);
        let o = t.matmul(h, w2);
        t.add_row(o, b2)
    }
}

/// Pretraining heads, appended after the encoder's tensors in an extended
/// parameter set and discarded once pretraining ends.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    ntp: Vec<Mlp>,
    nip: Vec<Mlp>,
}

impl PretrainHeads {
    pub fn new(enc: &Encoder, params: &mut ParamSet, lookahead: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_width(enc, params, lookahead, 32.min(enc.config.width()).max(2), rng)
    }

    pub fn with_width(enc: &Encoder, params: &mut ParamSet, lookahead: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = enc.config.width();
        let ntp = (0..DIMS).map(|i| Mlp::new(params, &format!("ntp{i}"), d, width, enc.vocab_sizes[i], rng)).collect();
        let nip = (0..lookahead).map(|k| Mlp::new(params, &format!("nip{k}"), d, width, enc.vocab_sizes[0], rng)).collect();
        PretrainHeads { ntp, nip }
    }

    /// `(ntp, nip)` loss nodes for one sequence. `starts[t]` marks tokens
    /// that begin an instruction.
    pub fn loss_parts(&self, t: &mut Tape, params: &ParamSet, hidden: Var, tokens: &[EncodedToken], starts: &[bool]) -> (Var, Var) {
        let n = t.value(hidden).rows;
        let tokens = &tokens[..n];
        let zero = t.leaf(Matrix::zeros(1, 1));
        let ntp = if n < 2 {
            zero
        } else {
            let h = t.gather(hidden, (0..n - 1).collect());
            let mut acc = zero;
            for (dim, head) in self.ntp.iter().enumerate() {
                let logits = head.apply(t, params, h);
                let targets = tokens[1..].iter().map(|tok| (tok[0] != PAD).then_some(tok[dim] as usize)).collect();
                let ce = t.cross_entropy_sum(logits, targets);
                acc = t.add(acc, ce);
            }
            t.scale(acc, 1.0 / (n - 1) as f64)
        };
        let positions: Vec<usize> = (0..n.saturating_sub(1)).filter(|&i| starts[i + 1] && tokens[i + 1][0] != PAD).collect();
        let nip = if positions.is_empty() {
            zero
        } else {
            let h = t.gather(hidden, positions.clone());
            let mut acc = zero;
            for (k, head) in self.nip.iter().enumerate() {
                let targets: Vec<Option<usize>> = positions
                    .iter()
                    .map(|&i| {
                        let j = i + 1 + k;
                        let inside = j < n && (k == 0 || !starts[j]);
                        (inside && tokens[j][0] != PAD).then(|| tokens[j][0] as usize)
                    })
                    .collect();
                if targets.iter().all(Option::is_none) {
                    continue;
                }
                let logits = head.apply(t, params, h);
                let ce = t.cross_entropy_sum(logits, targets);
                acc = t.add(acc, ce);
            }
            t.scale(acc, 1.0 / positions.len() as f64)
        };
        (ntp, nip)
    }

    pub fn losses_on_tape(&self, t: &mut Tape, params: &ParamSet, hidden: Var, tokens: &[EncodedToken], starts: &[bool]) -> Var {
        let (a, b) = self.loss_parts(t, params, hidden, tokens, starts);
        t.add(a, b)
    }
}

/// A pretraining example: tokens plus instruction-start flags.
pub type Sequence = (Vec<EncodedToken>, Vec<bool>);

/// Encodes normalized instructions, marking the first token of each.
pub fn sequence(vocab: &Vocabulary, table: &SemanticTable, normalized: &[Instruction]) -> Sequence {
    let mut toks = Vec::new();
    let mut starts = Vec::new();
    for ins in normalized {
        for (i, t) in tokenize_with(ins, table).iter().enumerate() {
            toks.push(vocab.encode(t));
            starts.push(i == 0);
        }
    }
    (toks, starts)
}

pub struct Pretrainer {
    pub encoder: Encoder,
    params: ParamSet,
    heads: PretrainHeads,
    adam: Adam,
    pub config: PretrainConfig,
    rng: ChaCha8Rng,
}

impl Pretrainer {
    pub fn new(encoder: Encoder, config: PretrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = encoder.params.clone();
        let heads = PretrainHeads::with_width(&encoder, &mut params, config.lookahead, config.head_width, &mut rng);
        let adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, &params);
        Pretrainer { encoder, params, heads, adam, config, rng }
    }

    /// Mean losses over `batch` without updating.
    pub fn evaluate(&self, batch: &[Sequence]) -> Result<PretrainLosses, EncoderError> {
        let per = crate::par::try_map(batch, |(toks, starts)| {
            let mut t = Tape::new();
            let f = self.encoder.forward(&mut t, &self.params, toks)?;
            let (a, b) = self.heads.loss_parts(&mut t, &self.params, f.hidden, toks, starts);
            Ok::<_, EncoderError>((t.scalar(a), t.scalar(b)))
        })?;
        let n = per.len().max(1) as f64;
        Ok(PretrainLosses { ntp: per.iter().map(|p| p.0).sum::<f64>() / n, nip: per.iter().map(|p| p.1).sum::<f64>() / n })
    }

    /// One Adam step on the batch mean of `ntp + nip`.
    pub fn step(&mut self, batch: &[Sequence]) -> Result<PretrainLosses, EncoderError> {
        let w = 1.0 / batch.len() as f64;
        let (enc, params, heads) = (&self.encoder, &self.params, &self.heads);
        let per = crate::par::try_map(batch, |(toks, starts)| {
            let mut t = Tape::new();
            let f = enc.forward(&mut t, params, toks)?;
            let (a, b) = heads.loss_parts(&mut t, params, f.hidden, toks, starts);
            let total = t.add(a, b);
            t.backward_with(total, Matrix::filled(1, 1, w));
            Ok::<_, EncoderError>((t.scalar(a), t.scalar(b), t.param_grads(params)))
        })?;
        let mut grads = self.params.zeros_like();
        let mut losses = PretrainLosses::default();
        for (a, b, g) in &per {
            accumulate(&mut grads, g);
            losses.ntp += a * w;
            losses.nip += b * w;
        }
        self.adam.step(&mut self.params, &grads, &[]);
        Ok(losses)
    }

    /// Runs `config.steps` steps over random batches from `corpus`,
    /// returning the loss trace.
    pub fn train(&mut self, corpus: &[Sequence]) -> Result<Vec<PretrainLosses>, EncoderError> {
        let mut trace = Vec::with_capacity(self.config.steps);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = order.len();
        for _ in 0..self.config.steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size.min(corpus.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                batch.push(corpus[order[cursor]].clone());
                cursor += 1;
            }
            let l = self.step(&batch)?;
            log::debug!("pretrain step {}: ntp {:.4} nip {:.4}", self.adam.steps(), l.ntp, l.nip);
            trace.push(l);
        }
        Ok(trace)
    }

    /// Drops the heads and returns the trained encoder.
    pub fn finish(mut self) -> Encoder {
        let n = self.encoder.param_count();
        for (dst, src) in self.encoder.params.values_mut().iter_mut().zip(&self.params.values()[..n]) {
            *dst = src.clone();
        }
        self.encoder
    }
}
