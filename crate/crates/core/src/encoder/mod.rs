//! Basic block encoder: six concatenated token embeddings, a gated
//! linear-recurrent backbone and attention pooling to a fixed-size BBE.

mod corpus;
mod io;
mod pretrain;
mod triplet;

pub use corpus::{random_function, transform, BcsdCorpus, Transform};
pub use io::{load_weights, save_weights, WeightsManifest};
pub use pretrain::{ntp_uniform_baseline, sequence, PretrainConfig, PretrainHeads, PretrainLosses, Pretrainer, Sequence};
pub use triplet::{finetune, triplet_loss_value, FinetuneConfig, Triplet};

use crate::asmnorm::{EncodedToken, SemanticTable, Vocabulary, DIMS, PAD};
use crate::autograd::{grad_check, GradCheckReport, ParamId, ParamSet, Tape, Var};
use crate::blockstore::BasicBlock;
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token {position}: id {id} out of range for dimension {dim} (size {size})")]
    IdOutOfRange { position: usize, dim: usize, id: u32, size: usize },
    #[error("every position is padding")]
    AllPadded,
    #[error("empty token sequence")]
    Empty,
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_sizes: [usize; DIMS],
    pub layers: usize,
    /// Channel-mix inner width.
    pub ffn_width: usize,
    pub bbe_size: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { embed_sizes: [32, 8, 8, 8, 8, 8], layers: 2, ffn_width: 96, bbe_size: 64, max_len: 128 }
    }
}

impl EncoderConfig {
    /// Token width `d`, also the hidden width.
    pub fn width(&self) -> usize {
        self.embed_sizes.iter().sum()
    }

    /// Small shapes for finite-difference checks.
    pub fn tiny() -> Self {
        EncoderConfig { embed_sizes: [2, 1, 1, 1, 1, 1], layers: 2, ffn_width: 5, bbe_size: 4, max_len: 8 }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_sizes.contains(&0) || self.layers == 0 || self.ffn_width == 0 || self.bbe_size == 0 || self.max_len == 0
        {
            return Err(EncoderError::Config("all sizes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    mu_r: ParamId,
    mu_k: ParamId,
    mu_v: ParamId,
    mu_g: ParamId,
    w_r: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_g: ParamId,
    b_g: ParamId,
    w_o: ParamId,
    cmu_k: ParamId,
    cmu_r: ParamId,
    c_k: ParamId,
    c_v: ParamId,
    c_r: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: [ParamId; DIMS],
    layers: Vec<LayerIds>,
    pool_w: ParamId,
    pool_b: ParamId,
    pool_u: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Tape handles from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `N × d` final hidden states.
    pub hidden: Var,
    /// `1 × N` pooling weights.
    pub alpha: Var,
    /// `1 × bbe_size`.
    pub bbe: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_sizes: [usize; DIMS],
    pub params: ParamSet,
    ids: Ids,
}

fn mix_init(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    Matrix::row_vector((0..d).map(|_| rng.gen_range(0.2..0.8)).collect())
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_sizes: [usize; DIMS], seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width();
        let f = config.ffn_width;
        let sd = 1.0 / (d as f64).sqrt();
        let mut p = ParamSet::new();
        let embed = std::array::from_fn(|i| p.add(format!("embed.{i}"), Matrix::randn(vocab_sizes[i], config.embed_sizes[i], 1.0, &mut rng)));
        let layers = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                LayerIds {
                    mu_r: p.add(n("mu_r"), mix_init(&mut rng, d)),
                    mu_k: p.add(n("mu_k"), mix_init(&mut rng, d)),
                    mu_v: p.add(n("mu_v"), mix_init(&mut rng, d)),
                    mu_g: p.add(n("mu_g"), mix_init(&mut rng, d)),
                    w_r: p.add(n("w_r"), Matrix::randn(d, d, sd, &mut rng)),
                    w_k: p.add(n("w_k"), Matrix::randn(d, d, sd, &mut rng)),
                    w_v: p.add(n("w_v"), Matrix::randn(d, d, sd, &mut rng)),
                    w_g: p.add(n("w_g"), Matrix::randn(d, d, sd, &mut rng)),
                    b_g: p.add(n("b_g"), Matrix::filled(1, d, 1.0)),
                    w_o: p.add(n("w_o"), Matrix::randn(d, d, sd * 0.5, &mut rng)),
                    cmu_k: p.add(n("cmu_k"), mix_init(&mut rng, d)),
                    cmu_r: p.add(n("cmu_r"), mix_init(&mut rng, d)),
                    c_k: p.add(n("c_k"), Matrix::randn(d, f, sd, &mut rng)),
                    c_v: p.add(n("c_v"), Matrix::randn(f, d, 0.5 / (f as f64).sqrt(), &mut rng)),
                    c_r: p.add(n("c_r"), Matrix::randn(d, d, sd, &mut rng)),
                }
            })
            .collect();
        let b = config.bbe_size;
        let ids = Ids {
            embed,
            layers,
            pool_w: p.add("pool.w", Matrix::randn(d, d, sd, &mut rng)),
            pool_b: p.add("pool.b", Matrix::zeros(1, d)),
            pool_u: p.add("pool.u", Matrix::randn(d, 1, sd, &mut rng)),
            proj_w: p.add("proj.w", Matrix::randn(d, b, sd, &mut rng)),
            proj_b: p.add("proj.b", Matrix::zeros(1, b)),
        };
        Ok(Encoder { config, vocab_sizes, params: p, ids })
    }

    pub fn for_vocab(config: EncoderConfig, vocab: &Vocabulary, seed: u64) -> Result<Self, EncoderError> {
        Self::new(config, vocab.sizes(), seed)
    }

    /// Number of leading tensors in any extended parameter set that belong
    /// to the encoder.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Scalars in the six embedding tables, `Σ |vocab_d| · size_d`.
    pub fn embedding_scalars(&self) -> usize {
        self.vocab_sizes.iter().zip(&self.config.embed_sizes).map(|(v, s)| v * s).sum()
    }

    fn check_ids(&self, tokens: &[EncodedToken]) -> Result<(), EncoderError> {
        for (position, t) in tokens.iter().enumerate() {
            for dim in 0..DIMS {
                if t[dim] as usize >= self.vocab_sizes[dim] {
                    return Err(EncoderError::IdOutOfRange { position, dim, id: t[dim], size: self.vocab_sizes[dim] });
                }
            }
        }
        Ok(())
    }

    /// Truncates to `max_len` tokens, warning when it does.
    pub fn clip<'a>(&self, tokens: &'a [EncodedToken]) -> &'a [EncodedToken] {
        if tokens.len() > self.config.max_len {
            log::warn!("block of {} tokens truncated to {}", tokens.len(), self.config.max_len);
            &tokens[..self.config.max_len]
        } else {
            tokens
        }
    }

    /// `N × d` concatenated embeddings.
    pub fn embed_tokens(&self, t: &mut Tape, params: &ParamSet, tokens: &[EncodedToken]) -> Result<Var, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::Empty);
        }
        self.check_ids(tokens)?;
        let parts: Vec<Var> = (0..DIMS)
            .map(|dim| {
                let table = t.param(params, self.ids.embed[dim]);
                t.gather(table, tokens.iter().map(|tok| tok[dim] as usize).collect())
            })
            .collect();
        Ok(t.concat_cols(&parts))
    }

    fn mix(t: &mut Tape, x: Var, prev: Var, mu: Var) -> Var {
        // prev + mu ⊙ (x - prev)
        let diff = t.sub(x, prev);
        let scaled = t.mul_row(diff, mu);
        t.add(prev, scaled)
    }

    /// Backbone over `x` (`N × d`). Strictly causal.
    pub fn backbone(&self, t: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let d = self.config.width();
        let k_scale = 1.0 / (d as f64).sqrt();
        let mut x = x;
        for l in &self.ids.layers {
            let p = |t: &mut Tape, id| t.param(params, id);
            // Time mixing.
            let xn = t.layer_norm(x);
            let xp = t.shift_down(xn);
            let (mu_r, mu_k, mu_v, mu_g) = (p(t, l.mu_r), p(t, l.mu_k), p(t, l.mu_v), p(t, l.mu_g));
            let (xr, xk, xv, xg) =
                (Self::mix(t, xn, xp, mu_r), Self::mix(t, xn, xp, mu_k), Self::mix(t, xn, xp, mu_v), Self::mix(t, xn, xp, mu_g));
            let (w_r, w_k, w_v, w_g, b_g, w_o) = (p(t, l.w_r), p(t, l.w_k), p(t, l.w_v), p(t, l.w_g), p(t, l.b_g), p(t, l.w_o));
            let r = t.matmul(xr, w_r);
            let r = t.sigmoid(r);
            let k = t.matmul(xk, w_k);
            let k = t.scale(k, k_scale);
            let v = t.matmul(xv, w_v);
            let g = t.matmul(xg, w_g);
            let g = t.add_row(g, b_g);
            let decay = t.sigmoid(g);
            let o = t.wkv(r, k, v, decay);
            let o = t.matmul(o, w_o);
            x = t.add(x, o);
            // Channel mixing.
            let xn = t.layer_norm(x);
            let xp = t.shift_down(xn);
            let (cmu_k, cmu_r) = (p(t, l.cmu_k), p(t, l.cmu_r));
            let xk = Self::mix(t, xn, xp, cmu_k);
            let xr = Self::mix(t, xn, xp, cmu_r);
            let (c_k, c_v, c_r) = (p(t, l.c_k), p(t, l.c_v), p(t, l.c_r));
            let hk = t.matmul(xk, c_k);
            let hk = t.silu(hk);
            let hv = t.matmul(hk, c_v);
            let gate = t.matmul(xr, c_r);
            let gate = t.sigmoid(gate);
            let cm = t.mul(gate, hv);
            x = t.add(x, cm);
        }
        t.layer_norm(x)
    }

    /// Attention pooling over unmasked rows of `h`, then projection.
    /// Returns `(alpha, bbe)`.
    pub fn pool(&self, t: &mut Tape, params: &ParamSet, h: Var, mask: Option<Vec<bool>>) -> Result<(Var, Var), EncoderError> {
        if let Some(m) = &mask {
            if !m.iter().any(|&b| b) {
                return Err(EncoderError::AllPadded);
            }
        }
        let (w, b, u) = (t.param(params, self.ids.pool_w), t.param(params, self.ids.pool_b), t.param(params, self.ids.pool_u));
        let a = t.matmul(h, w);
        let a = t.add_row(a, b);
        let a = t.tanh(a);
        let e = t.matmul(a, u);
        let e = t.transpose(e);
        let alpha = t.softmax_rows(e, mask);
        let pooled = t.matmul(alpha, h);
        let (pw, pb) = (t.param(params, self.ids.proj_w), t.param(params, self.ids.proj_b));
        let z = t.matmul(pooled, pw);
        Ok((alpha, t.add_row(z, pb)))
    }

    /// Full forward on the tape. Positions whose dimension-1 id is PAD are
    /// masked out of pooling.
    pub fn forward(&self, t: &mut Tape, params: &ParamSet, tokens: &[EncodedToken]) -> Result<Forward, EncoderError> {
        let tokens = self.clip(tokens);
        let x = self.embed_tokens(t, params, tokens)?;
        let hidden = self.backbone(t, params, x);
        let mask: Vec<bool> = tokens.iter().map(|tok| tok[0] != PAD).collect();
        let mask = if mask.iter().all(|&b| b) { None } else { Some(mask) };
        let (alpha, bbe) = self.pool(t, params, hidden, mask)?;
        Ok(Forward { hidden, alpha, bbe })
    }

    /// BBE of an encoded token sequence.
    pub fn encode(&self, tokens: &[EncodedToken]) -> Result<Vec<f64>, EncoderError> {
        let mut t = Tape::new();
        let f = self.forward(&mut t, &self.params, tokens)?;
        Ok(t.value(f.bbe).data.clone())
    }

    pub fn encode_block(&self, block: &BasicBlock, vocab: &Vocabulary, table: &SemanticTable) -> Result<Vec<f64>, EncoderError> {
        self.encode(&vocab.encode_instructions(&block.instructions, table))
    }

    /// Encodes many sequences; parallel across sequences when enabled.
    pub fn encode_many(&self, seqs: &[Vec<EncodedToken>]) -> Result<Vec<Vec<f64>>, EncoderError> {
        crate::par::try_map(seqs, |s| self.encode(s))
    }

    /// Hidden states only, `N × d`.
    pub fn hidden_states(&self, tokens: &[EncodedToken]) -> Result<Matrix, EncoderError> {
        let mut t = Tape::new();
        let f = self.forward(&mut t, &self.params, tokens)?;
        Ok(t.value(f.hidden).clone())
    }

    /// Per-tensor scalar counts, in parameter order.
    pub fn report_params(&self) -> Vec<(String, usize)> {
        self.params.names().iter().cloned().zip(self.params.values().iter().map(Matrix::len)).collect()
    }

    /// Checks every encoder tensor (and the pretraining heads) against
    /// central differences on a tiny configuration. The loss combines both
    /// pretraining objectives with a triplet term.
    pub fn grad_check(seed: u64) -> Result<GradCheckReport, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [9, 4, 5, 4, 5, 4];
        let config = EncoderConfig::tiny();
        let enc = Encoder::new(config, sizes, seed)?;
        let mut params = enc.params.clone();
        let heads = PretrainHeads::new(&enc, &mut params, 4, &mut rng);
        // Perturb away from initial symmetries so every tensor carries signal.
        for m in params.values_mut() {
            for v in &mut m.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let seq = |rng: &mut ChaCha8Rng, n: usize| -> Vec<EncodedToken> {
            (0..n)
                .map(|i| {
                    // Every other token starts an instruction.
                    let first = if i % 2 == 0 { rng.gen_range(2..sizes[0]) as u32 } else { rng.gen_range(3..sizes[0]) as u32 };
                    std::array::from_fn(|d| if d == 0 { first } else { rng.gen_range(1..sizes[d]) as u32 })
                })
                .collect()
        };
        let a = seq(&mut rng, 5);
        let p = seq(&mut rng, 4);
        let n = seq(&mut rng, 3);
        let starts = |s: &[EncodedToken]| (0..s.len()).map(|i| i % 2 == 0).collect::<Vec<_>>();
        let loss = |ps: &ParamSet, grads: bool| -> (f64, Vec<Matrix>) {
            let mut t = Tape::new();
            let fa = enc.forward(&mut t, ps, &a).unwrap();
            let fp = enc.forward(&mut t, ps, &p).unwrap();
            let fnn = enc.forward(&mut t, ps, &n).unwrap();
            let pl = heads.losses_on_tape(&mut t, ps, fa.hidden, &a, &starts(&a));
            let tl = triplet::triplet_on_tape(&mut t, fa.bbe, fp.bbe, fnn.bbe, 2.0);
            let total = t.add(pl, tl);
            let v = t.scalar(total);
            if grads {
                t.backward(total);
                (v, t.param_grads(ps))
            } else {
                (v, vec![])
            }
        };
        let (_, analytic) = loss(&params, true);
        Ok(grad_check(&params, 1e-5, &analytic, |ps| loss(ps, false).0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> Encoder {
        Encoder::new(EncoderConfig { embed_sizes: [6, 3, 3, 3, 3, 3], layers: 2, ffn_width: 8, bbe_size: 5, max_len: 16 }, [12, 6, 6, 8, 6, 5], 3)
            .unwrap()
    }

    fn toks(ids: &[[u32; DIMS]]) -> Vec<EncodedToken> {
        ids.to_vec()
    }

    #[test]
    fn embedding_rows_are_concatenated_slices() {
        let e = enc();
        let mut t = Tape::new();
        let x = e.embed_tokens(&mut t, &e.params, &toks(&[[3, 1, 1, 1, 1, 1], [3, 1, 1, 1, 1, 2]])).unwrap();
        let xv = t.value(x);
        assert_eq!(xv.shape(), (2, 21));
        let (r0, r1) = (xv.row(0), xv.row(1));
        assert_eq!(r0[..18], r1[..18]);
        assert_ne!(r0[18..], r1[18..]);
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let e = enc();
        let err = e.encode(&toks(&[[3, 1, 1, 1, 1, 9]])).unwrap_err();
        assert!(matches!(err, EncoderError::IdOutOfRange { dim: 5, id: 9, .. }));
    }

    #[test]
    fn backbone_is_causal() {
        let e = enc();
        let a = toks(&[[3, 1, 2, 1, 1, 1], [4, 2, 1, 3, 2, 1], [5, 1, 1, 1, 1, 3]]);
        let mut b = a.clone();
        b[2] = [7, 3, 3, 2, 4, 2];
        let (ha, hb) = (e.hidden_states(&a).unwrap(), e.hidden_states(&b).unwrap());
        assert_eq!(ha.row(0), hb.row(0));
        assert_eq!(ha.row(1), hb.row(1));
        assert_ne!(ha.row(2), hb.row(2));
    }

    #[test]
    fn single_token_pools_to_itself() {
        let e = enc();
        let mut t = Tape::new();
        let f = e.forward(&mut t, &e.params, &toks(&[[3, 1, 1, 1, 1, 1]])).unwrap();
        assert_eq!(t.value(f.alpha).data, vec![1.0]);
        assert!(t.value(f.bbe).is_finite());
    }

    #[test]
    fn padding_gets_zero_weight() {
        let e = enc();
        let mut t = Tape::new();
        let f = e.forward(&mut t, &e.params, &toks(&[[3, 1, 1, 1, 1, 1], [4, 2, 2, 2, 2, 2], [0, 0, 0, 0, 0, 0]])).unwrap();
        let a = &t.value(f.alpha).data;
        assert_eq!(a[2], 0.0);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-15);
        assert!(matches!(e.encode(&toks(&[[0, 0, 0, 0, 0, 0]])), Err(EncoderError::AllPadded)));
    }

    #[test]
    fn identical_rows_pool_evenly() {
        let e = enc();
        let mut t = Tape::new();
        let h = t.leaf(Matrix::from_rows(&[vec![0.3; 21], vec![0.3; 21]]));
        let (alpha, _) = e.pool(&mut t, &e.params, h, None).unwrap();
        assert_eq!(t.value(alpha).data, vec![0.5, 0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = Encoder::grad_check(11).unwrap();
        for tc in &report.tensors {
            assert!(tc.rel_err <= 1e-4, "{}: {}", tc.name, tc.rel_err);
        }
    }
}
