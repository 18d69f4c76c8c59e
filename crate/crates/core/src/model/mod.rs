//! Tiny decoder-only transformer over prompt and semantic-ID tokens.
//!
//! Pre-norm blocks with learned absolute position embeddings indexed by
//! `position_ids`. Training runs go through [`Model::forward_packed`], which
//! records on a [`Tape`]; decoding uses the tape-free cached path in
//! [`decode`].

mod checkpoint;
pub mod decode;
mod packing;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub use decode::{beam_search, Hypothesis};
pub use packing::PackedBatch;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("no candidate segment {0}")]
    NoSuchSegment(usize),
    #[error("candidate segment {0} has no EOS token")]
    MissingEos(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            depth: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 4 {
            return bad("vocab must hold PAD, EOS, SEP and at least one code token");
        }
        if self.depth == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    /// `(name, shape)` for every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.depth {
            for (n, s) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.wo", vec![d, d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w1", vec![d, f]),
                ("mlp.b1", vec![f]),
                ("mlp.w2", vec![f, d]),
                ("mlp.b2", vec![d]),
            ] {
                out.push((format!("layer{l}.{n}"), s));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out.push(("head.w".to_string(), vec![d, v]));
        out.push(("head.b".to_string(), vec![v]));
        out
    }
}

pub(crate) const PER_LAYER: usize = 12;

pub(crate) mod idx {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W1: usize = 8;
    pub const B1: usize = 9;
    pub const W2: usize = 10;
    pub const B2: usize = 11;
}

/// Model configuration plus one set of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// Outputs of one packed forward pass.
pub struct Forward<'t> {
    /// Parameter handles, in [`ModelConfig::param_layout`] order.
    pub params: Vec<Var<'t>>,
    /// Final-layer (post-norm) hidden state for every position, `[n, d_model]`.
    pub hidden: Var<'t>,
    /// Log-distributions over the vocabulary for predictor rows only, `[m, vocab]`.
    pub log_probs: Var<'t>,
    row_of: Vec<Option<usize>>,
}

impl<'t> Forward<'t> {
    /// Row of `log_probs` holding the distribution emitted at flat position `pos`.
    pub fn log_prob_row(&self, pos: usize) -> Option<usize> {
        self.row_of.get(pos).copied().flatten()
    }

    /// Per-token log-likelihoods of candidate `seg`, EOS included, `[len]`.
    pub fn token_logprobs(&self, batch: &PackedBatch, seg: usize) -> Result<Var<'t>, ModelError> {
        let range = batch.segment(seg)?;
        let entries: Vec<(usize, usize)> = range
            .map(|p| {
                let pred = batch.predictor_of(p).expect("candidate tokens are targets");
                (self.row_of[pred].expect("predictor rows are computed"), batch.tokens[p] as usize)
            })
            .collect();
        Ok(self.log_probs.pick2(&entries)?)
    }

    /// `log π(y_seg | x)`: sum of the candidate's token log-likelihoods.
    pub fn candidate_logprob(&self, batch: &PackedBatch, seg: usize) -> Result<Var<'t>, ModelError> {
        Ok(self.token_logprobs(batch, seg)?.sum())
    }

    /// Detached hidden state at candidate `seg`'s EOS position.
    pub fn eos_hidden(&self, batch: &PackedBatch, seg: usize) -> Result<Vec<f64>, ModelError> {
        let range = batch.segment(seg)?;
        let pos = range
            .clone()
            .find(|&p| batch.tokens[p] == crate::sid::Vocab::EOS)
            .ok_or(ModelError::MissingEos(seg))?;
        Ok(self.hidden.value().row(pos).to_vec())
    }
}

impl Model {
    /// Random initialisation: N(0, 0.02) weights, unit norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn layer_base(&self, l: usize) -> usize {
        2 + l * PER_LAYER
    }

    pub(crate) fn final_base(&self) -> usize {
        2 + self.config.depth * PER_LAYER
    }

    fn check_tokens(&self, tokens: &[u32], positions: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceOverflow { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::UnknownToken(t));
        }
        if let Some(&p) = positions.iter().max() {
            if p as usize >= self.config.max_seq_len {
                return Err(ModelError::SequenceOverflow { len: p as usize + 1, max: self.config.max_seq_len });
            }
        }
        Ok(())
    }

    /// One forward pass over a packed prompt + candidates sequence.
    ///
    /// With `trainable` the parameters are recorded as gradient-carrying
    /// leaves; otherwise as constants (reference model, evaluation).
    pub fn forward_packed<'t>(
        &self,
        tape: &'t Tape,
        batch: &PackedBatch,
        trainable: bool,
    ) -> Result<Forward<'t>, ModelError> {
        self.check_tokens(&batch.tokens, &batch.position_ids)?;
        let params: Vec<Var<'t>> = self
            .params
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let cfg = &self.config;
        let tokens: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = batch.position_ids.iter().map(|&p| p as usize).collect();
        let visible = batch.visibility_lists();

        let mut x = params[0].gather_rows(&tokens)?.add(params[1].gather_rows(&positions)?)?;
        for l in 0..cfg.depth {
            let p = &params[self.layer_base(l)..self.layer_base(l) + PER_LAYER];
            let z = x.layer_norm(p[idx::LN1_G], p[idx::LN1_B])?;
            let q = z.matmul(p[idx::WQ])?;
            let k = z.matmul(p[idx::WK])?;
            let v = z.matmul(p[idx::WV])?;
            let a = q.attention(k, v, cfg.n_heads, visible.clone())?;
            x = x.add(a.matmul(p[idx::WO])?)?;
            let z = x.layer_norm(p[idx::LN2_G], p[idx::LN2_B])?;
            let m = z.matmul(p[idx::W1])?.add_row(p[idx::B1])?.gelu();
            x = x.add(m.matmul(p[idx::W2])?.add_row(p[idx::B2])?)?;
        }
        let f = self.final_base();
        let hidden = x.layer_norm(params[f], params[f + 1])?;

        let rows = batch.predictor_rows();
        let mut row_of = vec![None; batch.len()];
        for (r, &p) in rows.iter().enumerate() {
            row_of[p] = Some(r);
        }
        let logits = hidden.gather_rows(&rows)?.matmul(params[f + 2])?.add_row(params[f + 3])?;
        let log_probs = logits.log_softmax();
        Ok(Forward { params, hidden, log_probs, row_of })
    }
}

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;

    fn tiny(seed: u64) -> Model {
        let mut cfg = ModelConfig::new(20);
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.d_ff = 32;
        cfg.max_seq_len = 32;
        cfg.seed = seed;
        let mut m = Model::init(cfg).unwrap();
        // larger weights so the outputs are far from uniform
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        m
    }

    fn cand_lps(model: &Model, batch: &PackedBatch) -> Vec<f64> {
        let tape = Tape::new();
        let f = model.forward_packed(&tape, batch, false).unwrap();
        (0..batch.n_candidates()).map(|i| f.candidate_logprob(batch, i).unwrap().item()).collect()
    }

    #[test]
    fn single_candidate_equals_plain_causal_forward() {
        let m = tiny(1);
        let prompt = vec![12, 13, 2];
        let cand = vec![3, 6, 1];
        let batch = PackedBatch::new(&prompt, &[cand.clone()]).unwrap();
        let tape = Tape::new();
        let f = m.forward_packed(&tape, &batch, false).unwrap();
        let tok = f.token_logprobs(&batch, 0).unwrap().to_tensor();

        let full: Vec<u32> = prompt.iter().chain(&cand).copied().collect();
        let all = m.causal_log_probs(&full).unwrap();
        for (t, &y) in cand.iter().enumerate() {
            let pos = prompt.len() + t - 1;
            assert!((tok.data()[t] - all[pos][y as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_equals_separate_and_order_invariant() {
        let m = tiny(2);
        let prompt = vec![14, 15, 16, 2];
        let cands = vec![vec![3, 7, 1], vec![3, 8, 1], vec![4, 7, 1], vec![5, 9, 1]];
        let batch = PackedBatch::new(&prompt, &cands).unwrap();
        let packed = cand_lps(&m, &batch);
        for (i, c) in cands.iter().enumerate() {
            let solo = cand_lps(&m, &PackedBatch::new(&prompt, &[c.clone()]).unwrap())[0];
            assert!((packed[i] - solo).abs() <= 1e-10);
        }
        let rev = batch.permuted(&[3, 2, 1, 0]).unwrap();
        let r = cand_lps(&m, &rev);
        for i in 0..4 {
            assert!((packed[i] - r[3 - i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn candidates_do_not_leak() {
        let m = tiny(3);
        let prompt = vec![14, 2];
        let a = PackedBatch::new(&prompt, &[vec![3, 7, 1], vec![4, 8, 1]]).unwrap();
        let b = PackedBatch::new(&prompt, &[vec![3, 7, 1], vec![6, 9, 1]]).unwrap();
        assert_eq!(cand_lps(&m, &a)[0].to_bits(), cand_lps(&m, &b)[0].to_bits());
    }

    #[test]
    fn uniform_model_gives_length_times_log_vocab() {
        let mut m = tiny(4);
        for t in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = PackedBatch::new(&[10, 2], &[vec![3, 6, 9, 1], vec![4]]).unwrap();
        let lps = cand_lps(&m, &batch);
        let v = m.config.vocab_size as f64;
        assert!((lps[0] + 4.0 * v.ln()).abs() < 1e-12);
        assert!((lps[1] + v.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_distributions_normalise() {
        let m = tiny(5);
        let batch = PackedBatch::new(&[10, 11, 2], &[vec![3, 6, 9, 1], vec![4, 5, 1]]).unwrap();
        let tape = Tape::new();
        let f = m.forward_packed(&tape, &batch, false).unwrap();
        let lp = f.log_probs.to_tensor();
        for r in 0..lp.rows() {
            let lse = crate::autodiff::logsumexp(lp.row(r));
            assert!(lse.abs() < 1e-8);
        }
    }

    #[test]
    fn eos_hidden_shape_and_errors() {
        let m = tiny(6);
        let batch = PackedBatch::new(&[10, 2], &[vec![3, 6, 1], vec![4, 5]]).unwrap();
        let tape = Tape::new();
        let f = m.forward_packed(&tape, &batch, false).unwrap();
        let h = f.eos_hidden(&batch, 0).unwrap();
        assert_eq!(h.len(), m.config.d_model);
        assert_eq!(h, f.eos_hidden(&batch, 0).unwrap());
        assert!(matches!(f.eos_hidden(&batch, 1), Err(ModelError::MissingEos(1))));
        assert!(matches!(f.candidate_logprob(&batch, 5), Err(ModelError::NoSuchSegment(5))));
    }

    #[test]
    fn rejects_overflow_and_unknown_tokens() {
        let m = tiny(7);
        let tape = Tape::new();
        let long = PackedBatch::new(&vec![2; 40], &[vec![1]]).unwrap();
        assert!(matches!(m.forward_packed(&tape, &long, false), Err(ModelError::SequenceOverflow { .. })));
        let bad = PackedBatch::new(&[99], &[vec![1]]).unwrap();
        assert!(matches!(m.forward_packed(&tape, &bad, false), Err(ModelError::UnknownToken(99))));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(30);
        c.n_heads = 3;
        assert!(Model::init(c).is_err());
    }
}
