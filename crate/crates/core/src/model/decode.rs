//! Tape-free inference: plain causal scoring and beam search over SIDs.
//!
//! The prompt is encoded once and its per-layer keys/values reused by every
//! beam; each decoding step only runs the newly appended token of each beam.

use crate::autodiff::{dot, axpy, gelu, layer_norm_forward, log_softmax_row, matmul_into};
use crate::sid::{SemanticId, Trie, Vocab};

use super::{idx, Model, ModelError, PER_LAYER};

/// A decoded SID with its total log-probability (EOS included).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub sid: SemanticId,
    pub score: f64,
}

struct KvCache {
    /// Per layer, `rows × d` keys and values.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl KvCache {
    fn empty(depth: usize) -> Self {
        Self { k: vec![Vec::new(); depth], v: vec![Vec::new(); depth] }
    }
}

fn linear(x: &[f64], w: &[f64], rows: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * m];
    matmul_into(x, w, &mut out, rows, k, m);
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Attention of one query row over a sequence of key/value blocks.
fn attend_row(q: &[f64], keys: &[&[f64]], vals: &[&[f64]], d: usize, heads: usize, out: &mut [f64], scratch: &mut Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        scratch.clear();
        let mut m = f64::NEG_INFINITY;
        for block in keys {
            for krow in block.chunks(d) {
                let s = dot(qh, &krow[cols.clone()]) * scale;
                m = m.max(s);
                scratch.push(s);
            }
        }
        let mut z = 0.0;
        for s in scratch.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let oh = &mut out[cols.clone()];
        let mut idx = 0;
        for block in vals {
            for vrow in block.chunks(d) {
                axpy(oh, scratch[idx] / z, &vrow[cols.clone()]);
                idx += 1;
            }
        }
    }
}

impl Model {
    fn embed(&self, tokens: &[u32], positions: &[u32]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (&t, &p) in tokens.iter().zip(positions) {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::UnknownToken(t));
            }
            if p as usize >= self.config.max_seq_len {
                return Err(ModelError::SequenceOverflow { len: p as usize + 1, max: self.config.max_seq_len });
            }
            let e = self.params[0].row(t as usize);
            let pe = self.params[1].row(p as usize);
            x.extend(e.iter().zip(pe).map(|(a, b)| a + b));
        }
        Ok(x)
    }

    /// Runs every block on `x` (`rows × d`). `context(r)` lists, for new row
    /// `r`, which earlier rows of `cache_prefix` plus `own` are visible.
    fn run_blocks(
        &self,
        mut x: Vec<f64>,
        prefix: Option<&KvCache>,
        own: &mut [KvCache],
        causal_within: bool,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let rows = x.len() / d;
        let mut scratch = Vec::new();
        for l in 0..cfg.depth {
            let p = &self.params[self.layer_base(l)..self.layer_base(l) + PER_LAYER];
            let (z, _, _) = layer_norm_forward(&x, p[idx::LN1_G].data(), p[idx::LN1_B].data(), d);
            let q = linear(&z, p[idx::WQ].data(), rows, d, d);
            let k = linear(&z, p[idx::WK].data(), rows, d, d);
            let v = linear(&z, p[idx::WV].data(), rows, d, d);
            let mut a = vec![0.0; rows * d];
            if causal_within {
                // one sequence: own[0] accumulates every row
                own[0].k[l].extend_from_slice(&k);
                own[0].v[l].extend_from_slice(&v);
                for r in 0..rows {
                    let kk = &own[0].k[l][..(r + 1) * d];
                    let vv = &own[0].v[l][..(r + 1) * d];
                    let mut keys: Vec<&[f64]> = Vec::with_capacity(2);
                    let mut vals: Vec<&[f64]> = Vec::with_capacity(2);
                    if let Some(pc) = prefix {
                        keys.push(&pc.k[l]);
                        vals.push(&pc.v[l]);
                    }
                    keys.push(kk);
                    vals.push(vv);
                    attend_row(&q[r * d..(r + 1) * d], &keys, &vals, d, cfg.n_heads, &mut a[r * d..(r + 1) * d], &mut scratch);
                }
            } else {
                // one new row per beam
                for r in 0..rows {
                    own[r].k[l].extend_from_slice(&k[r * d..(r + 1) * d]);
                    own[r].v[l].extend_from_slice(&v[r * d..(r + 1) * d]);
                    let mut keys: Vec<&[f64]> = Vec::with_capacity(2);
                    let mut vals: Vec<&[f64]> = Vec::with_capacity(2);
                    if let Some(pc) = prefix {
                        keys.push(&pc.k[l]);
                        vals.push(&pc.v[l]);
                    }
                    keys.push(&own[r].k[l]);
                    vals.push(&own[r].v[l]);
                    attend_row(&q[r * d..(r + 1) * d], &keys, &vals, d, cfg.n_heads, &mut a[r * d..(r + 1) * d], &mut scratch);
                }
            }
            let o = linear(&a, p[idx::WO].data(), rows, d, d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
            let (z, _, _) = layer_norm_forward(&x, p[idx::LN2_G].data(), p[idx::LN2_B].data(), d);
            let mut hmid = linear(&z, p[idx::W1].data(), rows, d, f);
            add_bias(&mut hmid, p[idx::B1].data());
            hmid.iter_mut().for_each(|v| *v = gelu(*v));
            let mut m = linear(&hmid, p[idx::W2].data(), rows, f, d);
            add_bias(&mut m, p[idx::B2].data());
            x.iter_mut().zip(&m).for_each(|(x, m)| *x += m);
        }
        let fb = self.final_base();
        layer_norm_forward(&x, self.params[fb].data(), self.params[fb + 1].data(), d).0
    }

    fn head_log_probs(&self, hidden: &[f64]) -> Vec<f64> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let rows = hidden.len() / d;
        let fb = self.final_base();
        let mut logits = linear(hidden, self.params[fb + 2].data(), rows, d, v);
        add_bias(&mut logits, self.params[fb + 3].data());
        logits.chunks_mut(v).for_each(log_softmax_row);
        logits
    }

    fn encode_prompt(&self, tokens: &[u32]) -> Result<(KvCache, Vec<f64>), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySegment(0));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceOverflow { len: tokens.len(), max: self.config.max_seq_len });
        }
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let x = self.embed(tokens, &positions)?;
        let mut cache = [KvCache::empty(self.config.depth)];
        let hidden = self.run_blocks(x, None, &mut cache, true);
        let [cache] = cache;
        Ok((cache, hidden))
    }

    /// Ordinary causal forward of one unpacked sequence: `[n][vocab]` log-distributions.
    pub fn causal_log_probs(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let (_, hidden) = self.encode_prompt(tokens)?;
        let v = self.config.vocab_size;
        Ok(self.head_log_probs(&hidden).chunks(v).map(|r| r.to_vec()).collect())
    }

    /// Ordinary causal forward returning final hidden states `[n][d_model]`.
    pub fn causal_hidden(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let (_, hidden) = self.encode_prompt(tokens)?;
        Ok(hidden.chunks(self.config.d_model).map(|r| r.to_vec()).collect())
    }
}

/// Beam search over SID code sequences.
///
/// Step `ℓ` extends each beam with a level-`ℓ` code token; with a trie only
/// catalog-consistent codes are allowed. After the last level the EOS
/// log-probability is added and hypotheses are returned best first.
pub fn beam_search(
    model: &Model,
    vocab: &Vocab,
    prompt: &[u32],
    width: usize,
    constraint: Option<&Trie>,
) -> Result<Vec<Hypothesis>, ModelError> {
    if width == 0 {
        return Err(ModelError::InvalidConfig("beam width must be at least 1".into()));
    }
    let levels = vocab.levels();
    if prompt.len() + levels + 1 > model.config.max_seq_len {
        return Err(ModelError::SequenceOverflow { len: prompt.len() + levels + 1, max: model.config.max_seq_len });
    }
    let d = model.config.d_model;
    let v = model.config.vocab_size;
    let (prompt_cache, prompt_hidden) = model.encode_prompt(prompt)?;
    let last = &prompt_hidden[(prompt.len() - 1) * d..];
    let first_dist = model.head_log_probs(last);

    struct Beam {
        codes: Vec<u32>,
        score: f64,
        cache: KvCache,
    }
    let mut beams = vec![Beam { codes: Vec::new(), score: 0.0, cache: KvCache::empty(model.config.depth) }];
    let mut dists = first_dist;

    for level in 0..levels {
        let mut expansions: Vec<(usize, u32, f64)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let dist = &dists[b * v..(b + 1) * v];
            let codes: Vec<u32> = match constraint {
                Some(trie) => trie.next_codes(&beam.codes),
                None => (0..vocab.level_sizes()[level] as u32).collect(),
            };
            for c in codes {
                let tok = vocab.code_token(level, c) as usize;
                expansions.push((b, c, beam.score + dist[tok]));
            }
        }
        expansions.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        expansions.truncate(width);
        if expansions.is_empty() {
            return Ok(Vec::new());
        }
        let tokens: Vec<u32> = expansions.iter().map(|&(_, c, _)| vocab.code_token(level, c)).collect();
        let positions = vec![(prompt.len() + level) as u32; tokens.len()];
        let x = model.embed(&tokens, &positions)?;
        let mut caches: Vec<KvCache> = expansions
            .iter()
            .map(|&(b, _, _)| KvCache { k: beams[b].cache.k.clone(), v: beams[b].cache.v.clone() })
            .collect();
        let hidden = model.run_blocks(x, Some(&prompt_cache), &mut caches, false);
        dists = model.head_log_probs(&hidden);
        beams = expansions
            .iter()
            .zip(caches)
            .map(|(&(b, c, s), cache)| {
                let mut codes = beams[b].codes.clone();
                codes.push(c);
                Beam { codes, score: s, cache }
            })
            .collect();
    }

    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .enumerate()
        .map(|(b, beam)| Hypothesis {
            sid: SemanticId(beam.codes),
            score: beam.score + dists[b * v + Vocab::EOS as usize],
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sid.cmp(&b.sid)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{ModelConfig, PackedBatch};
    use crate::sid::Catalog;

    fn model(vocab: &Vocab, seed: u64) -> Model {
        let mut cfg = ModelConfig::new(vocab.size());
        cfg.d_model = 16;
        cfg.d_ff = 32;
        cfg.max_seq_len = 24;
        cfg.seed = seed;
        let mut m = Model::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        m
    }

    /// Exhaustive oracle: score every code sequence by a separate causal forward.
    fn brute_force(m: &Model, vocab: &Vocab, prompt: &[u32]) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let sizes = vocab.level_sizes().to_vec();
        let total: usize = sizes.iter().product();
        for mut n in 0..total {
            let mut codes = vec![0u32; sizes.len()];
            for l in (0..sizes.len()).rev() {
                codes[l] = (n % sizes[l]) as u32;
                n /= sizes[l];
            }
            let sid = SemanticId(codes);
            let cand = vocab.candidate_tokens(&sid);
            let full: Vec<u32> = prompt.iter().chain(&cand).copied().collect();
            let lp = m.causal_log_probs(&full).unwrap();
            let score: f64 = cand.iter().enumerate().map(|(t, &y)| lp[prompt.len() + t - 1][y as usize]).sum();
            out.push(Hypothesis { sid, score });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }

    #[test]
    fn full_width_beam_equals_exhaustive_ranking() {
        let vocab = Vocab::new(&[3, 3, 2], 4);
        let m = model(&vocab, 3);
        let prompt = vec![vocab.query_token(1), Vocab::SEP];
        let beam = beam_search(&m, &vocab, &prompt, 18, None).unwrap();
        let brute = brute_force(&m, &vocab, &prompt);
        assert_eq!(beam.len(), 18);
        for (a, b) in beam.iter().zip(&brute) {
            assert_eq!(a.sid, b.sid);
            assert!((a.score - b.score).abs() < 1e-10);
        }
    }

    #[test]
    fn width_one_is_greedy() {
        let vocab = Vocab::new(&[4, 4, 4], 4);
        let m = model(&vocab, 5);
        let prompt = vec![vocab.query_token(2), Vocab::SEP];
        let beam = beam_search(&m, &vocab, &prompt, 1, None).unwrap();
        let mut seq = prompt.clone();
        let mut codes = Vec::new();
        for level in 0..3 {
            let lp = m.causal_log_probs(&seq).unwrap();
            let last = lp.last().unwrap();
            let best = vocab
                .level_range(level)
                .max_by(|&a, &b| last[a as usize].total_cmp(&last[b as usize]).then(b.cmp(&a)))
                .unwrap();
            codes.push(vocab.token_code(level, best).unwrap());
            seq.push(best);
        }
        assert_eq!(beam.len(), 1);
        assert_eq!(beam[0].sid, SemanticId(codes));
    }

    #[test]
    fn constrained_beams_stay_in_catalog() {
        let vocab = Vocab::new(&[4, 4, 4], 4);
        let m = model(&vocab, 8);
        let cat = Catalog::new(&[4, 4, 4], vec![SemanticId(vec![0, 1, 2]), SemanticId(vec![3, 3, 3]), SemanticId(vec![0, 2, 2])]).unwrap();
        let prompt = vec![vocab.query_token(0), Vocab::SEP];
        let out = beam_search(&m, &vocab, &prompt, 10, Some(cat.trie())).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|h| cat.contains(&h.sid)));
        assert!(beam_search(&m, &vocab, &prompt, 0, None).is_err());
    }

    #[test]
    fn cached_decode_matches_tape_forward() {
        let vocab = Vocab::new(&[4, 4, 4], 4);
        let m = model(&vocab, 9);
        let prompt = vec![vocab.query_token(3), vocab.code_token(0, 1), Vocab::SEP];
        let sid = SemanticId(vec![2, 0, 3]);
        let cand = vocab.candidate_tokens(&sid);
        let batch = PackedBatch::new(&prompt, &[cand.clone()]).unwrap();
        let tape = Tape::new();
        let f = m.forward_packed(&tape, &batch, false).unwrap();
        let packed = f.candidate_logprob(&batch, 0).unwrap().item();
        let all = beam_search(&m, &vocab, &prompt, 64, None).unwrap();
        let hit = all.iter().find(|h| h.sid == sid).unwrap();
        assert!((hit.score - packed).abs() < 1e-10);
    }
}
