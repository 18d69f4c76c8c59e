//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run a subset with `cargo test --release --test acceptance -- 1 4 8`.
//! Criteria 5 and 6 train several models per seed and take most of the
//! wall time (about 25 minutes on one core).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use raddpo_core::autodiff::Tape;
use raddpo_core::datagen::{self, GenConfig, Oracle, Session};
use raddpo_core::eval::{evaluate, EvalConfig, EvalReport};
use raddpo_core::losses::{
    cosine_sim, detached_neg_logprob, dpo_pair_loss, implicit_reward, penalty_weight, pl_loss, sft_loss, simpo_pair_loss,
    total_loss, LossConfig, PrefixMask, RewardStats, SessionOutputs,
};
use raddpo_core::model::{save_checkpoint, Model, ModelConfig, PackedBatch};
use raddpo_core::provenance::model_hash;
use raddpo_core::sid::{rq_kmeans_fit, Catalog, SemanticId, Vocab};
use raddpo_core::train::{self, CheckpointSink, Method, TrainConfig};

// ---- tolerances ----

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
/// Coordinates with smaller analytic gradients are checked in absolute terms only.
const GRAD_LIVE_FLOOR: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const DETACHED_GRAD_TOL: f64 = 1e-12;
const PULL_SESSIONS: usize = 50;
const PACKING_TOL: f64 = 1e-10;
const WARMUP_PAIRS: usize = 4096;
const RDRW_LAMBDA: f64 = 12.0;
const SHARE_TARGETS: [f64; 2] = [0.346, 0.019];
const SHARE_TOL: f64 = 0.02;
const SHARE_PAIRS: usize = 100_000;
const RQ_INPUTS: usize = 1000;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: [u64; 3] = [11, 22, 33];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "prefix detachment", prefix_detachment),
        (3, "packing", packing),
        (4, "dynamic reward weighting", reward_weighting),
        (5, "directional comparison", directional_comparison),
        (6, "ablation direction", ablation_direction),
        (7, "parameter sets", parameter_sets),
        (8, "semantic ids and prefix sharing", sid_and_sharing),
        (9, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {n} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

// ---- small random models and sessions ----

fn tiny_vocab() -> Vocab {
    Vocab::new(&[4, 4, 4], 17)
}

/// Two-layer, d_model 16 model over a 32-token vocabulary with weights
/// spread out far enough that the outputs are not near-uniform.
fn random_model(seed: u64) -> Model {
    let vocab = tiny_vocab();
    assert_eq!(vocab.size(), 32);
    let cfg = ModelConfig { vocab_size: 32, depth: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 48, seed };
    let mut m = Model::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919));
    for t in &mut m.params {
        for x in t.data_mut() {
            *x += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

#[derive(Clone, Debug)]
struct Case {
    prompt: Vec<u32>,
    positives: Vec<Vec<u32>>,
    anchor: usize,
    negatives: Vec<Vec<u32>>,
}

impl Case {
    fn batch(&self) -> PackedBatch {
        let mut cands = self.positives.clone();
        cands.extend(self.negatives.iter().cloned());
        PackedBatch::with_positives(&self.prompt, &cands, self.positives.len()).unwrap()
    }
}

fn random_codes(rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..3).map(|_| rng.random_range(0..4)).collect()
}

/// Codes sharing exactly `depth` leading codes with `anchor`.
fn sharing(anchor: &[u32], depth: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut c = random_codes(rng);
    c[..depth].copy_from_slice(&anchor[..depth]);
    if depth < 3 {
        c[depth] = (anchor[depth] + rng.random_range(1..4)) % 4;
    }
    c
}

/// Two positives, negatives sharing 1, 2 and 0 leading codes with the anchor.
fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let vocab = tiny_vocab();
    let tok = |codes: &[u32]| vocab.candidate_tokens(&SemanticId(codes.to_vec()));
    let anchor = random_codes(rng);
    let other = sharing(&anchor, rng.random_range(0..3), rng);
    let mut prompt = vec![vocab.query_token(rng.random_range(0..17))];
    for _ in 0..rng.random_range(0..3) {
        prompt.extend(vocab.sid_tokens(&SemanticId(random_codes(rng))));
    }
    prompt.push(Vocab::SEP);
    let negatives = [1, 2, 0].iter().map(|&d| tok(&sharing(&anchor, d, rng))).collect();
    let anchor_idx = rng.random_range(0..2);
    let positives = if anchor_idx == 0 { vec![tok(&anchor), tok(&other)] } else { vec![tok(&other), tok(&anchor)] };
    Case { prompt, positives, anchor: anchor_idx, negatives }
}

/// Reward stats already past warm-up with quartiles spread over [-0.6, 0.9].
fn warm_stats(rng: &mut ChaCha8Rng) -> RewardStats {
    let mut s = RewardStats::default();
    let sims: Vec<f64> = (0..WARMUP_PAIRS).map(|_| rng.random_range(-0.6..0.9)).collect();
    s.update(&sims);
    assert!(s.is_warm());
    s
}

// ---- criterion 1 ----

/// Log-probabilities read off an ordinary unpacked forward, one vector per candidate.
fn unpacked_token_logprobs(model: &Model, prompt: &[u32], cand: &[u32]) -> Vec<f64> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(cand);
    let dists = model.causal_log_probs(&seq).unwrap();
    cand.iter().enumerate().map(|(i, &t)| dists[prompt.len() - 1 + i][t as usize]).collect()
}

fn unpacked_eos_hidden(model: &Model, prompt: &[u32], cand: &[u32]) -> Vec<f64> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(cand);
    model.causal_hidden(&seq).unwrap()[seq.len() - 1].clone()
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Sft,
    ListContrast,
    DetachedNegative,
    Full,
    Dpo,
    Simpo,
}

const OBJECTIVES: [Objective; 6] = [
    Objective::Sft,
    Objective::ListContrast,
    Objective::DetachedNegative,
    Objective::Full,
    Objective::Dpo,
    Objective::Simpo,
];

/// Quantities held at their base-point values: the detached negative
/// prefix log-probs, the penalty weights and the reference log-probs.
struct Frozen {
    neg_logprobs: Vec<Vec<f64>>,
    weights: Vec<f64>,
    reference: (f64, f64),
}

fn freeze(base: &Model, reference: &Model, case: &Case, stats: &RewardStats) -> Frozen {
    let anchor = &case.positives[case.anchor];
    let h_anchor = unpacked_eos_hidden(base, &case.prompt, anchor);
    let weights = case
        .negatives
        .iter()
        .map(|n| stats.weight(cosine_sim(&h_anchor, &unpacked_eos_hidden(base, &case.prompt, n)), RDRW_LAMBDA))
        .collect();
    let neg_logprobs = case.negatives.iter().map(|n| unpacked_token_logprobs(base, &case.prompt, n)).collect();
    let total = |c: &[u32]| unpacked_token_logprobs(reference, &case.prompt, c).iter().sum::<f64>();
    Frozen { neg_logprobs, weights, reference: (total(anchor), total(&case.negatives[0])) }
}

/// Plain f64 evaluation of each objective from unpacked forwards.
fn oracle_value(model: &Model, case: &Case, frozen: &Frozen, obj: Objective) -> f64 {
    let anchor = &case.positives[case.anchor];
    let lp = |c: &[u32]| unpacked_token_logprobs(model, &case.prompt, c);
    let total = |c: &[u32]| lp(c).iter().sum::<f64>();
    let sft = || -case.positives.iter().map(|p| total(p)).sum::<f64>() / case.positives.len() as f64;
    let detached = |j: usize| {
        let neg = &case.negatives[j];
        let k = anchor.iter().zip(neg).take_while(|(a, b)| a == b && **a != Vocab::EOS).count();
        let live = lp(neg);
        (0..neg.len()).map(|t| if t < k { frozen.neg_logprobs[j][t] } else { live[t] }).sum::<f64>()
    };
    let contrast = |neg_lp: &dyn Fn(usize) -> f64, weights: &[f64]| {
        let rw = total(anchor) / anchor.len() as f64;
        let terms: Vec<f64> = (0..case.negatives.len())
            .map(|j| weights[j] * (rw - neg_lp(j) / case.negatives[j].len() as f64))
            .collect();
        neg_log_sigmoid(lse(&terms))
    };
    match obj {
        Objective::Sft => sft(),
        Objective::ListContrast => contrast(&|j| total(&case.negatives[j]), &frozen.weights),
        Objective::DetachedNegative => (0..case.negatives.len()).map(detached).sum(),
        Objective::Full => sft() + contrast(&detached, &frozen.weights),
        Objective::Dpo => {
            let (rw, rl) = frozen.reference;
            neg_log_sigmoid(0.1 * ((total(anchor) - rw) - (total(&case.negatives[0]) - rl)))
        }
        Objective::Simpo => {
            let l = &case.negatives[0];
            neg_log_sigmoid(2.0 * (total(anchor) / anchor.len() as f64 - total(l) / l.len() as f64) - 1.0)
        }
    }
}

/// Loss value and parameter gradients from the packed, taped forward.
fn taped(model: &Model, case: &Case, frozen: &Frozen, stats: &RewardStats, obj: Objective) -> (f64, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let batch = case.batch();
    let fwd = model.forward_packed(&tape, &batch, true).unwrap();
    let out = SessionOutputs::from_forward(&fwd, &batch, case.anchor).unwrap();
    let anchor = &out.positives[out.anchor];
    let masks: Vec<PrefixMask> = out.negatives.iter().map(|n| PrefixMask::new(&anchor.tokens, &n.tokens)).collect();
    let loss = match obj {
        Objective::Sft => sft_loss(&out.positives.iter().map(|p| p.logprob()).collect::<Vec<_>>()).unwrap(),
        Objective::ListContrast => {
            let rw = implicit_reward(anchor.logprob(), anchor.len()).unwrap();
            let rj: Vec<_> = out.negatives.iter().map(|n| implicit_reward(n.logprob(), n.len()).unwrap()).collect();
            pl_loss(rw, &rj, &frozen.weights, 1.0).unwrap()
        }
        Objective::DetachedNegative => {
            let parts: Vec<_> =
                out.negatives.iter().zip(&masks).map(|(n, m)| detached_neg_logprob(n.token_logprobs, m).unwrap()).collect();
            tape.stack(&parts).unwrap().sum()
        }
        Objective::Full => {
            let cfg = LossConfig { lambda: RDRW_LAMBDA, ..LossConfig::default() };
            let (l, parts) = total_loss(&out, &cfg, stats).unwrap();
            for (a, b) in parts.weights.iter().zip(&frozen.weights) {
                assert!((a - b).abs() < 1e-9, "packed and unpacked weights differ: {a} vs {b}");
            }
            l
        }
        Objective::Dpo => dpo_pair_loss(anchor.logprob(), out.negatives[0].logprob(), Some(frozen.reference), 0.1).unwrap(),
        Objective::Simpo => {
            let rw = implicit_reward(anchor.logprob(), anchor.len()).unwrap();
            let rl = implicit_reward(out.negatives[0].logprob(), out.negatives[0].len()).unwrap();
            simpo_pair_loss(rw, rl, 2.0, 1.0).unwrap()
        }
    };
    let grads = loss.backward().unwrap();
    let g = fwd.params.iter().map(|p| grads.wrt(*p).into_data()).collect();
    (loss.item(), g)
}

fn perturbed(model: &Model, p: usize, i: usize, delta: f64) -> Model {
    let mut m = model.clone();
    m.params[p].data_mut()[i] += delta;
    m
}

struct FdReport {
    live: usize,
    dead: usize,
    worst_rel: f64,
    worst_dead: f64,
    value_gap: f64,
}

fn fd_check(seed: u64, obj: Objective) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(seed);
    let reference = random_model(seed + 1000);
    let case = random_case(&mut rng);
    let stats = warm_stats(&mut rng);
    let frozen = freeze(&model, &reference, &case, &stats);
    let (value, grads) = taped(&model, &case, &frozen, &stats, obj);
    let value_gap = (value - oracle_value(&model, &case, &frozen, obj)).abs();

    let coords: Vec<(usize, usize)> =
        grads.iter().enumerate().flat_map(|(p, g)| (0..g.len()).map(move |i| (p, i))).collect();
    let mut live: Vec<_> = coords.iter().copied().filter(|&(p, i)| grads[p][i].abs() >= GRAD_LIVE_FLOOR).collect();
    let mut dead: Vec<_> = coords.iter().copied().filter(|&(p, i)| grads[p][i] == 0.0).collect();
    live.shuffle(&mut rng);
    dead.shuffle(&mut rng);
    live.truncate(GRAD_COORDS);
    dead.truncate(GRAD_COORDS / 5);

    let fd = |p: usize, i: usize| {
        let up = oracle_value(&perturbed(&model, p, i, FD_STEP), &case, &frozen, obj);
        let down = oracle_value(&perturbed(&model, p, i, -FD_STEP), &case, &frozen, obj);
        (up - down) / (2.0 * FD_STEP)
    };
    let worst_rel = live
        .iter()
        .map(|&(p, i)| {
            let (a, n) = (grads[p][i], fd(p, i));
            (a - n).abs() / a.abs().max(n.abs())
        })
        .fold(0.0, f64::max);
    let worst_dead = dead.iter().map(|&(p, i)| fd(p, i).abs()).fold(0.0, f64::max);
    FdReport { live: live.len(), dead: dead.len(), worst_rel, worst_dead, value_gap }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (s, obj) in OBJECTIVES.iter().enumerate() {
        let r = fd_check(100 + s as u64, *obj);
        let ok = r.live >= GRAD_COORDS && r.worst_rel < GRAD_REL_TOL && r.worst_dead < 1e-8 && r.value_gap < 1e-10;
        pass &= ok;
        parts.push(format!("{obj:?} rel {:.1e} on {}+{} coords", r.worst_rel, r.live, r.dead));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < GRAD_BUDGET;
    outcome(pass, format!("{}; {:.1}s < 60s", parts.join(", "), elapsed.as_secs_f64()))
}

// ---- criterion 2 ----

fn prefix_detachment() -> Outcome {
    let mut bitwise = true;
    let mut worst_detached: f64 = 0.0;
    let mut live_seen = false;
    let mut pulls = 0;
    let mut pulls_without = 0;
    let mut worst_residual: f64 = 0.0;
    let cfg = LossConfig { lambda: RDRW_LAMBDA, ..LossConfig::default() };
    for s in 0..PULL_SESSIONS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let model = random_model(500 + s);
        let case = random_case(&mut rng);
        let stats = warm_stats(&mut rng);
        let batch = case.batch();
        let anchor_first = case.positives[case.anchor][0] as usize;

        for tlgd in [true, false] {
            let tape = Tape::new();
            let fwd = model.forward_packed(&tape, &batch, true).unwrap();
            let out = SessionOutputs::from_forward(&fwd, &batch, case.anchor).unwrap();
            let anchor = &out.positives[out.anchor];
            for n in &out.negatives {
                let m = PrefixMask::new(&anchor.tokens, &n.tokens);
                let d = detached_neg_logprob(n.token_logprobs, &m).unwrap().item();
                bitwise &= d.to_bits() == n.logprob().item().to_bits();
            }
            let (loss, _) = total_loss(&out, &LossConfig { enable_tlgd: tlgd, ..cfg.clone() }, &stats).unwrap();
            let grads = loss.backward().unwrap();
            if tlgd {
                for n in &out.negatives {
                    let k = PrefixMask::new(&anchor.tokens, &n.tokens).k;
                    let g = grads.wrt(n.token_logprobs);
                    for t in 0..n.len() {
                        if t < k {
                            worst_detached = worst_detached.max(g.data()[t].abs());
                        } else {
                            live_seen |= g.data()[t] != 0.0;
                        }
                    }
                }
            }
            // Every candidate's first token is predicted from the last prompt position.
            let first = batch.segment(0).unwrap().start;
            let row = fwd.log_prob_row(batch.predictor_of(first).unwrap()).unwrap();
            let shared = grads.wrt(fwd.log_probs).row(row)[anchor_first];
            if tlgd {
                pulls += (shared < 0.0) as usize;
            } else {
                pulls_without += (shared < 0.0) as usize;
            }
        }

        // The taped gradient equals the finite difference of a loss whose
        // negative-prefix log-probs are held at their base values.
        if s < 5 {
            let frozen = freeze(&model, &model, &case, &stats);
            let (_, g) = taped(&model, &case, &frozen, &stats, Objective::Full);
            let mut coords: Vec<(usize, usize)> =
                g.iter().enumerate().flat_map(|(p, v)| (0..v.len()).map(move |i| (p, i))).collect();
            coords.shuffle(&mut rng);
            for &(p, i) in coords.iter().filter(|&&(p, i)| g[p][i].abs() >= GRAD_LIVE_FLOOR).take(20) {
                let up = oracle_value(&perturbed(&model, p, i, FD_STEP), &case, &frozen, Objective::Full);
                let down = oracle_value(&perturbed(&model, p, i, -FD_STEP), &case, &frozen, Objective::Full);
                worst_residual = worst_residual.max((g[p][i] - (up - down) / (2.0 * FD_STEP)).abs());
            }
        }
    }
    let pass = bitwise && worst_detached <= DETACHED_GRAD_TOL && live_seen && worst_residual < 1e-6 && pulls == PULL_SESSIONS;
    outcome(
        pass,
        format!(
            "forward bitwise equal {bitwise}; max prefix grad {worst_detached:.1e}; FD residual {worst_residual:.1e}; \
             shared prefix pulled up in {pulls}/{PULL_SESSIONS} sessions ({pulls_without}/{PULL_SESSIONS} without detachment)"
        ),
    )
}

// ---- criterion 3 ----

fn packing() -> Outcome {
    let vocab = Vocab::new(&[8, 8, 8], 50);
    let cfg = ModelConfig { depth: 2, d_model: 32, n_heads: 4, d_ff: 64, max_seq_len: 64, seed: 3, ..ModelConfig::new(vocab.size()) };
    let mut model = Model::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in &mut model.params {
        for x in t.data_mut() {
            *x += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let sid = |rng: &mut ChaCha8Rng| SemanticId((0..3).map(|_| rng.random_range(0..8)).collect());
    let mut worst_sep: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut leak = 0usize;
    let mut visibility_ok = true;
    for _ in 0..10 {
        let mut prompt = vec![vocab.query_token(rng.random_range(0..50))];
        for _ in 0..rng.random_range(0..4) {
            prompt.extend(vocab.sid_tokens(&sid(&mut rng)));
        }
        prompt.push(Vocab::SEP);
        let m = rng.random_range(2..7);
        let cands: Vec<Vec<u32>> = (0..m).map(|_| vocab.candidate_tokens(&sid(&mut rng))).collect();
        let batch = PackedBatch::new(&prompt, &cands).unwrap();
        let read = |model: &Model, batch: &PackedBatch| {
            let tape = Tape::new();
            let fwd = model.forward_packed(&tape, batch, false).unwrap();
            (0..batch.n_candidates())
                .map(|s| (fwd.candidate_logprob(batch, s).unwrap().item(), fwd.eos_hidden(batch, s).unwrap()))
                .collect::<Vec<_>>()
        };
        let packed = read(&model, &batch);
        for (s, c) in cands.iter().enumerate() {
            let lp: f64 = unpacked_token_logprobs(&model, &prompt, c).iter().sum();
            let h = unpacked_eos_hidden(&model, &prompt, c);
            worst_sep = worst_sep.max((lp - packed[s].0).abs());
            worst_sep = h.iter().zip(&packed[s].1).map(|(a, b)| (a - b).abs()).fold(worst_sep, f64::max);
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let permuted = read(&model, &batch.permuted(&order).unwrap());
        for (new, &old) in order.iter().enumerate() {
            worst_perm = worst_perm.max((permuted[new].0 - packed[old].0).abs());
            worst_perm = permuted[new].1.iter().zip(&packed[old].1).map(|(a, b)| (a - b).abs()).fold(worst_perm, f64::max);
        }
        // Rewriting one candidate must leave every other candidate's outputs bit-identical.
        let j = rng.random_range(0..m);
        let mut changed = cands.clone();
        changed[j] = vocab.candidate_tokens(&sid(&mut rng));
        let after = read(&model, &PackedBatch::new(&prompt, &changed).unwrap());
        for s in (0..m).filter(|&s| s != j) {
            leak += (after[s].0.to_bits() != packed[s].0.to_bits()) as usize;
            leak += after[s].1.iter().zip(&packed[s].1).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
        for p in 0..batch.len() {
            for q in 0..batch.len() {
                let (sp, sq) = (batch.segment_ids[p], batch.segment_ids[q]);
                if sp != 0 && sq != 0 && sp != sq {
                    visibility_ok &= !batch.visible(p, q);
                }
            }
        }
    }
    let pass = worst_sep <= PACKING_TOL && worst_perm <= PACKING_TOL && leak == 0 && visibility_ok;
    outcome(pass, format!("separate {worst_sep:.1e}, permuted {worst_perm:.1e}, leaked values {leak}"))
}

// ---- criterion 4 ----

/// Linear-interpolation quantile of an exactly sorted copy.
fn sorted_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn reward_weighting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut anchors_ok = true;
    let mut monotone = true;
    for _ in 0..200 {
        let mut q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let w = |s: f64| penalty_weight(s, q[0], q[1], q[2], RDRW_LAMBDA);
        anchors_ok &= w(q[0] - 1e-9) == 1.0 && w(-1.0 - q[0].abs()) == 1.0;
        anchors_ok &= w(q[1]) == 0.75;
        anchors_ok &= w(q[2] + 1e-9) == 0.5 && w(1.0 + q[2].abs()) == 0.5;
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let v = w(-1.5 + 3.0 * i as f64 / 2000.0);
            monotone &= v <= prev && (0.5..=1.0).contains(&v);
            prev = v;
        }
    }

    let mut stats = RewardStats::default();
    let mut flip_at = None;
    for i in 1..=WARMUP_PAIRS + 10 {
        stats.update(&[rng.random_range(-1.0..1.0)]);
        if stats.is_warm() && flip_at.is_none() {
            flip_at = Some(i);
        }
    }

    // Step-sized updates, with the ring buffer wrapping several times.
    let mut stats = RewardStats::default();
    let mut history: Vec<f64> = Vec::new();
    let mut worst_q: f64 = 0.0;
    let mut checked = 0;
    let mut chunked_flip_ok = true;
    for step in 1..=2000u64 {
        let sims: Vec<f64> = (0..48).map(|_| rng.sample::<f64, _>(StandardNormal).tanh()).collect();
        history.extend(&sims);
        let was_warm = stats.is_warm();
        stats.update(&sims);
        chunked_flip_ok &= stats.is_warm() == (history.len() >= WARMUP_PAIRS);
        let filled_now = !was_warm && stats.is_warm();
        if filled_now || (stats.is_warm() && step % 256 == 0) {
            let window = &history[history.len() - WARMUP_PAIRS..];
            for (q, got) in [(0.25, stats.q25), (0.5, stats.q50), (0.75, stats.q75)] {
                worst_q = worst_q.max((sorted_quantile(window, q) - got).abs());
            }
            checked += 1;
        }
    }
    let pass = anchors_ok && monotone && flip_at == Some(WARMUP_PAIRS) && chunked_flip_ok && worst_q <= 1e-15 && checked > 5;
    outcome(
        pass,
        format!(
            "anchors exact {anchors_ok}, monotone {monotone}, warm after {flip_at:?} pairs, \
             quartiles vs sort oracle {worst_q:.1e} over {checked} refreshes"
        ),
    )
}

// ---- criteria 5 and 6: training experiments ----

const CATALOG_ITEMS: usize = 1024;
const EMBED_DIM: usize = 32;
const LEVELS: [usize; 3] = [8, 8, 8];
const TRAIN_SESSIONS: usize = 50_000;
const TEST_SESSIONS: usize = 5_000;
const SFT_STEPS: usize = 2000;
const ALIGN_STEPS: usize = 1000;

struct World {
    catalog: Catalog,
    vocab: Vocab,
    train: Vec<Session>,
    test: Vec<Session>,
    oracle: Oracle,
}

fn world(seed: u64, gen: GenConfig) -> World {
    let emb = datagen::synthetic_embeddings(CATALOG_ITEMS, EMBED_DIM, &LEVELS, seed);
    let cb = rq_kmeans_fit(&emb, &LEVELS, seed).unwrap();
    let catalog = Catalog::from_embeddings(&cb, &emb).unwrap();
    let gen = GenConfig { seed, ..gen };
    let (train, _) = datagen::generate(&GenConfig { sessions: TRAIN_SESSIONS, day: 0, ..gen.clone() }, &catalog).unwrap();
    let (test, oracle) = datagen::generate(&GenConfig { sessions: TEST_SESSIONS, day: 1, ..gen.clone() }, &catalog).unwrap();
    let vocab = Vocab::new(&LEVELS, gen.n_queries);
    World { catalog, vocab, train, test, oracle }
}

fn experiment_model(vocab: &Vocab, seed: u64) -> Model {
    let cfg = ModelConfig { d_model: 32, n_heads: 4, d_ff: 128, max_seq_len: 64, seed, ..ModelConfig::new(vocab.size()) };
    Model::init(cfg).unwrap()
}

/// SFT from scratch, then each variant aligned from the SFT model.
/// Returns the SFT report followed by one report per variant.
fn run_variants(w: &World, seed: u64, variants: &[(&str, Method, LossConfig)]) -> Vec<EvalReport> {
    let sink = CheckpointSink::default();
    let base = TrainConfig { seed, ..TrainConfig::default() };
    let sft = train::run_sft(&TrainConfig { steps: SFT_STEPS, ..base.clone() }, &w.train, &w.vocab, experiment_model(&w.vocab, seed), &sink)
        .unwrap();
    let ev = |m: &Model, label: &str| {
        let cfg = EvalConfig { label: label.into(), ..EvalConfig::default() };
        evaluate(m, &w.test, &w.oracle, &w.catalog, &w.vocab, &cfg, "synthetic", &[seed]).unwrap()
    };
    let mut reports = vec![ev(&sft.model, "sft")];
    for (label, method, loss) in variants {
        let cfg = TrainConfig { method: *method, steps: ALIGN_STEPS, loss: loss.clone(), ..base.clone() };
        let out = train::run_alignment(&cfg, &w.train, &w.vocab, sft.model.clone(), &sink).unwrap();
        reports.push(ev(&out.model, label));
    }
    reports
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Runs every seed and returns label → per-seed (Recall@8, hallucination rate).
fn sweep(gen: &GenConfig, variants: &[(&str, Method, LossConfig)]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut by_label: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for seed in SEEDS {
        let w = world(seed, gen.clone());
        for r in run_variants(&w, seed, variants) {
            let r8 = r.sid_recall_at(8).unwrap();
            println!("    seed {seed} {:<10} R@8 {r8:.4} HR {:.4} MRR {:.4}", r.method, r.hallucination_rate, r.sid_mrr);
            by_label.entry(r.method.clone()).or_default().push((r8, r.hallucination_rate));
        }
    }
    by_label
}

fn med(results: &BTreeMap<String, Vec<(f64, f64)>>, label: &str, hr: bool) -> f64 {
    median(results[label].iter().map(|&(r, h)| if hr { h } else { r }).collect())
}

fn directional_comparison() -> Outcome {
    let start = Instant::now();
    let full = LossConfig::default();
    let results = sweep(
        &GenConfig { pseudo_negative_rate: 0.2, ..GenConfig::default() },
        &[("rad_dpo", Method::RadDpo, full.clone()), ("dpo", Method::Dpo, full)],
    );
    let elapsed = start.elapsed();
    let (rad, sft, dpo) = (med(&results, "rad_dpo", false), med(&results, "sft", false), med(&results, "dpo", false));
    let (hr_rad, hr_dpo) = (med(&results, "rad_dpo", true), med(&results, "dpo", true));
    let pass = rad > sft && sft > dpo && hr_rad <= hr_dpo && elapsed < EXPERIMENT_BUDGET;
    outcome(
        pass,
        format!(
            "median R@8 rad_dpo {rad:.4} > sft {sft:.4} > dpo {dpo:.4}; HR rad_dpo {hr_rad:.4} <= dpo {hr_dpo:.4}; \
             {:.0}s < 1800s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction() -> Outcome {
    let full = LossConfig::default();
    let noisy = sweep(
        &GenConfig { pseudo_negative_rate: 0.3, ..GenConfig::default() },
        &[
            ("full", Method::RadDpo, full.clone()),
            ("no_rdrw", Method::RadDpo, LossConfig { enable_rdrw: false, ..full.clone() }),
        ],
    );
    let shared = sweep(
        &GenConfig { prefix_share_targets: vec![0.9, SHARE_TARGETS[1]], ..GenConfig::default() },
        &[
            ("full", Method::RadDpo, full.clone()),
            ("no_tlgd", Method::RadDpo, LossConfig { enable_tlgd: false, ..full }),
        ],
    );
    let (a, b) = (med(&noisy, "full", false), med(&noisy, "no_rdrw", false));
    let (c, d) = (med(&shared, "full", false), med(&shared, "no_tlgd", false));
    outcome(
        a >= b && c >= d,
        format!("pseudo 0.3: full {a:.4} >= w/o RDRW {b:.4}; prefix share 0.9: full {c:.4} >= w/o TLGD {d:.4}"),
    )
}

// ---- criterion 7 ----

fn small_world(seed: u64) -> World {
    let emb = datagen::synthetic_embeddings(600, EMBED_DIM, &LEVELS, seed);
    let cb = rq_kmeans_fit(&emb, &LEVELS, seed).unwrap();
    let catalog = Catalog::from_embeddings(&cb, &emb).unwrap();
    let gen = GenConfig { seed, n_queries: 50, ..GenConfig::default() };
    let (train, _) = datagen::generate(&GenConfig { sessions: 1000, ..gen.clone() }, &catalog).unwrap();
    let (test, oracle) = datagen::generate(&GenConfig { sessions: 100, day: 1, ..gen }, &catalog).unwrap();
    World { vocab: Vocab::new(&LEVELS, 50), catalog, train, test, oracle }
}

fn parameter_sets() -> Outcome {
    let w = small_world(7);
    let sink = CheckpointSink::default();
    let init = experiment_model(&w.vocab, 7);
    let mut counts = Vec::new();
    for method in [Method::RadDpo, Method::Simpo, Method::Dpo] {
        let cfg = TrainConfig { method, steps: 3, seed: 7, ..TrainConfig::default() };
        let out = train::run_alignment(&cfg, &w.train, &w.vocab, init.clone(), &sink).unwrap();
        counts.push((method.label(), out.param_sets));
    }
    let expected = [("rad_dpo", 1), ("simpo", 1), ("dpo", 2)];
    outcome(counts == expected, format!("{counts:?}"))
}

// ---- criterion 8 ----

fn sid_and_sharing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..RQ_INPUTS).map(|_| (0..16).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let cb = rq_kmeans_fit(&points, &LEVELS, 8).unwrap();
    let errors = cb.residual_errors(&points);
    let non_increasing = errors.windows(2).all(|w| w[1] <= w[0]);

    let emb = datagen::synthetic_embeddings(CATALOG_ITEMS, EMBED_DIM, &LEVELS, 8);
    let catalog = Catalog::from_embeddings(&rq_kmeans_fit(&emb, &LEVELS, 8).unwrap(), &emb).unwrap();
    let gen = GenConfig { sessions: SHARE_PAIRS / 3 + 1, seed: 8, ..GenConfig::default() };
    let (sessions, _) = datagen::generate(&gen, &catalog).unwrap();
    let stats = datagen::measure(&sessions);
    let within = stats.pairs >= SHARE_PAIRS
        && SHARE_TARGETS.iter().zip(&stats.prefix_share).all(|(t, got)| (t - got).abs() <= SHARE_TOL);
    outcome(
        non_increasing && within,
        format!(
            "residual error by level {:?}; prefix share {:.4}/{:.4} over {} pairs (targets 0.346/0.019 +- 0.02)",
            errors.iter().map(|e| (e * 1e4).round() / 1e4).collect::<Vec<_>>(),
            stats.prefix_share[0],
            stats.prefix_share[1],
            stats.pairs
        ),
    )
}

// ---- criterion 9 ----

/// Build, generate, SFT, align and evaluate; returns every artifact as bytes.
fn pipeline() -> (Vec<(String, Vec<u8>)>, bool) {
    let w = small_world(9);
    let sink = CheckpointSink::default();
    let mut artifacts = Vec::new();
    let mut corpus = Vec::new();
    datagen::write_corpus(&mut corpus, &w.train).unwrap();
    artifacts.push(("corpus".into(), corpus));
    let base = TrainConfig { seed: 9, batch_size: 8, ..TrainConfig::default() };
    let sft = train::run_sft(&TrainConfig { steps: 40, ..base.clone() }, &w.train, &w.vocab, experiment_model(&w.vocab, 9), &sink).unwrap();
    let mut runs = vec![("sft", sft)];
    let mut warm = false;
    for method in [Method::RadDpo, Method::Dpo] {
        let cfg = TrainConfig { method, steps: 300, stats_capacity: 256, stats_refresh: 16, ..base.clone() };
        let init = runs[0].1.model.clone();
        let out = train::run_alignment(&cfg, &w.train, &w.vocab, init, &sink).unwrap();
        warm |= out.trace.last().is_some_and(|r| r.warm);
        runs.push((method.label(), out));
    }
    for (label, out) in &runs {
        let mut trace = Vec::new();
        train::write_trace(&mut trace, &out.trace).unwrap();
        artifacts.push((format!("{label} trace"), trace));
        let mut ckpt = Vec::new();
        save_checkpoint(&out.model, &mut ckpt).unwrap();
        artifacts.push((format!("{label} checkpoint"), ckpt));
        artifacts.push((format!("{label} hash"), model_hash(&out.model).into_bytes()));
        let cfg = EvalConfig { label: label.to_string(), beam_width: 128, ..EvalConfig::default() };
        let r = evaluate(&out.model, &w.test, &w.oracle, &w.catalog, &w.vocab, &cfg, "h", &[9]).unwrap();
        artifacts.push((format!("{label} report"), serde_json::to_vec(&r).unwrap()));
    }
    (artifacts, warm)
}

fn determinism() -> Outcome {
    let (a, warm) = pipeline();
    let (b, _) = pipeline();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    // The alignment run has to reach the weighted regime for the check to cover it.
    outcome(
        differing.is_empty() && a.len() == b.len() && warm,
        format!("{} artifacts identical across two runs: {}; reward stats warm {warm}", a.len(), differing.is_empty()),
    )
}
