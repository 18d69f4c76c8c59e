//! Two-stage training: SFT on positive paths, then preference alignment.
//!
//! Each step draws `batch_size` sessions, computes every session's gradient on
//! its own tape (in parallel when enabled), sums them in session order and
//! takes one clipped Adam step. Results do not depend on the thread count.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::{self, GenError, Session};
use crate::losses::{
    dpo_pair_loss, implicit_reward, simpo_pair_loss, sft_loss, total_loss, LossConfig, LossError, RewardStats,
    SessionOutputs,
};
use crate::model::{save_checkpoint, Model, ModelError};
use crate::par;
use crate::provenance::model_hash;
use crate::sid::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("method dpo needs a reference model")]
    MissingReference,
    #[error("reference model changed during training")]
    StaleReference,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] GenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Align,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RadDpo,
    Dpo,
    Simpo,
    SftOnly,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::RadDpo => "rad_dpo",
            Method::Dpo => "dpo",
            Method::Simpo => "simpo",
            Method::SftOnly => "sft_only",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rad_dpo" => Ok(Method::RadDpo),
            "dpo" => Ok(Method::Dpo),
            "simpo" => Ok(Method::Simpo),
            "sft_only" => Ok(Method::SftOnly),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub stats_capacity: usize,
    pub stats_refresh: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Align,
            method: Method::RadDpo,
            lr: 3e-4,
            batch_size: 16,
            steps: 3000,
            seed: 0,
            loss: LossConfig::default(),
            max_grad_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            stats_capacity: crate::losses::DEFAULT_STATS_CAPACITY,
            stats_refresh: crate::losses::DEFAULT_REFRESH_STEPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and eps be positive");
        }
        if self.stats_capacity == 0 || self.stats_refresh == 0 {
            return bad("stats capacity and refresh interval must be positive");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Model, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, lr, b1, b2, eps }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.b1 * *m + (1.0 - self.b1) * g;
                *v = self.b2 * *v + (1.0 - self.b2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub sft: f64,
    pub pl: f64,
    pub grad_norm: f64,
    pub warm: bool,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub mean_weight: f64,
    /// Counts of weights in [0.5, 0.625), [0.625, 0.75), [0.75, 0.875), [0.875, 1].
    pub weight_hist: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub trace: Vec<StepRecord>,
    pub stats: Option<RewardStats>,
    /// Number of full parameter sets held by the run.
    pub param_sets: usize,
}

/// Per-step batch order: an epoch permutation, reshuffled when exhausted.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Gradient and diagnostics of one session's loss.
struct SessionResult {
    grads: Vec<Vec<f64>>,
    loss: f64,
    sft: f64,
    pl: f64,
    sims: Vec<f64>,
    weights: Vec<f64>,
}

fn grads_of(tape: &Tape, loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Vec<f64>>, TrainError> {
    let g = tape.backward(loss).map_err(LossError::from)?;
    Ok(params.iter().map(|p| g.wrt(*p).into_data()).collect())
}

struct Job<'a> {
    config: &'a TrainConfig,
    vocab: &'a Vocab,
    policy: &'a Model,
    reference: Option<&'a Model>,
    stats: &'a RewardStats,
}

impl Job<'_> {
    fn sft_session(&self, s: &Session) -> Result<SessionResult, TrainError> {
        let only_pos = Session { negatives: Vec::new(), ..s.clone() };
        let batch = datagen::pack(&only_pos, self.vocab, self.policy.config.max_seq_len)?;
        let tape = Tape::new();
        let fwd = self.policy.forward_packed(&tape, &batch, true)?;
        let lps = if self.config.loss.enable_multilabel_sft {
            (0..batch.n_candidates()).map(|c| fwd.candidate_logprob(&batch, c)).collect::<Result<Vec<_>, _>>()?
        } else {
            vec![fwd.candidate_logprob(&batch, s.anchor())?]
        };
        let loss = sft_loss(&lps)?;
        let value = loss.item();
        Ok(SessionResult { grads: grads_of(&tape, loss, &fwd.params)?, loss: value, sft: value, pl: 0.0, sims: vec![], weights: vec![] })
    }

    fn rad_dpo_session(&self, s: &Session) -> Result<SessionResult, TrainError> {
        let batch = datagen::pack(s, self.vocab, self.policy.config.max_seq_len)?;
        let tape = Tape::new();
        let fwd = self.policy.forward_packed(&tape, &batch, true)?;
        let out = SessionOutputs::from_forward(&fwd, &batch, s.anchor())?;
        let (loss, parts) = total_loss(&out, &self.config.loss, self.stats)?;
        Ok(SessionResult {
            grads: grads_of(&tape, loss, &fwd.params)?,
            loss: loss.item(),
            sft: parts.sft,
            pl: parts.pl,
            sims: parts.sims,
            weights: parts.weights,
        })
    }

    /// Sum over this session's (anchor, negative) pairs; the caller divides by the pair count.
    fn pairwise_session(&self, s: &Session) -> Result<SessionResult, TrainError> {
        let anchor = s.anchor();
        let reduced = Session { positives: vec![s.positives[anchor].clone()], ..s.clone() };
        let batch = datagen::pack(&reduced, self.vocab, self.policy.config.max_seq_len)?;
        let tape = Tape::new();
        let fwd = self.policy.forward_packed(&tape, &batch, true)?;
        let lens: Vec<usize> = (0..batch.n_candidates()).map(|c| batch.candidate(c).map(<[u32]>::len)).collect::<Result<_, _>>()?;
        let lps = (0..batch.n_candidates()).map(|c| fwd.candidate_logprob(&batch, c)).collect::<Result<Vec<_>, _>>()?;
        let ref_lps: Option<Vec<f64>> = match (self.config.method, self.reference) {
            (Method::Dpo, Some(r)) => {
                let rt = Tape::new();
                let rf = r.forward_packed(&rt, &batch, false)?;
                Some((0..batch.n_candidates()).map(|c| rf.candidate_logprob(&batch, c).map(|v| v.item())).collect::<Result<_, _>>()?)
            }
            (Method::Dpo, None) => return Err(TrainError::MissingReference),
            _ => None,
        };
        let cfg = &self.config.loss;
        let mut terms = Vec::with_capacity(s.negatives.len());
        for j in 1..batch.n_candidates() {
            let t = match &ref_lps {
                Some(r) => dpo_pair_loss(lps[0], lps[j], Some((r[0], r[j])), cfg.dpo_beta)?,
                None => simpo_pair_loss(
                    implicit_reward(lps[0], lens[0])?,
                    implicit_reward(lps[j], lens[j])?,
                    cfg.simpo_beta,
                    cfg.simpo_gamma,
                )?,
            };
            terms.push(t);
        }
        if terms.is_empty() {
            let params = &fwd.params;
            return Ok(SessionResult {
                grads: params.iter().map(|p| vec![0.0; p.value().len()]).collect(),
                loss: 0.0,
                sft: 0.0,
                pl: 0.0,
                sims: vec![],
                weights: vec![],
            });
        }
        let loss = tape.stack(&terms).map_err(LossError::from)?.sum();
        let value = loss.item();
        Ok(SessionResult { grads: grads_of(&tape, loss, &fwd.params)?, loss: value, sft: 0.0, pl: value, sims: vec![], weights: vec![] })
    }

    fn run(&self, s: &Session) -> Result<SessionResult, TrainError> {
        match (self.config.stage, self.config.method) {
            (Stage::Sft, _) | (Stage::Align, Method::SftOnly) => self.sft_session(s),
            (Stage::Align, Method::RadDpo) => self.rad_dpo_session(s),
            (Stage::Align, Method::Dpo | Method::Simpo) => self.pairwise_session(s),
        }
    }
}

fn weight_hist(weights: &[f64]) -> [usize; 4] {
    let mut h = [0; 4];
    for &w in weights {
        let b = (((w - 0.5) / 0.125).floor() as isize).clamp(0, 3) as usize;
        h[b] += 1;
    }
    h
}

/// Where and how often to write checkpoints during a run.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    fn write(&self, model: &Model, step: usize) -> Result<(), TrainError> {
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::File::create(dir.join(format!("step_{step:06}.ckpt")))?;
            save_checkpoint(model, std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

fn train_loop(
    config: &TrainConfig,
    sessions: &[Session],
    vocab: &Vocab,
    mut model: Model,
    reference: Option<&Model>,
    sink: &CheckpointSink,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if sessions.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let pairwise = config.stage == Stage::Align && matches!(config.method, Method::Dpo | Method::Simpo);
    let rad = config.stage == Stage::Align && config.method == Method::RadDpo;
    let ref_hash = reference.map(model_hash);
    let mut stats = RewardStats::new(config.stats_capacity, config.stats_refresh);
    let mut adam = Adam::new(&model, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut sampler = Sampler::new(sessions.len(), config.seed);
    let mut trace = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let idx = sampler.next_batch(config.batch_size);
        let batch: Vec<&Session> = idx.iter().map(|&i| &sessions[i]).collect();
        let job = Job { config, vocab, policy: &model, reference, stats: &stats };
        let results = par::map(&batch, |s| job.run(s));

        let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let (mut loss, mut sft, mut pl) = (0.0, 0.0, 0.0);
        let mut sims = Vec::new();
        let mut weights = Vec::new();
        let mut pairs = 0usize;
        for (r, s) in results.into_iter().zip(&batch) {
            let r = r?;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            loss += r.loss;
            sft += r.sft;
            pl += r.pl;
            sims.extend(r.sims);
            weights.extend(r.weights);
            pairs += s.negatives.len();
        }
        let denom = if pairwise { pairs.max(1) } else { batch.len() } as f64;
        grads.iter_mut().flatten().for_each(|g| *g /= denom);
        let (loss, sft, pl) = (loss / denom, sft / denom, pl / denom);
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            log::error!("non-finite loss at step {step}");
            return Err(TrainError::Divergence { step });
        }
        let grad_norm = clip_global_norm(&mut grads, config.max_grad_norm);
        adam.step(&mut model, &grads);
        if rad {
            stats.update(&sims);
        }
        let mean_weight = if weights.is_empty() { 1.0 } else { weights.iter().sum::<f64>() / weights.len() as f64 };
        trace.push(StepRecord {
            step,
            loss,
            sft,
            pl,
            grad_norm,
            warm: stats.is_warm(),
            q25: stats.q25,
            q50: stats.q50,
            q75: stats.q75,
            mean_weight,
            weight_hist: weight_hist(&weights),
        });
        if step % 100 == 0 {
            log::info!("step {step} loss {loss:.5} sft {sft:.5} pl {pl:.5}");
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            sink.write(&model, step)?;
        }
    }
    if let (Some(r), Some(h)) = (reference, ref_hash) {
        if model_hash(r) != h {
            return Err(TrainError::StaleReference);
        }
    }
    Ok(TrainOutput {
        model,
        trace,
        stats: rad.then_some(stats),
        param_sets: 1 + reference.is_some() as usize,
    })
}

/// Supervised stage: mean NLL of every positive.
pub fn run_sft(config: &TrainConfig, sessions: &[Session], vocab: &Vocab, init: Model, sink: &CheckpointSink) -> Result<TrainOutput, TrainError> {
    let cfg = TrainConfig { stage: Stage::Sft, ..config.clone() };
    train_loop(&cfg, sessions, vocab, init, None, sink)
}

/// Alignment stage from an SFT model. For `dpo` a frozen copy of `init`
/// becomes the reference; the other methods hold only the policy.
pub fn run_alignment(config: &TrainConfig, sessions: &[Session], vocab: &Vocab, init: Model, sink: &CheckpointSink) -> Result<TrainOutput, TrainError> {
    let cfg = TrainConfig { stage: Stage::Align, ..config.clone() };
    let reference = (cfg.method == Method::Dpo).then(|| init.clone());
    train_loop(&cfg, sessions, vocab, init, reference.as_ref(), sink)
}

/// Alignment with an explicit reference model (required for `dpo`).
pub fn run_alignment_with_reference(
    config: &TrainConfig,
    sessions: &[Session],
    vocab: &Vocab,
    init: Model,
    reference: Option<&Model>,
    sink: &CheckpointSink,
) -> Result<TrainOutput, TrainError> {
    let cfg = TrainConfig { stage: Stage::Align, ..config.clone() };
    if cfg.method == Method::Dpo && reference.is_none() {
        return Err(TrainError::MissingReference);
    }
    let reference = if cfg.method == Method::Dpo { reference } else { None };
    train_loop(&cfg, sessions, vocab, init, reference, sink)
}

/// Writes the trace as one JSON object per line.
pub fn write_trace(mut w: impl std::io::Write, trace: &[StepRecord]) -> std::io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads a model for training: fresh weights sized for `vocab`.
pub fn fresh_model(vocab: &Vocab, model_config: &crate::model::ModelConfig) -> Result<Model, TrainError> {
    let cfg = crate::model::ModelConfig { vocab_size: vocab.size(), ..model_config.clone() };
    Ok(Model::init(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, synthetic_embeddings, GenConfig, Negative, Origin, Positive, Tier};
    use crate::model::ModelConfig;
    use crate::sid::{rq_kmeans_fit, Catalog, SemanticId};

    fn setup(n: usize) -> (Vec<Session>, Vocab, Model) {
        let emb = synthetic_embeddings(300, 16, &[4, 4, 4], 1);
        let cb = rq_kmeans_fit(&emb, &[4, 4, 4], 1).unwrap();
        let cat = Catalog::from_embeddings(&cb, &emb).unwrap();
        let gen = GenConfig { sessions: n, n_queries: 20, max_history: 2, seed: 3, ..Default::default() };
        let (sessions, _) = generate(&gen, &cat).unwrap();
        let vocab = Vocab::new(&[4, 4, 4], 20);
        let mc = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 40, ..ModelConfig::new(vocab.size()) };
        let model = fresh_model(&vocab, &mc).unwrap();
        (sessions, vocab, model)
    }

    fn cfg(method: Method, steps: usize) -> TrainConfig {
        TrainConfig { method, steps, batch_size: 4, lr: 1e-3, ..Default::default() }
    }

    #[test]
    fn first_sft_step_matches_uniform_nll() {
        let (sessions, vocab, model) = setup(50);
        let out = run_sft(&cfg(Method::SftOnly, 1), &sessions, &vocab, model, &CheckpointSink::default()).unwrap();
        let expect = 4.0 * (vocab.size() as f64).ln();
        assert!((out.trace[0].loss - expect).abs() < 0.05 * expect, "{} vs {expect}", out.trace[0].loss);
    }

    #[test]
    fn parameter_set_counts() {
        let (sessions, vocab, model) = setup(30);
        let sink = CheckpointSink::default();
        for (m, n) in [(Method::RadDpo, 1), (Method::Simpo, 1), (Method::Dpo, 2), (Method::SftOnly, 1)] {
            let out = run_alignment(&cfg(m, 2), &sessions, &vocab, model.clone(), &sink).unwrap();
            assert_eq!(out.param_sets, n, "{m:?}");
        }
        let err = run_alignment_with_reference(&cfg(Method::Dpo, 1), &sessions, &vocab, model, None, &sink).unwrap_err();
        assert!(matches!(err, TrainError::MissingReference));
    }

    #[test]
    fn same_seed_gives_identical_checkpoint() {
        let (sessions, vocab, model) = setup(60);
        let sink = CheckpointSink::default();
        let a = run_alignment(&cfg(Method::RadDpo, 5), &sessions, &vocab, model.clone(), &sink).unwrap();
        let b = run_alignment(&cfg(Method::RadDpo, 5), &sessions, &vocab, model, &sink).unwrap();
        assert_eq!(model_hash(&a.model), model_hash(&b.model));
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn warm_flips_at_expected_step() {
        let (sessions, vocab, model) = setup(200);
        let c = TrainConfig { stats_capacity: 40, ..cfg(Method::RadDpo, 6) };
        // 4 sessions x 3 negatives = 12 pairs per step: ceil(40 / 12) = 4
        let out = run_alignment(&c, &sessions, &vocab, model, &CheckpointSink::default()).unwrap();
        let first_warm = out.trace.iter().find(|r| r.warm).unwrap().step;
        assert_eq!(first_warm, 4);
        assert!(out.trace[..3].iter().all(|r| r.mean_weight == 1.0));
    }

    #[test]
    fn divergence_is_reported() {
        let (sessions, vocab, mut model) = setup(20);
        model.params[1].data_mut()[0] = f64::NAN;
        let err = run_sft(&cfg(Method::SftOnly, 3), &sessions, &vocab, model, &CheckpointSink::default()).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { step: 1 }));
    }

    #[test]
    fn overfits_sixteen_items() {
        let vocab = Vocab::new(&[4, 4, 4], 16);
        let sessions: Vec<Session> = (0..16u32)
            .map(|q| Session {
                query: q,
                history: vec![],
                positives: vec![Positive { sid: SemanticId(vec![q % 4, q / 4, (q * 3) % 4]), tier: Tier::Clicked }],
                negatives: vec![Negative { sid: SemanticId(vec![(q + 1) % 4, 0, 0]), origin: Origin::Random, is_pseudo: false }],
            })
            .collect();
        let mc = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 8, ..ModelConfig::new(vocab.size()) };
        let model = fresh_model(&vocab, &mc).unwrap();
        let c = TrainConfig { steps: 2000, batch_size: 16, lr: 3e-3, ..cfg(Method::SftOnly, 0) };
        let out = run_sft(&c, &sessions, &vocab, model, &CheckpointSink::default()).unwrap();
        let last = out.trace.last().unwrap().loss;
        assert!(last < 0.1, "final NLL {last}");
    }

    #[test]
    fn checkpoints_written_on_cadence() {
        let (sessions, vocab, model) = setup(20);
        let dir = std::env::temp_dir().join(format!("raddpo-ckpt-{}", std::process::id()));
        let sink = CheckpointSink { dir: Some(dir.clone()) };
        let c = TrainConfig { checkpoint_every: 2, ..cfg(Method::SftOnly, 5) };
        let out = run_sft(&c, &sessions, &vocab, model, &sink).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, vec!["step_000002.ckpt", "step_000004.ckpt"]);
        let back = crate::model::load_checkpoint(std::fs::File::open(dir.join("step_000004.ckpt")).unwrap()).unwrap();
        assert_eq!(back.config, out.model.config);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
