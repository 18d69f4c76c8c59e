//! Training objectives.
//!
//! The alignment objective for one session is
//!
//! ```text
//! L = L_sft + L_pl
//! L_sft = -(1/|P|) Σ_{y∈P} log π(y|x)
//! L_pl  = -log σ( β · log Σ_j exp( w_j · (r(y*) - r(y_j)) ) ),   r(y) = log π(y|x) / |y|
//! ```
//!
//! where `y*` is the top-tier positive and `y_j` the negatives. With prefix
//! detachment on, `log π(y_j|x)` keeps its value but passes no gradient
//! through the tokens it shares with `y*`. The weights `w_j` come from the
//! cosine similarity of EOS hidden states, mapped through rolling quartiles
//! ([`RewardStats`]). Pairwise DPO and SimPO baselines live here as well.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AutodiffError, Tensor, Var};
use crate::model::{Forward, ModelError, PackedBatch};
use crate::sid::Vocab;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no positive candidates")]
    EmptyPositives,
    #[error("no negative candidates")]
    EmptyNegatives,
    #[error("candidate length must be at least 1")]
    ZeroLength,
    #[error("DPO needs reference log-probabilities")]
    MissingReference,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("prefix mask covers {mask} tokens but the candidate has {tokens}")]
    MaskLength { mask: usize, tokens: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Contrast temperature of the list-wise preference term.
    pub beta: f64,
    /// Steepness of the penalty-weight transition.
    pub lambda: f64,
    pub n_negatives: usize,
    pub enable_tlgd: bool,
    pub enable_rdrw: bool,
    pub enable_multilabel_sft: bool,
    /// Multiplier on the SFT term (1:1 by default).
    pub sft_weight: f64,
    pub dpo_beta: f64,
    pub simpo_beta: f64,
    pub simpo_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 12.0,
            n_negatives: 3,
            enable_tlgd: true,
            enable_rdrw: true,
            enable_multilabel_sft: true,
            sft_weight: 1.0,
            dpo_beta: 0.1,
            simpo_beta: 2.0,
            simpo_gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.n_negatives == 0 {
            return bad("n_negatives must be at least 1");
        }
        if !(self.dpo_beta > 0.0) || !(self.simpo_beta > 0.0) {
            return bad("baseline betas must be positive");
        }
        if !(self.sft_weight >= 0.0) {
            return bad("sft_weight must be non-negative");
        }
        Ok(())
    }
}

/// Longest common prefix of two candidates' code tokens; EOS ends the comparison.
pub fn longest_common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter()
        .zip(b)
        .take_while(|(x, y)| x == y && **x != Vocab::EOS)
        .count()
}

/// Which tokens of a negative keep their gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixMask {
    /// Shared prefix length with the anchor positive.
    pub k: usize,
    /// `live[t]` is the indicator for 1-based token `t + 1`: false inside the shared prefix.
    pub live: Vec<bool>,
}

impl PrefixMask {
    pub fn new(anchor: &[u32], negative: &[u32]) -> Self {
        Self::from_k(longest_common_prefix(anchor, negative), negative.len())
    }

    pub fn from_k(k: usize, len: usize) -> Self {
        Self { k, live: (0..len).map(|t| t + 1 > k).collect() }
    }
}

/// Negative log-likelihood whose shared-prefix tokens are stop-gradient.
///
/// Forward value is bitwise the plain sum of `token_logprobs`.
pub fn detached_neg_logprob<'t>(token_logprobs: Var<'t>, mask: &PrefixMask) -> Result<Var<'t>, LossError> {
    let n = token_logprobs.value().len();
    if mask.live.len() != n {
        return Err(LossError::MaskLength { mask: mask.live.len(), tokens: n });
    }
    let tape = token_logprobs.tape();
    let live = Tensor::vector(mask.live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
    let dead = Tensor::vector(mask.live.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect());
    let frozen = token_logprobs.stop_gradient().mul(tape.constant(dead))?;
    let flowing = token_logprobs.mul(tape.constant(live))?;
    Ok(frozen.add(flowing)?.sum())
}

/// Length-normalised log-probability.
pub fn implicit_reward<'t>(logprob: Var<'t>, length: usize) -> Result<Var<'t>, LossError> {
    if length == 0 {
        return Err(LossError::ZeroLength);
    }
    Ok(logprob.div_scalar(length as f64))
}

/// Cosine similarity; a zero-norm input yields 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        log::warn!("cosine similarity of a zero vector; using 0");
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Quantile of sorted data by linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Rolling similarity buffer with quartile anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    buffer: Vec<f64>,
    capacity: usize,
    head: usize,
    warm: bool,
    refresh_every: u64,
    updates: u64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

pub const DEFAULT_STATS_CAPACITY: usize = 4096;
pub const DEFAULT_REFRESH_STEPS: u64 = 256;

impl Default for RewardStats {
    fn default() -> Self {
        Self::new(DEFAULT_STATS_CAPACITY, DEFAULT_REFRESH_STEPS)
    }
}

impl RewardStats {
    pub fn new(capacity: usize, refresh_every: u64) -> Self {
        assert!(capacity > 0 && refresh_every > 0);
        Self {
            buffer: Vec::with_capacity(capacity),
            capacity,
            head: 0,
            warm: false,
            refresh_every,
            updates: 0,
            q25: 0.0,
            q50: 0.0,
            q75: 0.0,
        }
    }

    pub fn is_warm(&self) -> bool {
        self.warm
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    /// Appends one step's similarities. Anchors are computed when the buffer
    /// first fills and then every `refresh_every` updates.
    pub fn update(&mut self, sims: &[f64]) {
        for &s in sims {
            if self.buffer.len() < self.capacity {
                self.buffer.push(s);
            } else {
                self.buffer[self.head] = s;
            }
            self.head = (self.head + 1) % self.capacity;
        }
        self.updates += 1;
        if !self.warm && self.buffer.len() == self.capacity {
            self.warm = true;
            self.refresh();
        } else if self.warm && self.updates % self.refresh_every == 0 {
            self.refresh();
        }
    }

    /// Recomputes the anchors from the current buffer.
    pub fn refresh(&mut self) {
        if self.buffer.is_empty() {
            return;
        }
        let mut sorted = self.buffer.clone();
        sorted.sort_by(f64::total_cmp);
        self.q25 = quantile_sorted(&sorted, 0.25);
        self.q50 = quantile_sorted(&sorted, 0.50);
        self.q75 = quantile_sorted(&sorted, 0.75);
    }

    /// Penalty weight for a negative with similarity `sim`; 1.0 during warm-up.
    pub fn weight(&self, sim: f64, lambda: f64) -> f64 {
        if !self.warm {
            return 1.0;
        }
        penalty_weight(sim, self.q25, self.q50, self.q75, lambda)
    }
}

/// Appends `sims` to the buffer; see [`RewardStats::update`].
pub fn update_stats(stats: &mut RewardStats, sims: &[f64]) {
    stats.update(sims);
}

/// Piecewise penalty: 1 below `q25`, 0.5 above `q75`, a sigmoid around `q50` between.
pub fn penalty_weight(sim: f64, q25: f64, q50: f64, q75: f64, lambda: f64) -> f64 {
    if sim < q25 {
        1.0
    } else if sim > q75 {
        0.5
    } else {
        0.5 + 0.5 * sigmoid(-lambda * (sim - q50))
    }
}

/// Mean negative log-likelihood over the positives (no length normalisation).
pub fn sft_loss<'t>(positive_logprobs: &[Var<'t>]) -> Result<Var<'t>, LossError> {
    let first = positive_logprobs.first().ok_or(LossError::EmptyPositives)?;
    let stacked = first.tape().stack(positive_logprobs)?;
    Ok(stacked.sum().div_scalar(positive_logprobs.len() as f64).neg())
}

/// List-wise contrast of the anchor reward against every negative reward.
pub fn pl_loss<'t>(anchor_reward: Var<'t>, negative_rewards: &[Var<'t>], weights: &[f64], beta: f64) -> Result<Var<'t>, LossError> {
    if negative_rewards.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    if weights.len() != negative_rewards.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "pl_loss weights",
            lhs: vec![negative_rewards.len()],
            rhs: vec![weights.len()],
        }
        .into());
    }
    let gaps = negative_rewards
        .iter()
        .zip(weights)
        .map(|(r, &w)| Ok(anchor_reward.sub(*r)?.scale(w)))
        .collect::<Result<Vec<_>, AutodiffError>>()?;
    let lse = anchor_reward.tape().stack(&gaps)?.logsumexp();
    Ok(lse.scale(beta).log_sigmoid().neg())
}

/// `-log σ(β[(π_w - ref_w) - (π_l - ref_l)])`; `reference` holds `(ref_w, ref_l)`.
pub fn dpo_pair_loss<'t>(policy_w: Var<'t>, policy_l: Var<'t>, reference: Option<(f64, f64)>, beta: f64) -> Result<Var<'t>, LossError> {
    let (ref_w, ref_l) = reference.ok_or(LossError::MissingReference)?;
    let tape = policy_w.tape();
    let chosen = policy_w.sub(tape.scalar(ref_w))?;
    let rejected = policy_l.sub(tape.scalar(ref_l))?;
    Ok(chosen.sub(rejected)?.scale(beta).log_sigmoid().neg())
}

/// `-log σ(β(r_w - r_l) - γ)` on length-normalised rewards.
pub fn simpo_pair_loss<'t>(reward_w: Var<'t>, reward_l: Var<'t>, beta: f64, gamma: f64) -> Result<Var<'t>, LossError> {
    let tape = reward_w.tape();
    let margin = reward_w.sub(reward_l)?.scale(beta).sub(tape.scalar(gamma))?;
    Ok(margin.log_sigmoid().neg())
}

/// One candidate's slice of a packed forward.
pub struct CandidateOutput<'t> {
    pub tokens: Vec<u32>,
    pub token_logprobs: Var<'t>,
    pub eos_hidden: Vec<f64>,
}

impl<'t> CandidateOutput<'t> {
    pub fn logprob(&self) -> Var<'t> {
        self.token_logprobs.sum()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Positives and negatives of one packed session.
pub struct SessionOutputs<'t> {
    pub positives: Vec<CandidateOutput<'t>>,
    /// Index of the top-tier positive within `positives`.
    pub anchor: usize,
    pub negatives: Vec<CandidateOutput<'t>>,
}

impl<'t> SessionOutputs<'t> {
    /// Splits a forward over `batch` into positives (first `n_positives` segments) and negatives.
    pub fn from_forward(fwd: &Forward<'t>, batch: &PackedBatch, anchor: usize) -> Result<Self, LossError> {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for seg in 0..batch.n_candidates() {
            let out = CandidateOutput {
                tokens: batch.candidate(seg)?.to_vec(),
                token_logprobs: fwd.token_logprobs(batch, seg)?,
                eos_hidden: fwd.eos_hidden(batch, seg)?,
            };
            if seg < batch.n_positives() {
                positives.push(out);
            } else {
                negatives.push(out);
            }
        }
        if anchor >= positives.len() {
            return Err(LossError::EmptyPositives);
        }
        Ok(Self { positives, anchor, negatives })
    }
}

/// Scalar diagnostics of one session's objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sft: f64,
    pub pl: f64,
    pub sims: Vec<f64>,
    pub weights: Vec<f64>,
    pub prefix_lengths: Vec<usize>,
}

/// SFT + list-wise preference loss with the configured ablation flags.
pub fn total_loss<'t>(
    out: &SessionOutputs<'t>,
    config: &LossConfig,
    stats: &RewardStats,
) -> Result<(Var<'t>, LossParts), LossError> {
    let anchor = out.positives.get(out.anchor).ok_or(LossError::EmptyPositives)?;
    if out.negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    let sft_terms: Vec<Var<'t>> = if config.enable_multilabel_sft {
        out.positives.iter().map(CandidateOutput::logprob).collect()
    } else {
        vec![anchor.logprob()]
    };
    let sft = sft_loss(&sft_terms)?;

    let anchor_reward = implicit_reward(anchor.logprob(), anchor.len())?;
    let mut rewards = Vec::with_capacity(out.negatives.len());
    let mut parts = LossParts::default();
    for neg in &out.negatives {
        let mask = PrefixMask::new(&anchor.tokens, &neg.tokens);
        let lp = if config.enable_tlgd {
            detached_neg_logprob(neg.token_logprobs, &mask)?
        } else {
            neg.logprob()
        };
        rewards.push(implicit_reward(lp, neg.len())?);
        let sim = cosine_sim(&anchor.eos_hidden, &neg.eos_hidden);
        let w = if config.enable_rdrw { stats.weight(sim, config.lambda) } else { 1.0 };
        parts.sims.push(sim);
        parts.weights.push(w);
        parts.prefix_lengths.push(mask.k);
    }
    let pl = pl_loss(anchor_reward, &rewards, &parts.weights, config.beta)?;
    parts.sft = sft.item();
    parts.pl = pl.item();
    let total = sft.scale(config.sft_weight).add(pl)?;
    Ok((total, parts))
}
