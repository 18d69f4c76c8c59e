//! Synthetic session logs.
//!
//! A latent map from query to relevant items is drawn first: each query
//! covers one or two level-1 clusters with a handful of items in each, plus
//! a few noise items anywhere in the catalog. Sessions then draw positives
//! from that set and negatives elsewhere. Each negative is a pseudo-negative
//! (actually relevant) with probability `pseudo_negative_rate`, and its
//! shared-prefix depth with the session's anchor positive follows
//! `prefix_share_targets`.
//!
//! Sessions are generated in shards. Shard `s` of day `d` draws from its own
//! ChaCha stream of the global seed, so the corpus does not depend on the
//! thread count. Test data uses a later day with the same latent oracle.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, PackedBatch};
use crate::par;
use crate::sid::{Catalog, ItemId, SemanticId, Vocab};

pub const CORPUS_FORMAT: &str = "raddpo-corpus";
pub const ORACLE_FORMAT: &str = "raddpo-oracle";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("infeasible target: {0}")]
    Infeasible(String),
    #[error("malformed corpus line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Ordered,
    Clicked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ExposedUnclicked,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Positive {
    pub sid: SemanticId,
    pub tier: Tier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negative {
    pub sid: SemanticId,
    pub origin: Origin,
    /// Ground truth kept out of the corpus file.
    #[serde(skip)]
    pub is_pseudo: bool,
}

/// One logged request. Field order is the on-disk order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub query: u32,
    pub history: Vec<SemanticId>,
    pub positives: Vec<Positive>,
    pub negatives: Vec<Negative>,
}

impl Session {
    /// Index of the contrast anchor: the first ordered positive, else the first one.
    pub fn anchor(&self) -> usize {
        self.positives.iter().position(|p| p.tier == Tier::Ordered).unwrap_or(0)
    }

    pub fn anchor_sid(&self) -> &SemanticId {
        &self.positives[self.anchor()].sid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_queries: usize,
    pub sessions: usize,
    /// Day index; later days give held-out sessions under the same oracle.
    pub day: u32,
    pub min_positives: usize,
    pub max_positives: usize,
    /// Probability that a positive is an order rather than a click.
    pub ordered_prob: f64,
    pub n_negatives: usize,
    pub pseudo_negative_rate: f64,
    /// `prefix_share_targets[d]`: probability that a negative shares at least `d + 1` codes with the anchor.
    pub prefix_share_targets: Vec<f64>,
    /// Fraction of negatives labelled exposed-unclicked; the rest are random.
    pub exposed_fraction: f64,
    pub max_history: usize,
    pub min_clusters_per_query: usize,
    pub max_clusters_per_query: usize,
    pub min_items_per_cluster: usize,
    pub max_items_per_cluster: usize,
    pub noise_items: usize,
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_queries: 200,
            sessions: 50_000,
            day: 0,
            min_positives: 1,
            max_positives: 3,
            ordered_prob: 0.25,
            n_negatives: 3,
            pseudo_negative_rate: 0.2,
            prefix_share_targets: vec![0.346, 0.019],
            exposed_fraction: 2.0 / 3.0,
            max_history: 8,
            min_clusters_per_query: 1,
            max_clusters_per_query: 2,
            min_items_per_cluster: 3,
            max_items_per_cluster: 5,
            noise_items: 1,
            shard_size: 512,
            seed: 0,
        }
    }
}

fn prob(name: &str, p: f64) -> Result<(), GenError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(GenError::InvalidConfig(format!("{name} = {p} is not a probability")))
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.to_string()));
        prob("ordered_prob", self.ordered_prob)?;
        prob("pseudo_negative_rate", self.pseudo_negative_rate)?;
        prob("exposed_fraction", self.exposed_fraction)?;
        for &t in &self.prefix_share_targets {
            prob("prefix_share_targets", t)?;
        }
        if self.prefix_share_targets.windows(2).any(|w| w[1] > w[0]) {
            return bad("prefix_share_targets must be non-increasing in depth");
        }
        if self.n_queries == 0 || self.shard_size == 0 {
            return bad("n_queries and shard_size must be positive");
        }
        if self.min_positives == 0 || self.min_positives > self.max_positives {
            return bad("need 1 <= min_positives <= max_positives");
        }
        if self.min_clusters_per_query == 0 || self.min_clusters_per_query > self.max_clusters_per_query {
            return bad("need 1 <= min_clusters_per_query <= max_clusters_per_query");
        }
        if self.min_items_per_cluster == 0 || self.min_items_per_cluster > self.max_items_per_cluster {
            return bad("need 1 <= min_items_per_cluster <= max_items_per_cluster");
        }
        Ok(())
    }

    fn check_feasible(&self, catalog: &Catalog) -> Result<(), GenError> {
        if self.prefix_share_targets.len() > catalog.levels() {
            return Err(GenError::Infeasible(format!(
                "{} prefix depths requested for {} levels",
                self.prefix_share_targets.len(),
                catalog.levels()
            )));
        }
        let clusters = catalog.top_clusters().len();
        let shared = self.prefix_share_targets.first().copied().unwrap_or(0.0);
        if clusters < 2 && shared < 1.0 {
            return Err(GenError::Infeasible("negatives outside the anchor's cluster need two level-1 clusters".into()));
        }
        if clusters < self.min_clusters_per_query {
            return Err(GenError::Infeasible(format!(
                "queries need {} level-1 clusters, catalog has {clusters}",
                self.min_clusters_per_query
            )));
        }
        Ok(())
    }
}

/// Hidden ground truth: relevant items per query, pseudo flags per session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Oracle {
    pub relevant: Vec<Vec<ItemId>>,
    pub pseudo: Vec<Vec<bool>>,
}

impl Oracle {
    pub fn is_relevant(&self, query: u32, item: ItemId) -> bool {
        self.relevant[query as usize].binary_search(&item).is_ok()
    }

    /// Relevant SIDs of `query`, deduplicated and sorted.
    pub fn relevant_sids(&self, query: u32, catalog: &Catalog) -> Vec<SemanticId> {
        let set: BTreeSet<SemanticId> = self.relevant[query as usize].iter().map(|&i| catalog.sid_of(i).clone()).collect();
        set.into_iter().collect()
    }

    /// Restores the pseudo flags of sessions read back from disk.
    pub fn annotate(&self, sessions: &mut [Session]) {
        for (s, flags) in sessions.iter_mut().zip(&self.pseudo) {
            for (n, &f) in s.negatives.iter_mut().zip(flags) {
                n.is_pseudo = f;
            }
        }
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), GenError> {
        let doc = serde_json::json!({ "format": ORACLE_FORMAT, "version": FORMAT_VERSION, "oracle": self });
        serde_json::to_writer(&mut w, &doc)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(r: impl std::io::Read) -> Result<Self, GenError> {
        let mut doc: serde_json::Value = serde_json::from_reader(r)?;
        check_header(&doc, ORACLE_FORMAT, 1)?;
        Ok(serde_json::from_value(doc["oracle"].take())?)
    }
}

/// Item embeddings with a planted residual structure.
///
/// Level `l` has `branching[l]` shared codewords with spread `decay^l`; an
/// item is the sum of one random codeword per level plus small isotropic
/// noise, so residual K-means can recover the hierarchy.
pub fn synthetic_embeddings(n_items: usize, dim: usize, branching: &[usize], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = 0.4;
    let mut spread = 1.0;
    let mut codewords: Vec<Vec<Vec<f64>>> = Vec::new();
    for &b in branching {
        let normal = Normal::new(0.0, spread).expect("positive spread");
        codewords.push((0..b).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect());
        spread *= decay;
    }
    let noise = Normal::new(0.0, spread).expect("positive spread");
    (0..n_items)
        .map(|_| {
            let mut e: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
            for level in &codewords {
                let c = &level[rng.random_range(0..level.len())];
                for (x, o) in e.iter_mut().zip(c) {
                    *x += o;
                }
            }
            e
        })
        .collect()
}

fn sample_distinct<T: Copy>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    pool.choose_multiple(rng, n.min(pool.len())).copied().collect()
}

/// Draws the latent query → relevant-items map.
pub fn sample_oracle(config: &GenConfig, catalog: &Catalog) -> Vec<Vec<ItemId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let clusters = catalog.top_clusters();
    let items_in: Vec<Vec<ItemId>> = clusters
        .iter()
        .map(|&c| (0..catalog.n_items() as ItemId).filter(|&i| catalog.sid_of(i).0[0] == c).collect())
        .collect();
    let all: Vec<ItemId> = (0..catalog.n_items() as ItemId).collect();
    (0..config.n_queries)
        .map(|_| {
            let n_clusters = rng.random_range(config.min_clusters_per_query..=config.max_clusters_per_query);
            let picked: Vec<usize> = sample_distinct(&(0..clusters.len()).collect::<Vec<_>>(), n_clusters, &mut rng);
            let mut rel = BTreeSet::new();
            for c in picked {
                let n = rng.random_range(config.min_items_per_cluster..=config.max_items_per_cluster);
                rel.extend(sample_distinct(&items_in[c], n, &mut rng));
            }
            let mut added = 0;
            while added < config.noise_items && rel.len() < all.len() {
                if rel.insert(*all.choose(&mut rng).expect("nonempty catalog")) {
                    added += 1;
                }
            }
            rel.into_iter().collect()
        })
        .collect()
}

struct ShardContext<'a> {
    config: &'a GenConfig,
    catalog: &'a Catalog,
    relevant: &'a [Vec<ItemId>],
    /// Cumulative-to-exact depth probabilities, index = shared prefix length.
    depth_probs: Vec<f64>,
}

impl ShardContext<'_> {
    fn sample_depth(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (d, p) in self.depth_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return d;
            }
        }
        0
    }

    /// Items at exact shared depth `depth` from `anchor` with the requested relevance.
    fn pool(&self, query: u32, anchor: &SemanticId, depth: usize, pseudo: bool, exclude: &BTreeSet<ItemId>) -> Vec<ItemId> {
        let rel = &self.relevant[query as usize];
        (0..self.catalog.n_items() as ItemId)
            .filter(|i| !exclude.contains(i))
            .filter(|&i| rel.binary_search(&i).is_ok() == pseudo)
            .filter(|&i| self.catalog.sid_of(i).common_prefix(anchor) == depth)
            .collect()
    }

    /// `debt` counts pseudo draws that had no feasible item and are owed to later negatives.
    fn session(&self, rng: &mut ChaCha8Rng, debt: &mut usize) -> (Session, Vec<bool>) {
        let cfg = self.config;
        let query = rng.random_range(0..cfg.n_queries) as u32;
        let rel = &self.relevant[query as usize];
        let n_pos = rng.random_range(cfg.min_positives..=cfg.max_positives).min(rel.len());
        let pos_items = sample_distinct(rel, n_pos, rng);
        let positives: Vec<Positive> = pos_items
            .iter()
            .map(|&i| Positive {
                sid: self.catalog.sid_of(i).clone(),
                tier: if rng.random_bool(cfg.ordered_prob) { Tier::Ordered } else { Tier::Clicked },
            })
            .collect();
        let n_hist = rng.random_range(0..=cfg.max_history);
        let history = (0..n_hist).map(|_| self.catalog.sid_of(*rel.choose(rng).expect("nonempty")).clone()).collect();

        let mut session = Session { query, history, positives, negatives: Vec::new() };
        let anchor = session.anchor_sid().clone();
        let mut exclude: BTreeSet<ItemId> = pos_items.into_iter().collect();
        let mut flags = Vec::with_capacity(cfg.n_negatives);
        for _ in 0..cfg.n_negatives {
            let origin = if rng.random_bool(cfg.exposed_fraction) { Origin::ExposedUnclicked } else { Origin::Random };
            let depth = self.sample_depth(rng);
            let mut pseudo = rng.random_bool(cfg.pseudo_negative_rate);
            let relevant_pool = self.pool(query, &anchor, depth, true, &exclude);
            if pseudo && relevant_pool.is_empty() {
                *debt += 1;
            } else if !pseudo && *debt > 0 && !relevant_pool.is_empty() {
                // repay an earlier infeasible pseudo draw at this depth
                pseudo = true;
                *debt -= 1;
            }
            // keep the depth if possible, then the relevance flag
            let mut order: Vec<(usize, bool)> = vec![(depth, pseudo), (depth, !pseudo)];
            for d in (0..depth).rev().chain(depth + 1..=self.catalog.levels()) {
                order.push((d, pseudo));
                order.push((d, !pseudo));
            }
            let Some((item, is_pseudo)) = order.into_iter().find_map(|(d, p)| {
                let pool = if d == depth && p { relevant_pool.clone() } else { self.pool(query, &anchor, d, p, &exclude) };
                pool.choose(rng).map(|&i| (i, p))
            }) else {
                break;
            };
            exclude.insert(item);
            session.negatives.push(Negative { sid: self.catalog.sid_of(item).clone(), origin, is_pseudo });
            flags.push(is_pseudo);
        }
        (session, flags)
    }
}

fn shard_rng(seed: u64, day: u32, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((day as u64 + 1) << 32) | shard as u64);
    rng
}

/// Generates `config.sessions` sessions and the hidden oracle.
pub fn generate(config: &GenConfig, catalog: &Catalog) -> Result<(Vec<Session>, Oracle), GenError> {
    config.validate()?;
    config.check_feasible(catalog)?;
    let relevant = sample_oracle(config, catalog);
    let mut cumulative = vec![1.0];
    cumulative.extend(&config.prefix_share_targets);
    cumulative.resize(catalog.levels() + 2, 0.0);
    let depth_probs = cumulative.windows(2).map(|w| w[0] - w[1]).collect();
    let ctx = ShardContext { config, catalog, relevant: &relevant, depth_probs };

    let n_shards = config.sessions.div_ceil(config.shard_size);
    let shards = par::map_range(n_shards, |s| {
        let mut rng = shard_rng(config.seed, config.day, s);
        let n = config.shard_size.min(config.sessions - s * config.shard_size);
        let mut debt = 0;
        (0..n).map(|_| ctx.session(&mut rng, &mut debt)).collect::<Vec<_>>()
    });
    let mut sessions = Vec::with_capacity(config.sessions);
    let mut pseudo = Vec::with_capacity(config.sessions);
    for (s, f) in shards.into_iter().flatten() {
        sessions.push(s);
        pseudo.push(f);
    }
    Ok((sessions, Oracle { relevant, pseudo }))
}

/// Measured properties of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub sessions: usize,
    pub pairs: usize,
    pub pseudo_rate: f64,
    /// Fraction of (anchor, negative) pairs sharing at least `d + 1` codes.
    pub prefix_share: Vec<f64>,
}

pub fn measure(sessions: &[Session]) -> GenStats {
    let pairs: Vec<(SemanticId, SemanticId)> = sessions
        .iter()
        .flat_map(|s| s.negatives.iter().map(move |n| (s.anchor_sid().clone(), n.sid.clone())))
        .collect();
    let pseudo = sessions.iter().flat_map(|s| &s.negatives).filter(|n| n.is_pseudo).count();
    GenStats {
        sessions: sessions.len(),
        pairs: pairs.len(),
        pseudo_rate: pseudo as f64 / pairs.len().max(1) as f64,
        prefix_share: crate::sid::prefix_share_stats(&pairs),
    }
}

/// One chosen/rejected pair for pairwise baselines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub session: usize,
    pub chosen: SemanticId,
    pub rejected: SemanticId,
}

/// Decomposes each session into (anchor, negative) pairs.
pub fn split_for_pairwise(sessions: &[Session]) -> Vec<Triple> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let chosen = s.anchor_sid().clone();
            s.negatives.iter().map(move |n| Triple { session: i, chosen: chosen.clone(), rejected: n.sid.clone() })
        })
        .collect()
}

/// `[query, history codes.., SEP]`.
pub fn prompt_tokens(session: &Session, vocab: &Vocab) -> Vec<u32> {
    let mut p = vec![vocab.query_token(session.query)];
    for h in &session.history {
        p.extend(vocab.sid_tokens(h));
    }
    p.push(Vocab::SEP);
    p
}

/// Packs positives then negatives behind the session prompt; the whole
/// packed sequence must fit in `max_seq_len`.
pub fn pack(session: &Session, vocab: &Vocab, max_seq_len: usize) -> Result<PackedBatch, GenError> {
    let prompt = prompt_tokens(session, vocab);
    let cands: Vec<Vec<u32>> = session
        .positives
        .iter()
        .map(|p| vocab.candidate_tokens(&p.sid))
        .chain(session.negatives.iter().map(|n| vocab.candidate_tokens(&n.sid)))
        .collect();
    let total = prompt.len() + cands.iter().map(Vec::len).sum::<usize>();
    if total > max_seq_len {
        return Err(ModelError::SequenceOverflow { len: total, max: max_seq_len }.into());
    }
    Ok(PackedBatch::with_positives(&prompt, &cands, session.positives.len())?)
}

/// Token-level content of a packed session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unpacked {
    pub query: u32,
    pub history: Vec<SemanticId>,
    pub positives: Vec<SemanticId>,
    pub negatives: Vec<SemanticId>,
}

pub fn unpack(batch: &PackedBatch, vocab: &Vocab) -> Option<Unpacked> {
    let (prompt, cands) = batch.unpack();
    let (&q, rest) = prompt.split_first()?;
    let (&sep, hist) = rest.split_last()?;
    if sep != Vocab::SEP || hist.len() % vocab.levels() != 0 {
        return None;
    }
    let history = hist.chunks(vocab.levels()).map(|c| vocab.parse_tokens(c)).collect::<Option<Vec<_>>>()?;
    let sids = cands.iter().map(|c| vocab.parse_tokens(c)).collect::<Option<Vec<_>>>()?;
    let n_pos = batch.n_positives();
    Some(Unpacked {
        query: vocab.token_query(q)?,
        history,
        positives: sids[..n_pos].to_vec(),
        negatives: sids[n_pos..].to_vec(),
    })
}

fn check_header(doc: &serde_json::Value, format: &str, line: usize) -> Result<(), GenError> {
    if doc["format"] != format {
        return Err(GenError::Format { line, reason: format!("expected format {format}") });
    }
    if doc["version"] != FORMAT_VERSION {
        return Err(GenError::Format { line, reason: format!("unsupported version {}", doc["version"]) });
    }
    Ok(())
}

/// Writes a header line then one session per line.
pub fn write_corpus(mut w: impl Write, sessions: &[Session]) -> Result<(), GenError> {
    let header = serde_json::json!({
        "format": CORPUS_FORMAT,
        "version": FORMAT_VERSION,
        "fields": ["query", "history", "positives", "negatives"],
        "sessions": sessions.len(),
    });
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in sessions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<Session>, GenError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(GenError::Format { line: 1, reason: "empty file".into() })??;
    let header: serde_json::Value = serde_json::from_str(&header)?;
    check_header(&header, CORPUS_FORMAT, 1)?;
    let mut sessions = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line).map_err(|e| GenError::Format { line: i + 2, reason: e.to_string() })?;
        if s.positives.is_empty() {
            return Err(GenError::Format { line: i + 2, reason: "session without positives".into() });
        }
        sessions.push(s);
    }
    if header["sessions"] != sessions.len() {
        return Err(GenError::Format { line: 1, reason: "session count does not match header".into() });
    }
    Ok(sessions)
}
