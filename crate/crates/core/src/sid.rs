//! Hierarchical semantic IDs.
//!
//! Items are quantised by residual K-means: level 1 clusters the raw
//! embeddings, every later level clusters what is left after subtracting the
//! centroids already chosen. The per-level indices form the item's
//! [`SemanticId`]. Several items may land on the same ID; the [`Catalog`]
//! keeps all of them and exposes a prefix trie for constrained decoding and
//! hallucination checks.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type ItemId = u32;

#[derive(Debug, thiserror::Error)]
pub enum SidError {
    #[error("no embeddings to fit")]
    EmptyInput,
    #[error("codebook size {size} exceeds point count {points}")]
    TooFewPoints { size: usize, points: usize },
    #[error("embedding dimension {got} does not match codebook dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("code {code} out of range for level {level} (size {size})")]
    CodeOutOfRange { level: usize, code: u32, size: usize },
    #[error("prefix of length {len} longer than level count {levels}")]
    PrefixTooLong { len: usize, levels: usize },
    #[error("malformed semantic id {0:?}")]
    Parse(String),
    #[error("malformed catalog line {line}: {reason}")]
    CatalogFormat { line: usize, reason: String },
    #[error("duplicate item {0}")]
    DuplicateItem(ItemId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-level codebook indices of one item cluster.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Number of leading codes shared with `other`.
    pub fn common_prefix(&self, other: &SemanticId) -> usize {
        self.0.iter().zip(&other.0).take_while(|(a, b)| a == b).count()
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for SemanticId {
    type Err = SidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let codes = s
            .split('-')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| SidError::Parse(s.to_string()))?;
        if codes.is_empty() {
            return Err(SidError::Parse(s.to_string()));
        }
        Ok(SemanticId(codes))
    }
}

/// Token layout shared by prompts and candidates.
///
/// `[PAD, EOS, SEP, level-1 codes.., level-2 codes.., .., query tokens..]`.
/// Every level owns a disjoint id range, so a code token identifies both its
/// level and its index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    level_sizes: Vec<usize>,
    level_offsets: Vec<usize>,
    query_offset: usize,
    n_queries: usize,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const EOS: u32 = 1;
    pub const SEP: u32 = 2;
    const SPECIALS: usize = 3;

    pub fn new(level_sizes: &[usize], n_queries: usize) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len());
        let mut next = Self::SPECIALS;
        for &s in level_sizes {
            offsets.push(next);
            next += s;
        }
        Self {
            level_sizes: level_sizes.to_vec(),
            level_offsets: offsets,
            query_offset: next,
            n_queries,
        }
    }

    pub fn size(&self) -> usize {
        self.query_offset + self.n_queries
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn code_token(&self, level: usize, code: u32) -> u32 {
        (self.level_offsets[level] + code as usize) as u32
    }

    /// Code index of `token` if it belongs to `level`'s range.
    pub fn token_code(&self, level: usize, token: u32) -> Option<u32> {
        let off = self.level_offsets[level];
        let t = token as usize;
        (t >= off && t < off + self.level_sizes[level]).then(|| (t - off) as u32)
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<u32> {
        let off = self.level_offsets[level] as u32;
        off..off + self.level_sizes[level] as u32
    }

    pub fn query_token(&self, query: u32) -> u32 {
        (self.query_offset + query as usize) as u32
    }

    pub fn token_query(&self, token: u32) -> Option<u32> {
        let t = token as usize;
        (t >= self.query_offset && t < self.size()).then(|| (t - self.query_offset) as u32)
    }

    /// Code tokens of `sid`, without EOS.
    pub fn sid_tokens(&self, sid: &SemanticId) -> Vec<u32> {
        sid.0
            .iter()
            .enumerate()
            .map(|(l, &c)| self.code_token(l, c))
            .collect()
    }

    /// Candidate form: code tokens followed by EOS.
    pub fn candidate_tokens(&self, sid: &SemanticId) -> Vec<u32> {
        let mut t = self.sid_tokens(sid);
        t.push(Self::EOS);
        t
    }

    /// Inverse of [`Vocab::sid_tokens`]; a trailing EOS is accepted.
    pub fn parse_tokens(&self, tokens: &[u32]) -> Option<SemanticId> {
        let body = match tokens.last() {
            Some(&Self::EOS) => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        if body.len() != self.levels() {
            return None;
        }
        body.iter()
            .enumerate()
            .map(|(l, &t)| self.token_code(l, t))
            .collect::<Option<Vec<_>>>()
            .map(SemanticId)
    }
}

/// Per-level centroid matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    dim: usize,
    levels: Vec<Vec<Vec<f64>>>,
}

impl Codebooks {
    pub fn new(dim: usize, levels: Vec<Vec<Vec<f64>>>) -> Result<Self, SidError> {
        for level in &levels {
            for c in level {
                if c.len() != dim {
                    return Err(SidError::DimensionMismatch {
                        expected: dim,
                        got: c.len(),
                    });
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(SidError::NonFinite);
                }
            }
        }
        Ok(Self { dim, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> &[Vec<Vec<f64>>] {
        &self.levels
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    /// Greedy residual assignment: nearest centroid per level, ties to the lowest index.
    pub fn encode(&self, embedding: &[f64]) -> Result<SemanticId, SidError> {
        Ok(self.encode_with_residual(embedding)?.0)
    }

    /// Encodes and returns the final residual.
    pub fn encode_with_residual(&self, embedding: &[f64]) -> Result<(SemanticId, Vec<f64>), SidError> {
        if embedding.len() != self.dim {
            return Err(SidError::DimensionMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        let mut residual = embedding.to_vec();
        let mut codes = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (c, _) = nearest(level, &residual);
            for (r, v) in residual.iter_mut().zip(&level[c]) {
                *r -= v;
            }
            codes.push(c as u32);
        }
        Ok((SemanticId(codes), residual))
    }

    /// Sum of the chosen centroids.
    pub fn reconstruct(&self, sid: &SemanticId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (level, &c) in self.levels.iter().zip(&sid.0) {
            for (o, v) in out.iter_mut().zip(&level[c as usize]) {
                *o += v;
            }
        }
        out
    }

    /// Mean squared residual of `points` after each level (index 0 = no quantisation).
    pub fn residual_errors(&self, points: &[Vec<f64>]) -> Vec<f64> {
        let mut residuals: Vec<Vec<f64>> = points.to_vec();
        let mut errors = vec![mean_sq(&residuals)];
        for level in &self.levels {
            for r in residuals.iter_mut() {
                let (c, _) = nearest(level, r);
                for (x, v) in r.iter_mut().zip(&level[c]) {
                    *x -= v;
                }
            }
            errors.push(mean_sq(&residuals));
        }
        errors
    }

    pub fn save(&self, w: impl Write) -> Result<(), SidError> {
        let file = CodebookFile {
            format: CODEBOOK_FORMAT.to_string(),
            version: FORMAT_VERSION,
            codebooks: self.clone(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn load(r: impl std::io::Read) -> Result<Self, SidError> {
        let file: CodebookFile = serde_json::from_reader(r)?;
        if file.format != CODEBOOK_FORMAT || file.version != FORMAT_VERSION {
            return Err(SidError::Parse(format!("{} v{}", file.format, file.version)));
        }
        let cb = file.codebooks;
        Codebooks::new(cb.dim, cb.levels)
    }
}

const CODEBOOK_FORMAT: &str = "raddpo-codebooks";
const CATALOG_HEADER: &str = "#raddpo-catalog";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    format: String,
    version: u32,
    codebooks: Codebooks,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_sq(points: &[Vec<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / points.len() as f64
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

const KMEANS_MAX_ITERS: usize = 50;

/// Independent seedings per fit; the lowest-inertia run wins.
const KMEANS_RESTARTS: usize = 4;

/// Lloyd's algorithm with greedy k-means++ seeding, best of several restarts.
///
/// Each run iterates until assignments stop changing or the iteration cap is
/// reached. The loop always ends on a centroid update, so every non-empty
/// centroid is the mean of its members. Empty clusters are re-seeded from the
/// point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let c = lloyd(points, kmeans_pp_init(points, k, rng));
        let inertia: f64 = points.iter().map(|p| nearest(&c, p).1).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, c));
        }
    }
    best.expect("at least one restart").1
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = points.len();
    let dim = points[0].len();
    let k = centroids.len();
    let mut assign: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            dists[i] = d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
                centroids[j] = points[far].clone();
                dists[far] = 0.0;
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    centroids
}

/// D² sampling of one index; falls back to the farthest point on a numerical tail.
fn d2_sample(d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let n = d2.len();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..n);
    }
    let mut target = rng.random::<f64>() * total;
    for (i, &d) in d2.iter().enumerate() {
        if d <= 0.0 {
            continue;
        }
        if target < d {
            return i;
        }
        target -= d;
    }
    d2.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
        .0
}

/// Greedy k-means++: each step draws `2 + ln k` candidates and keeps the one
/// that lowers the potential most.
fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let idx = d2_sample(&d2, rng);
            let next: Vec<f64> = d2.iter().zip(points).map(|(d, p)| d.min(sq_dist(p, &points[idx]))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, next, idx));
            }
        }
        let (_, next, idx) = best.expect("at least one trial");
        d2 = next;
        centroids.push(points[idx].clone());
    }
    centroids
}

/// Fits residual K-means codebooks, one level per entry of `sizes`.
pub fn rq_kmeans_fit(embeddings: &[Vec<f64>], sizes: &[usize], seed: u64) -> Result<Codebooks, SidError> {
    if embeddings.is_empty() || sizes.is_empty() {
        return Err(SidError::EmptyInput);
    }
    let dim = embeddings[0].len();
    for e in embeddings {
        if e.len() != dim {
            return Err(SidError::DimensionMismatch { expected: dim, got: e.len() });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(SidError::NonFinite);
        }
    }
    if let Some(&size) = sizes.iter().find(|&&s| s > embeddings.len() || s == 0) {
        return Err(SidError::TooFewPoints { size, points: embeddings.len() });
    }
    let mut residuals = embeddings.to_vec();
    let mut levels = Vec::with_capacity(sizes.len());
    for (l, &k) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(l as u64));
        let centroids = kmeans(&residuals, k, &mut rng);
        for r in residuals.iter_mut() {
            let (c, _) = nearest(&centroids, r);
            for (x, v) in r.iter_mut().zip(&centroids[c]) {
                *x -= v;
            }
        }
        levels.push(centroids);
    }
    Codebooks::new(dim, levels)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
}

/// Prefix tree over catalog code sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trie {
    root: TrieNode,
    levels: usize,
}

/// Result of a trie query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrieLookup {
    /// Valid next codes after a partial prefix (empty when the prefix is not in the catalog).
    Next(Vec<u32>),
    /// Membership verdict for a full-length code sequence.
    Terminal(bool),
}

impl Trie {
    pub fn new(levels: usize) -> Self {
        Self { root: TrieNode::default(), levels }
    }

    pub fn insert(&mut self, sid: &SemanticId) {
        let mut node = &mut self.root;
        for &c in &sid.0 {
            node = node.children.entry(c).or_default();
        }
    }

    fn walk(&self, prefix: &[u32]) -> Option<&TrieNode> {
        let mut node = &self.root;
        for c in prefix {
            node = node.children.get(c)?;
        }
        Some(node)
    }

    pub fn contains(&self, sid: &SemanticId) -> bool {
        sid.depth() == self.levels && self.walk(&sid.0).is_some()
    }

    /// Valid continuations of `prefix`, ascending.
    pub fn next_codes(&self, prefix: &[u32]) -> Vec<u32> {
        self.walk(prefix)
            .map(|n| n.children.keys().copied().collect())
            .unwrap_or_default()
    }
}

/// SID ↔ item mapping with collisions preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    level_sizes: Vec<usize>,
    item_sids: Vec<SemanticId>,
    sid_to_items: BTreeMap<SemanticId, Vec<ItemId>>,
    trie: Trie,
}

impl Catalog {
    /// Builds a catalog from `item_sids[i]` = SID of item `i`.
    pub fn new(level_sizes: &[usize], item_sids: Vec<SemanticId>) -> Result<Self, SidError> {
        let mut sid_to_items: BTreeMap<SemanticId, Vec<ItemId>> = BTreeMap::new();
        let mut trie = Trie::new(level_sizes.len());
        for (i, sid) in item_sids.iter().enumerate() {
            validate_codes(level_sizes, &sid.0)?;
            if sid.depth() != level_sizes.len() {
                return Err(SidError::Parse(sid.to_string()));
            }
            sid_to_items.entry(sid.clone()).or_default().push(i as ItemId);
            trie.insert(sid);
        }
        Ok(Self {
            level_sizes: level_sizes.to_vec(),
            item_sids,
            sid_to_items,
            trie,
        })
    }

    /// Encodes every embedding with `codebooks`; item id = position.
    pub fn from_embeddings(codebooks: &Codebooks, embeddings: &[Vec<f64>]) -> Result<Self, SidError> {
        let sids = embeddings
            .iter()
            .map(|e| codebooks.encode(e))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&codebooks.sizes(), sids)
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_sids.len()
    }

    pub fn n_sids(&self) -> usize {
        self.sid_to_items.len()
    }

    pub fn sid_of(&self, item: ItemId) -> &SemanticId {
        &self.item_sids[item as usize]
    }

    pub fn items_of(&self, sid: &SemanticId) -> &[ItemId] {
        self.sid_to_items.get(sid).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn contains(&self, sid: &SemanticId) -> bool {
        self.sid_to_items.contains_key(sid)
    }

    pub fn sids(&self) -> impl Iterator<Item = &SemanticId> {
        self.sid_to_items.keys()
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    /// Distinct level-1 codes present in the catalog.
    pub fn top_clusters(&self) -> Vec<u32> {
        self.trie.next_codes(&[])
    }

    pub fn trie_lookup(&self, prefix: &[u32]) -> Result<TrieLookup, SidError> {
        if prefix.len() > self.levels() {
            return Err(SidError::PrefixTooLong { len: prefix.len(), levels: self.levels() });
        }
        validate_codes(&self.level_sizes, prefix)?;
        if prefix.len() == self.levels() {
            Ok(TrieLookup::Terminal(self.trie.walk(prefix).is_some()))
        } else {
            Ok(TrieLookup::Next(self.trie.next_codes(prefix)))
        }
    }

    /// Writes `item_id,code_1,..,code_L[,embedding..]` lines after a versioned header.
    pub fn save(&self, mut w: impl Write, embeddings: Option<&[Vec<f64>]>) -> Result<(), SidError> {
        let sizes: Vec<String> = self.level_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{CATALOG_HEADER} v{FORMAT_VERSION} sizes={}", sizes.join(","))?;
        for (i, sid) in self.item_sids.iter().enumerate() {
            let mut fields = vec![i.to_string()];
            fields.extend(sid.0.iter().map(|c| c.to_string()));
            if let Some(e) = embeddings {
                fields.extend(e[i].iter().map(|v| format!("{v:?}")));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Reads a catalog written by [`Catalog::save`], with embeddings when present.
    pub fn load(r: impl BufRead) -> Result<(Self, Option<Vec<Vec<f64>>>), SidError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(SidError::CatalogFormat {
            line: 1,
            reason: "missing header".into(),
        })??;
        let sizes = parse_catalog_header(&header)?;
        let levels = sizes.len();
        let mut sids = Vec::new();
        let mut embeddings: Vec<Vec<f64>> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| SidError::CatalogFormat { line: ln + 2, reason: reason.into() };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < levels + 1 {
                return Err(bad("too few fields"));
            }
            let id: usize = fields[0].parse().map_err(|_| bad("item id"))?;
            if id != sids.len() {
                return Err(if id < sids.len() {
                    SidError::DuplicateItem(id as ItemId)
                } else {
                    bad("item ids must be dense and ascending")
                });
            }
            let codes = fields[1..=levels]
                .iter()
                .map(|f| f.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("code"))?;
            sids.push(SemanticId(codes));
            if fields.len() > levels + 1 {
                let e = fields[levels + 1..]
                    .iter()
                    .map(|f| f.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("embedding"))?;
                embeddings.push(e);
            }
        }
        let emb = if embeddings.is_empty() {
            None
        } else if embeddings.len() == sids.len() {
            Some(embeddings)
        } else {
            return Err(SidError::CatalogFormat { line: 0, reason: "embeddings on some lines only".into() });
        };
        Ok((Catalog::new(&sizes, sids)?, emb))
    }
}

fn parse_catalog_header(header: &str) -> Result<Vec<usize>, SidError> {
    let bad = |reason: &str| SidError::CatalogFormat { line: 1, reason: reason.into() };
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CATALOG_HEADER) {
        return Err(bad("not a catalog file"));
    }
    if parts.next() != Some(&format!("v{FORMAT_VERSION}")) {
        return Err(bad("unsupported version"));
    }
    let sizes = parts
        .next()
        .and_then(|p| p.strip_prefix("sizes="))
        .ok_or_else(|| bad("missing sizes"))?;
    sizes
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| bad("sizes")))
        .collect()
}

fn validate_codes(sizes: &[usize], codes: &[u32]) -> Result<(), SidError> {
    for (level, (&c, &size)) in codes.iter().zip(sizes).enumerate() {
        if c as usize >= size {
            return Err(SidError::CodeOutOfRange { level, code: c, size });
        }
    }
    Ok(())
}

/// Fraction of pairs sharing at least `d` leading codes, for `d = 1..=depth`.
pub fn prefix_share_stats(pairs: &[(SemanticId, SemanticId)]) -> Vec<f64> {
    let depth = pairs.iter().map(|(a, b)| a.depth().max(b.depth())).max().unwrap_or(0);
    let mut counts = vec![0usize; depth];
    for (a, b) in pairs {
        let k = a.common_prefix(b);
        for c in counts.iter_mut().take(k) {
            *c += 1;
        }
    }
    let n = pairs.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}
