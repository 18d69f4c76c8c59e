//! Decode-and-score harness.
//!
//! Every test session's prompt is decoded once by beam search (sessions with
//! the same prompt share the decode). SID-level metrics compare the ranked
//! decodes with the SIDs of the query's oracle-relevant items; item-level
//! metrics expand each decoded SID into its catalog items. A decode missing
//! from the catalog is a hallucination: it keeps its rank slot and never
//! matches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{prompt_tokens, Oracle, Session};
use crate::model::{beam_search, Model, ModelError};
use crate::par;
use crate::sid::{Catalog, ItemId, SemanticId, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("beam width {width} is smaller than K = {k}")]
    WidthTooSmall { width: usize, k: usize },
    #[error("K must be at least 1")]
    InvalidK,
    #[error("reports were computed on different corpora: {0} vs {1}")]
    HashMismatch(String, String),
    #[error("comparison needs at least two reports")]
    TooFewReports,
    #[error("no report labelled {0:?}")]
    UnknownBaseline(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const SID_KS: [usize; 3] = [8, 64, 128];
pub const ITEM_KS: [usize; 3] = [10, 100, 500];
pub const SMALL_CATALOG_ITEM_KS: [usize; 3] = [10, 50, 100];
pub const SMALL_CATALOG_ITEMS: usize = 500;

/// Item-level cutoffs for a catalog of `n_items` items.
pub fn item_ks(n_items: usize) -> Vec<usize> {
    if n_items < SMALL_CATALOG_ITEMS { SMALL_CATALOG_ITEM_KS.to_vec() } else { ITEM_KS.to_vec() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub label: String,
    pub beam_width: usize,
    pub constrained: bool,
    pub sid_ks: Vec<usize>,
    /// Defaults to [`item_ks`] of the catalog.
    pub item_ks: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { label: "model".into(), beam_width: 128, constrained: false, sid_ks: SID_KS.to_vec(), item_ks: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// `(K, recall)` pairs in increasing K.
    pub sid_recall: Vec<(usize, f64)>,
    pub item_recall: Vec<(usize, f64)>,
    pub sid_mrr: f64,
    pub item_mrr: f64,
    /// Per decoded sequence.
    pub hallucination_rate: f64,
    pub beam_width: usize,
    pub constrained: bool,
    pub seeds: Vec<u64>,
    pub sessions: usize,
    /// Sessions without any relevant item, left out of the means.
    pub skipped: usize,
    pub corpus_hash: String,
}

impl EvalReport {
    pub fn sid_recall_at(&self, k: usize) -> Option<f64> {
        self.sid_recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn item_recall_at(&self, k: usize) -> Option<f64> {
        self.item_recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    /// Metric columns in table order: SID-level, item-level, hallucination.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> = self.sid_recall.iter().map(|(k, r)| (format!("SID R@{k}"), *r)).collect();
        cols.push(("SID MRR".into(), self.sid_mrr));
        cols.extend(self.item_recall.iter().map(|(k, r)| (format!("Item R@{k}"), *r)));
        cols.push(("Item MRR".into(), self.item_mrr));
        cols.push(("HR".into(), self.hallucination_rate));
        cols
    }
}

/// `|top-K ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k<T: Ord>(ranked: &[Option<T>], relevant: &BTreeSet<T>, k: usize) -> Result<Option<f64>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if relevant.is_empty() {
        return Ok(None);
    }
    let mut seen = BTreeSet::new();
    for x in ranked.iter().take(k).flatten() {
        if relevant.contains(x) {
            seen.insert(x);
        }
    }
    Ok(Some(seen.len() as f64 / relevant.len() as f64))
}

/// Reciprocal rank of the first relevant entry, 0 if none.
pub fn reciprocal_rank<T: Ord>(ranked: &[Option<T>], relevant: &BTreeSet<T>) -> f64 {
    ranked
        .iter()
        .position(|x| x.as_ref().is_some_and(|x| relevant.contains(x)))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Metrics of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub query: u32,
    pub decodes: Vec<SemanticId>,
    pub hallucinated: usize,
    pub sid_recall: Vec<f64>,
    pub item_recall: Vec<f64>,
    pub sid_rr: f64,
    pub item_rr: f64,
    pub skipped: bool,
}

/// Ranked decodes with hallucinations as `None`, and the expanded item list.
fn ranked_lists(decodes: &[SemanticId], catalog: &Catalog) -> (Vec<Option<SemanticId>>, Vec<Option<ItemId>>) {
    let mut sids = Vec::with_capacity(decodes.len());
    let mut items = Vec::new();
    for d in decodes {
        if catalog.contains(d) {
            sids.push(Some(d.clone()));
            items.extend(catalog.items_of(d).iter().map(|&i| Some(i)));
        } else {
            sids.push(None);
            items.push(None);
        }
    }
    (sids, items)
}

fn recalls<T: Ord>(ranked: &[Option<T>], relevant: &BTreeSet<T>, ks: &[usize]) -> Result<Vec<f64>, EvalError> {
    ks.iter().map(|&k| Ok(recall_at_k(ranked, relevant, k)?.unwrap_or(0.0))).collect()
}

/// Decodes and scores every session.
pub fn evaluate_sessions(
    model: &Model,
    sessions: &[Session],
    oracle: &Oracle,
    catalog: &Catalog,
    vocab: &Vocab,
    config: &EvalConfig,
) -> Result<Vec<SessionEval>, EvalError> {
    let item_k = config.item_ks.clone().unwrap_or_else(|| item_ks(catalog.n_items()));
    if config.sid_ks.iter().chain(&item_k).any(|&k| k == 0) {
        return Err(EvalError::InvalidK);
    }
    if let Some(&k) = config.sid_ks.iter().max() {
        if config.beam_width < k {
            return Err(EvalError::WidthTooSmall { width: config.beam_width, k });
        }
    }
    let prompts: Vec<Vec<u32>> = sessions.iter().map(|s| prompt_tokens(s, vocab)).collect();
    let distinct: Vec<Vec<u32>> = prompts.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let trie = config.constrained.then(|| catalog.trie());
    let decoded = par::map(&distinct, |p| {
        beam_search(model, vocab, p, config.beam_width, trie).map(|h| h.into_iter().map(|h| h.sid).collect::<Vec<_>>())
    });
    let mut by_prompt: BTreeMap<&[u32], Vec<SemanticId>> = BTreeMap::new();
    for (p, d) in distinct.iter().zip(decoded) {
        by_prompt.insert(p, d?);
    }

    let mut rel_cache: BTreeMap<u32, (BTreeSet<SemanticId>, BTreeSet<ItemId>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(sessions.len());
    for (s, p) in sessions.iter().zip(&prompts) {
        let (rel_sids, rel_items) = rel_cache.entry(s.query).or_insert_with(|| {
            let items: BTreeSet<ItemId> = oracle.relevant[s.query as usize].iter().copied().collect();
            (items.iter().map(|&i| catalog.sid_of(i).clone()).collect(), items)
        });
        let decodes = by_prompt[p.as_slice()].clone();
        let (sids, items) = ranked_lists(&decodes, catalog);
        let hallucinated = sids.iter().filter(|x| x.is_none()).count();
        let skipped = rel_items.is_empty();
        out.push(SessionEval {
            query: s.query,
            hallucinated,
            sid_recall: recalls(&sids, rel_sids, &config.sid_ks)?,
            item_recall: recalls(&items, rel_items, &item_k)?,
            sid_rr: reciprocal_rank(&sids, rel_sids),
            item_rr: reciprocal_rank(&items, rel_items),
            decodes,
            skipped,
        });
    }
    Ok(out)
}

/// Averages per-session results into a report.
pub fn reduce(per_session: &[SessionEval], config: &EvalConfig, n_items: usize, corpus_hash: &str, seeds: &[u64]) -> EvalReport {
    let item_k = config.item_ks.clone().unwrap_or_else(|| item_ks(n_items));
    let kept: Vec<&SessionEval> = per_session.iter().filter(|s| !s.skipped).collect();
    let n = kept.len().max(1) as f64;
    let mean_at = |f: &dyn Fn(&SessionEval) -> f64| kept.iter().map(|s| f(s)).sum::<f64>() / n;
    let decodes: usize = per_session.iter().map(|s| s.decodes.len()).sum();
    let hallucinated: usize = per_session.iter().map(|s| s.hallucinated).sum();
    EvalReport {
        method: config.label.clone(),
        sid_recall: config.sid_ks.iter().enumerate().map(|(i, &k)| (k, mean_at(&|s| s.sid_recall[i]))).collect(),
        item_recall: item_k.iter().enumerate().map(|(i, &k)| (k, mean_at(&|s| s.item_recall[i]))).collect(),
        sid_mrr: mean_at(&|s| s.sid_rr),
        item_mrr: mean_at(&|s| s.item_rr),
        hallucination_rate: hallucinated as f64 / decodes.max(1) as f64,
        beam_width: config.beam_width,
        constrained: config.constrained,
        seeds: seeds.to_vec(),
        sessions: per_session.len(),
        skipped: per_session.len() - kept.len(),
        corpus_hash: corpus_hash.to_string(),
    }
}

pub fn evaluate(
    model: &Model,
    sessions: &[Session],
    oracle: &Oracle,
    catalog: &Catalog,
    vocab: &Vocab,
    config: &EvalConfig,
    corpus_hash: &str,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    let per = evaluate_sessions(model, sessions, oracle, catalog, vocab, config)?;
    Ok(reduce(&per, config, catalog.n_items(), corpus_hash, seeds))
}

/// One row of a comparison: metrics and their deltas against the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub metrics: Vec<(String, f64)>,
    pub deltas: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub corpus_hash: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[EvalReport], baseline: &str) -> Result<Comparison, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let hash = &reports[0].corpus_hash;
    if let Some(r) = reports.iter().find(|r| &r.corpus_hash != hash) {
        return Err(EvalError::HashMismatch(hash.clone(), r.corpus_hash.clone()));
    }
    let base = reports
        .iter()
        .find(|r| r.method == baseline)
        .ok_or_else(|| EvalError::UnknownBaseline(baseline.to_string()))?
        .columns();
    let rows = reports
        .iter()
        .map(|r| {
            let metrics = r.columns();
            let deltas = metrics.iter().zip(&base).map(|((name, v), (_, b))| (name.clone(), v - b)).collect();
            ComparisonRow { method: r.method.clone(), metrics, deltas }
        })
        .collect();
    Ok(Comparison { baseline: baseline.to_string(), corpus_hash: hash.clone(), rows })
}

impl Comparison {
    /// Fixed-width text table with a delta line under every non-baseline row.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let Some(first) = self.rows.first() else { return s };
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6) + 2;
        let _ = write!(s, "{:width$}", "method");
        for (name, _) in &first.metrics {
            let _ = write!(s, "{name:>11}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:width$}", r.method);
            for (_, v) in &r.metrics {
                let _ = write!(s, "{v:>11.4}");
            }
            s.push('\n');
            if r.method != self.baseline {
                let _ = write!(s, "{:width$}", format!("  vs {}", self.baseline));
                for (_, d) in &r.deltas {
                    let _ = write!(s, "{d:>+11.4}");
                }
                s.push('\n');
            }
        }
        s
    }

    /// One JSON record per (method, metric).
    pub fn records(&self) -> Vec<serde_json::Value> {
        self.rows
            .iter()
            .flat_map(|r| {
                r.metrics.iter().zip(&r.deltas).map(move |((name, v), (_, d))| {
                    serde_json::json!({ "method": r.method, "metric": name, "value": v, "delta": d, "baseline": self.baseline })
                })
            })
            .collect()
    }
}

/// Line chart of several `(x, y)` series as a standalone SVG document.
pub fn svg_lines(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        xml_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{v:.4}</text>", PAD - 4.0);
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{v}</text>", H - PAD + 14.0);
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - PAD - 120.0,
            PAD + 14.0 * i as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
