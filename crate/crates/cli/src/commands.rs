use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use raddpo_core::datagen::{self, GenConfig, GenError, Oracle, Session};
use raddpo_core::eval::{self, EvalConfig, EvalError, EvalReport};
use raddpo_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, ModelError};
use raddpo_core::provenance::{json_hash, sha256_file, Provenance};
use raddpo_core::sid::{rq_kmeans_fit, Catalog, SidError, Vocab};
use raddpo_core::train::{self, CheckpointSink, Method, Stage, TrainConfig, TrainError};

use crate::{EvalArgs, TrainArgs};

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingInput(PathBuf),
    Divergence(String),
    HashMismatch(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::HashMismatch(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
            CliError::HashMismatch(m) => write!(f, "hash mismatch: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<SidError> for CliError {
    fn from(e: SidError) -> Self {
        match e {
            SidError::TooFewPoints { .. } | SidError::EmptyInput => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::InvalidConfig(_) | GenError::Infeasible(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Loss(_) | TrainError::MissingReference => CliError::Config(e.to_string()),
            TrainError::StaleReference => CliError::HashMismatch(e.to_string()),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::HashMismatch(..) => CliError::HashMismatch(e.to_string()),
            EvalError::Model(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Global flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Context {
    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.out.clone().ok_or_else(|| CliError::Config("--out is required".into()))?;
        std::fs::create_dir_all(&out)?;
        Ok(out)
    }
}

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|_| CliError::MissingInput(path.to_path_buf()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Returns true (and logs) when `dir` already holds outputs made from the same config and inputs.
fn up_to_date(dir: &Path, expected: &Provenance) -> bool {
    let Ok(old) = Provenance::load(&dir.join(PROVENANCE)) else { return false };
    let current = old.config_hash == expected.config_hash
        && old.seed == expected.seed
        && old.inputs == expected.inputs
        && old.code_version == expected.code_version
        && old.outputs_intact();
    if current {
        log::info!("{}: up to date, skipping", dir.display());
    }
    current
}

pub const PROVENANCE: &str = "provenance.json";

fn finish(dir: &Path, mut prov: Provenance, outputs: &[&str]) -> Result<Provenance> {
    for o in outputs {
        prov.output(&dir.join(o))?;
    }
    prov.save(&dir.join(PROVENANCE))?;
    Ok(prov)
}

fn provenance(command: &str, seed: u64, config: &impl Serialize, inputs: &[&Path]) -> Result<Provenance> {
    let mut p = Provenance::new(command, seed, json_hash(config));
    for i in inputs {
        p.input(i).map_err(|_| CliError::MissingInput(i.to_path_buf()))?;
    }
    Ok(p)
}

// ---- build-sids ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SidsConfig {
    pub n_items: usize,
    pub dim: usize,
    pub level_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SidsConfig {
    fn default() -> Self {
        Self { n_items: 1024, dim: 32, level_sizes: vec![8, 8, 8], seed: 0 }
    }
}

pub const CATALOG_FILE: &str = "catalog.txt";
pub const CODEBOOKS_FILE: &str = "codebooks.json";

pub fn build_sids(ctx: &Context) -> Result<Provenance> {
    let cfg: SidsConfig = load_config(ctx.config.as_deref())?;
    build_sids_with(cfg, ctx.seed, &ctx.out_dir()?, false)
}

pub fn build_sids_with(mut cfg: SidsConfig, seed: Option<u64>, out: &Path, skip_current: bool) -> Result<Provenance> {
    cfg.seed = seed.unwrap_or(cfg.seed);
    if cfg.n_items == 0 || cfg.dim == 0 || cfg.level_sizes.is_empty() || cfg.level_sizes.contains(&0) {
        return Err(CliError::Config("n_items, dim and every level size must be positive".into()));
    }
    let prov = provenance("build-sids", cfg.seed, &cfg, &[])?;
    if skip_current && up_to_date(out, &prov) {
        return Ok(prov);
    }
    let emb = datagen::synthetic_embeddings(cfg.n_items, cfg.dim, &cfg.level_sizes, cfg.seed);
    let cb = rq_kmeans_fit(&emb, &cfg.level_sizes, cfg.seed)?;
    let catalog = Catalog::from_embeddings(&cb, &emb)?;
    catalog.save(create(&out.join(CATALOG_FILE))?, Some(&emb))?;
    cb.save(create(&out.join(CODEBOOKS_FILE))?)?;
    let errors = cb.residual_errors(&emb);
    log::info!("{} items on {} SIDs; residual error per level {errors:?}", catalog.n_items(), catalog.n_sids());
    finish(out, prov, &[CATALOG_FILE, CODEBOOKS_FILE])
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    Ok(Catalog::load(open(path)?)?.0)
}

// ---- gen-data ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_sessions: 50_000, test_sessions: 5_000, gen: GenConfig::default() }
    }
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TRAIN_ORACLE: &str = "train.oracle.json";
pub const TEST_FILE: &str = "test.jsonl";
pub const TEST_ORACLE: &str = "test.oracle.json";
pub const META_FILE: &str = "meta.json";

/// Vocabulary and corpus summary written next to the corpora.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataMeta {
    pub level_sizes: Vec<usize>,
    pub n_queries: usize,
    pub n_items: usize,
    pub train: datagen::GenStats,
    pub test: datagen::GenStats,
}

impl DataMeta {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.level_sizes, self.n_queries)
    }
}

pub fn gen_data(ctx: &Context, catalog: &Path) -> Result<Provenance> {
    let cfg: DataConfig = load_config(ctx.config.as_deref())?;
    gen_data_with(cfg, ctx.seed, catalog, &ctx.out_dir()?, false)
}

pub fn gen_data_with(mut cfg: DataConfig, seed: Option<u64>, catalog_path: &Path, out: &Path, skip_current: bool) -> Result<Provenance> {
    cfg.gen.seed = seed.unwrap_or(cfg.gen.seed);
    let prov = provenance("gen-data", cfg.gen.seed, &cfg, &[catalog_path])?;
    if skip_current && up_to_date(out, &prov) {
        return Ok(prov);
    }
    let catalog = load_catalog(catalog_path)?;
    let train_cfg = GenConfig { sessions: cfg.train_sessions, day: 0, ..cfg.gen.clone() };
    let test_cfg = GenConfig { sessions: cfg.test_sessions, day: 1, ..cfg.gen.clone() };
    let (train, train_oracle) = datagen::generate(&train_cfg, &catalog)?;
    let (test, test_oracle) = datagen::generate(&test_cfg, &catalog)?;
    for (file, sessions, oracle_file, oracle) in
        [(TRAIN_FILE, &train, TRAIN_ORACLE, &train_oracle), (TEST_FILE, &test, TEST_ORACLE, &test_oracle)]
    {
        let mut w = create(&out.join(file))?;
        datagen::write_corpus(&mut w, sessions)?;
        w.flush()?;
        let mut w = create(&out.join(oracle_file))?;
        oracle.save(&mut w)?;
        w.flush()?;
    }
    let meta = DataMeta {
        level_sizes: catalog.level_sizes().to_vec(),
        n_queries: cfg.gen.n_queries,
        n_items: catalog.n_items(),
        train: datagen::measure(&train),
        test: datagen::measure(&test),
    };
    log::info!("train pseudo rate {:.4}, prefix share {:?}", meta.train.pseudo_rate, meta.train.prefix_share);
    write_json(&out.join(META_FILE), &meta)?;
    finish(out, prov, &[TRAIN_FILE, TRAIN_ORACLE, TEST_FILE, TEST_ORACLE, META_FILE])
}

pub fn load_meta(data: &Path) -> Result<DataMeta> {
    Ok(serde_json::from_reader(open(&data.join(META_FILE))?)?)
}

pub fn load_sessions(data: &Path, file: &str, oracle_file: &str) -> Result<(Vec<Session>, Oracle)> {
    let mut sessions = datagen::read_corpus(open(&data.join(file))?)?;
    let oracle = Oracle::load(open(&data.join(oracle_file))?)?;
    oracle.annotate(&mut sessions);
    Ok((sessions, oracle))
}

// ---- train ----

/// Model shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self { depth: m.depth, d_model: m.d_model, n_heads: m.n_heads, d_ff: m.d_ff, max_seq_len: m.max_seq_len }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub model: ModelSettings,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub method: Method,
    pub steps: usize,
    pub param_sets: usize,
    pub final_loss: f64,
    pub model_hash: String,
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<Provenance> {
    let cfg: TrainFile = load_config(ctx.config.as_deref())?;
    train_with(cfg, ctx.seed, args, &ctx.out_dir()?, false)
}

/// Applies command-line overrides to the file config.
fn effective_train(mut cfg: TrainFile, seed: Option<u64>, args: &TrainArgs) -> Result<TrainFile> {
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(stage) = &args.stage {
        cfg.train.stage = match stage.as_str() {
            "sft" => Stage::Sft,
            "align" => Stage::Align,
            other => return Err(CliError::Config(format!("unknown stage {other:?}"))),
        };
    }
    if let Some(m) = args.method {
        cfg.train.method = m;
    }
    let l = &mut cfg.train.loss;
    l.enable_tlgd &= !args.no_tlgd;
    l.enable_rdrw &= !args.no_rdrw;
    l.enable_multilabel_sft &= !args.no_mlsft;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn train_with(cfg: TrainFile, seed: Option<u64>, args: &TrainArgs, out: &Path, skip_current: bool) -> Result<Provenance> {
    let cfg = effective_train(cfg, seed, args)?;
    let data = args.data.clone().ok_or_else(|| CliError::Config("--data is required".into()))?;
    let train_file = data.join(TRAIN_FILE);
    let mut inputs: Vec<PathBuf> = vec![train_file.clone(), data.join(TRAIN_ORACLE), data.join(META_FILE)];
    if cfg.train.stage == Stage::Align && args.init.is_none() {
        return Err(CliError::Config("alignment needs --init".into()));
    }
    inputs.extend(args.init.iter().cloned());
    let reference_path = match (cfg.train.stage, cfg.train.method) {
        (Stage::Align, Method::Dpo) => args.reference.clone().or_else(|| args.init.clone()),
        _ => None,
    };
    inputs.extend(reference_path.iter().cloned());
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let prov = provenance("train", cfg.train.seed, &cfg, &input_refs)?;
    if skip_current && up_to_date(out, &prov) {
        return Ok(prov);
    }

    let meta = load_meta(&data)?;
    let vocab = meta.vocab();
    let (sessions, _) = load_sessions(&data, TRAIN_FILE, TRAIN_ORACLE)?;
    let init = match &args.init {
        Some(p) => load_checkpoint(open(p)?)?,
        None => {
            let m = &cfg.model;
            let mc = ModelConfig {
                vocab_size: vocab.size(),
                depth: m.depth,
                d_model: m.d_model,
                n_heads: m.n_heads,
                d_ff: m.d_ff,
                max_seq_len: m.max_seq_len,
                seed: cfg.train.seed,
            };
            Model::init(mc)?
        }
    };
    if init.config.vocab_size != vocab.size() {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary {} does not match data vocabulary {}",
            init.config.vocab_size,
            vocab.size()
        )));
    }
    let sink = CheckpointSink { dir: (cfg.train.checkpoint_every > 0).then(|| out.join("checkpoints")) };
    let output = match cfg.train.stage {
        Stage::Sft => train::run_sft(&cfg.train, &sessions, &vocab, init, &sink)?,
        Stage::Align => {
            let reference = reference_path.as_deref().map(|p| -> Result<Model> { Ok(load_checkpoint(open(p)?)?) }).transpose()?;
            train::run_alignment_with_reference(&cfg.train, &sessions, &vocab, init, reference.as_ref(), &sink)?
        }
    };
    save_checkpoint(&output.model, create(&out.join(MODEL_FILE))?)?;
    let mut w = create(&out.join(TRACE_FILE))?;
    train::write_trace(&mut w, &output.trace)?;
    w.flush()?;
    let mut outputs = vec![MODEL_FILE, TRACE_FILE, SUMMARY_FILE];
    if let Some(stats) = &output.stats {
        write_json(&out.join(STATS_FILE), stats)?;
        outputs.push(STATS_FILE);
    }
    let summary = TrainSummary {
        stage: cfg.train.stage,
        method: cfg.train.method,
        steps: cfg.train.steps,
        param_sets: output.param_sets,
        final_loss: output.trace.last().map_or(f64::NAN, |r| r.loss),
        model_hash: raddpo_core::provenance::model_hash(&output.model),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    log::info!("{:?}/{:?}: final loss {:.5}, {} parameter set(s)", summary.stage, summary.method, summary.final_loss, summary.param_sets);
    finish(out, prov, &outputs)
}

// ---- eval ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub beam_width: usize,
    pub constrained: bool,
    pub sid_ks: Vec<usize>,
    pub item_ks: Option<Vec<usize>>,
}

impl Default for EvalFile {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { beam_width: e.beam_width, constrained: e.constrained, sid_ks: e.sid_ks, item_ks: e.item_ks }
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const RECALL_PLOT: &str = "recall.svg";

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<Provenance> {
    let cfg: EvalFile = load_config(ctx.config.as_deref())?;
    eval_with(cfg, ctx.seed, args, &ctx.out_dir()?, false)
}

fn recall_series(reports: &[EvalReport]) -> Vec<(String, Vec<(f64, f64)>)> {
    reports
        .iter()
        .map(|r| (r.method.clone(), r.sid_recall.iter().map(|&(k, v)| (k as f64, v)).collect()))
        .collect()
}

pub fn eval_with(cfg: EvalFile, seed: Option<u64>, args: &EvalArgs, out: &Path, skip_current: bool) -> Result<Provenance> {
    let checkpoint = args.checkpoint.clone().ok_or_else(|| CliError::Config("--checkpoint is required".into()))?;
    let data = args.data.clone().ok_or_else(|| CliError::Config("--data is required".into()))?;
    let catalog_path = args.catalog.clone().ok_or_else(|| CliError::Config("--catalog is required".into()))?;
    let label = args.label.clone().unwrap_or_else(|| {
        checkpoint.parent().and_then(|p| p.file_name()).map_or("model".into(), |n| n.to_string_lossy().into_owned())
    });
    let config = EvalConfig {
        label,
        beam_width: args.beam_width.unwrap_or(cfg.beam_width),
        constrained: cfg.constrained || args.constrained,
        sid_ks: cfg.sid_ks.clone(),
        item_ks: cfg.item_ks.clone(),
    };
    let test_file = data.join(TEST_FILE);
    let inputs = [checkpoint.as_path(), test_file.as_path(), &data.join(TEST_ORACLE), &data.join(META_FILE), catalog_path.as_path()];
    let prov = provenance("eval", seed.unwrap_or(0), &(&config, args.plot), &inputs)?;
    if skip_current && up_to_date(out, &prov) {
        return Ok(prov);
    }
    let model = load_checkpoint(open(&checkpoint)?)?;
    let catalog = load_catalog(&catalog_path)?;
    let vocab = load_meta(&data)?.vocab();
    let (sessions, oracle) = load_sessions(&data, TEST_FILE, TEST_ORACLE)?;
    let corpus_hash = sha256_file(&test_file)?;
    let seeds: Vec<u64> = seed.into_iter().collect();
    let report = eval::evaluate(&model, &sessions, &oracle, &catalog, &vocab, &config, &corpus_hash, &seeds)?;
    let mut w = create(&out.join(REPORT_FILE))?;
    serde_json::to_writer(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut text = String::new();
    for (name, v) in report.columns() {
        text.push_str(&format!("{name:>12} {v:.4}\n"));
    }
    std::fs::write(out.join(REPORT_TEXT), &text)?;
    print!("{}\n{text}", report.method);
    let mut outputs = vec![REPORT_FILE, REPORT_TEXT];
    if args.plot {
        std::fs::write(out.join(RECALL_PLOT), eval::svg_lines("SID recall@K", &recall_series(std::slice::from_ref(&report))))?;
        outputs.push(RECALL_PLOT);
    }
    finish(out, prov, &outputs)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_reader(open(path)?)?)
}

// ---- compare ----

pub const COMPARISON_TEXT: &str = "comparison.txt";
pub const COMPARISON_RECORDS: &str = "comparison.jsonl";

pub fn compare(ctx: &Context, reports: &[PathBuf], baseline: Option<&str>, plot: bool) -> Result<()> {
    compare_with(reports, baseline, plot, &ctx.out_dir()?, false).map(|_| ())
}

pub fn compare_with(paths: &[PathBuf], baseline: Option<&str>, plot: bool, out: &Path, skip_current: bool) -> Result<Provenance> {
    let inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let prov = provenance("compare", 0, &(baseline, plot), &inputs)?;
    if skip_current && up_to_date(out, &prov) {
        return Ok(prov);
    }
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let base = baseline.map(str::to_string).or_else(|| reports.first().map(|r| r.method.clone())).unwrap_or_default();
    let cmp = eval::compare(&reports, &base)?;
    let table = cmp.render();
    print!("{table}");
    std::fs::write(out.join(COMPARISON_TEXT), &table)?;
    let mut w = create(&out.join(COMPARISON_RECORDS))?;
    for r in cmp.records() {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut outputs = vec![COMPARISON_TEXT, COMPARISON_RECORDS];
    if plot {
        std::fs::write(out.join(RECALL_PLOT), eval::svg_lines("SID recall@K", &recall_series(&reports)))?;
        outputs.push(RECALL_PLOT);
    }
    finish(out, prov, &outputs)
}
