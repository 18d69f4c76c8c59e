//! Multi-step experiment manifests.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [[step]]
//! name = "sids"
//! kind = "build-sids"
//!
//! [[step]]
//! name = "data"
//! kind = "gen-data"
//! catalog = "sids"
//! config = { train_sessions = 2000, test_sessions = 200 }
//! ```
//!
//! Each step writes into `<out>/<name>`. References (`catalog`, `data`,
//! `init`, `reference`, `checkpoint`, `reports`) name earlier steps. A step
//! whose recorded provenance still matches its config and inputs is skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use raddpo_core::train::Method;

use crate::commands::{self, CliError, Context, Result};
use crate::{EvalArgs, TrainArgs};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(rename = "step", default)]
    pub steps: Vec<Step>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    BuildSids,
    GenData,
    Train,
    Eval,
    Compare,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub name: String,
    pub kind: Kind,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Inline config, same schema as the subcommand's config file.
    #[serde(default)]
    pub config: Option<toml::Table>,
    /// Config file relative to the manifest; merged under `config`.
    #[serde(default)]
    pub config_file: Option<PathBuf>,
    #[serde(default)]
    pub catalog: Option<String>,
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub init: Option<String>,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub reports: Vec<String>,
    #[serde(default)]
    pub stage: Option<String>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub no_tlgd: bool,
    #[serde(default)]
    pub no_rdrw: bool,
    #[serde(default)]
    pub no_mlsft: bool,
    #[serde(default)]
    pub beam_width: Option<usize>,
    #[serde(default)]
    pub constrained: bool,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default)]
    pub plot: bool,
}

pub fn load(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut seen = BTreeMap::new();
    for (i, s) in m.steps.iter().enumerate() {
        if seen.insert(s.name.as_str(), i).is_some() {
            return Err(CliError::Config(format!("duplicate step name {:?}", s.name)));
        }
    }
    Ok(m)
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn step_config<T: serde::de::DeserializeOwned + Default>(step: &Step, root: &Path) -> Result<T> {
    let mut table = match &step.config_file {
        Some(f) => {
            let path = root.join(f);
            let text = std::fs::read_to_string(&path).map_err(|_| CliError::MissingInput(path.clone()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(inline) = &step.config {
        merge(&mut table, inline);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("step {:?}: {e}", step.name)))
}

struct Resolver<'a> {
    out: &'a Path,
    done: BTreeMap<String, Kind>,
}

impl Resolver<'_> {
    /// Output directory of an earlier step of the given kind.
    fn dir(&self, step: &str, field: &str, reference: &Option<String>, kinds: &[Kind]) -> Result<Option<PathBuf>> {
        let Some(name) = reference else { return Ok(None) };
        match self.done.get(name) {
            Some(k) if kinds.contains(k) => Ok(Some(self.out.join(name))),
            Some(k) => Err(CliError::Config(format!("step {step:?}: {field} = {name:?} refers to a {k:?} step"))),
            None => Err(CliError::Config(format!("step {step:?}: {field} = {name:?} is not an earlier step"))),
        }
    }

    fn required(&self, step: &str, field: &str, reference: &Option<String>, kinds: &[Kind]) -> Result<PathBuf> {
        self.dir(step, field, reference, kinds)?
            .ok_or_else(|| CliError::Config(format!("step {step:?} needs {field}")))
    }
}

/// Runs every step in order. `--out` and `--seed` on the command line
/// override the manifest's.
pub fn run(path: &Path, ctx: &Context) -> Result<()> {
    let manifest = load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let out = match (&ctx.out, &manifest.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => root.join(o),
        (None, None) => return Err(CliError::Config("manifest needs out, or pass --out".into())),
    };
    let mut r = Resolver { out: &out, done: BTreeMap::new() };
    for step in &manifest.steps {
        let dir = out.join(&step.name);
        std::fs::create_dir_all(&dir)?;
        let seed = ctx.seed.or(step.seed).or(manifest.seed);
        let n = step.name.as_str();
        log::info!("step {n} ({:?})", step.kind);
        match step.kind {
            Kind::BuildSids => {
                commands::build_sids_with(step_config(step, root)?, seed, &dir, true)?;
            }
            Kind::GenData => {
                let sids = r.required(n, "catalog", &step.catalog, &[Kind::BuildSids])?;
                commands::gen_data_with(step_config(step, root)?, seed, &sids.join(commands::CATALOG_FILE), &dir, true)?;
            }
            Kind::Train => {
                let method = step.method.as_deref().map(str::parse::<Method>).transpose().map_err(CliError::Config)?;
                let model = |p: Option<PathBuf>| p.map(|d| d.join(commands::MODEL_FILE));
                let args = TrainArgs {
                    data: Some(r.required(n, "data", &step.data, &[Kind::GenData])?),
                    stage: step.stage.clone(),
                    method,
                    init: model(r.dir(n, "init", &step.init, &[Kind::Train])?),
                    reference: model(r.dir(n, "reference", &step.reference, &[Kind::Train])?),
                    no_tlgd: step.no_tlgd,
                    no_rdrw: step.no_rdrw,
                    no_mlsft: step.no_mlsft,
                };
                commands::train_with(step_config(step, root)?, seed, &args, &dir, true)?;
            }
            Kind::Eval => {
                let checkpoint = r.required(n, "checkpoint", &step.checkpoint, &[Kind::Train])?;
                let data = r.required(n, "data", &step.data, &[Kind::GenData])?;
                let sids = r.required(n, "catalog", &step.catalog, &[Kind::BuildSids])?;
                let args = EvalArgs {
                    checkpoint: Some(checkpoint.join(commands::MODEL_FILE)),
                    data: Some(data),
                    catalog: Some(sids.join(commands::CATALOG_FILE)),
                    beam_width: step.beam_width,
                    constrained: step.constrained,
                    label: Some(step.label.clone().unwrap_or_else(|| step.checkpoint.clone().unwrap_or_default())),
                    plot: step.plot,
                };
                commands::eval_with(step_config(step, root)?, seed, &args, &dir, true)?;
            }
            Kind::Compare => {
                if step.reports.is_empty() {
                    return Err(CliError::Config(format!("step {n:?} needs reports")));
                }
                let reports = step
                    .reports
                    .iter()
                    .map(|name| Ok(r.required(n, "reports", &Some(name.clone()), &[Kind::Eval])?.join(commands::REPORT_FILE)))
                    .collect::<Result<Vec<_>>>()?;
                commands::compare_with(&reports, step.baseline.as_deref(), step.plot, &dir, true)?;
            }
        }
        r.done.insert(step.name.clone(), step.kind);
    }
    Ok(())
}
