//! Command-line front end.
//!
//! Every command reads one JSON config document (all keys optional, unknown
//! keys rejected), applies `--set key.path=value` overrides and the
//! dedicated path flags, then `CLFA_SEED`. A top-level `seed`, when present,
//! replaces the seed of the module config it applies to.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptor::{train_adaptor, AdaptConfig};
use crate::backbone::VitConfig;
use crate::checkpoint::{load_adaptor, load_backbone, load_pretrain, save_adaptor, save_pretrain};
use crate::clfa::{pretrain, resume, BranchVariant, PretrainConfig};
use crate::dataset::{read_dataset, write_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_model, export_features, run_benchmark, trend_cells, BenchmarkConfig, Cell, EvalEntry};
use crate::metrics::{history_to_jsonl, linear_probe_auc, FeatureBatch, MetricRecord, ProbeConfig, ProbeTarget};
use crate::synthdata::Split;

#[derive(Debug, Parser)]
#[command(name = "camadapt", version, about = "Paired-camera pre-training, adaptation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pretrain.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired-camera dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train a backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a camera adaptor against a frozen backbone.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate backbones, with or without adaptors, on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `BACKBONE` or `BACKBONE,ADAPTOR`; repeatable.
        #[arg(long = "run", value_name = "CKPT[,ADAPTOR]")]
        runs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write class-token features of both cameras as CSV.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        adaptor: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe AUC for laterality and camera on exported features.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the synthetic benchmark grid.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataRun {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Defaults to `<out>.metrics.jsonl`.
    pub metrics: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model: VitConfig,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        Self {
            data: None,
            out: None,
            metrics: None,
            resume: None,
            seed: None,
            model: bench.model,
            pretrain: bench.pretrain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptRun {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Defaults to `<out>.metrics.jsonl`.
    pub metrics: Option<PathBuf>,
    pub seed: Option<u64>,
    pub adapt: AdaptConfig,
}

impl Default for AdaptRun {
    fn default() -> Self {
        Self {
            data: None,
            backbone: None,
            out: None,
            metrics: None,
            seed: None,
            adapt: BenchmarkConfig::default().adapt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTarget {
    pub backbone: PathBuf,
    #[serde(default)]
    pub adaptor: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub runs: Vec<EvalTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportRun {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub adaptor: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Split,
}

impl Default for ExportRun {
    fn default() -> Self {
        Self {
            data: None,
            backbone: None,
            adaptor: None,
            out: None,
            split: Split::Validation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeRun {
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkRun {
    pub out: Option<PathBuf>,
    /// Replaces `benchmark.data_seed`.
    pub seed: Option<u64>,
    pub benchmark: BenchmarkConfig,
    pub cells: Vec<Cell>,
}

impl Default for BenchmarkRun {
    fn default() -> Self {
        Self {
            out: None,
            seed: None,
            benchmark: BenchmarkConfig::default(),
            cells: trend_cells(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: BTreeMap<String, EvalEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub auc_laterality: f64,
    pub auc_camera: f64,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    for p in &parts[..parts.len() - 1] {
        node = match node {
            Value::Object(m) => m
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(Error::Config(format!("override '{key}': '{p}' is not a table"))),
        };
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    match node {
        Value::Object(m) => {
            m.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("override '{key}' does not address a table entry"))),
    }
}

/// Builds a command config from defaults, the config file, `--set`
/// overrides, path flags and the seed environment value, in that order.
pub fn load_config<C: Serialize + DeserializeOwned + Default>(
    args: &ConfigArgs,
    paths: &[(&str, &Option<PathBuf>)],
    env_seed: Option<&str>,
) -> Result<C> {
    let mut root = serde_json::to_value(C::default()).expect("defaults serialize");
    if let Some(file) = &args.config {
        let text = std::fs::read_to_string(file)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", file.display())))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", file.display())))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        merge(&mut root, doc);
    }
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{s}' is not KEY=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut root, k, value)?;
    }
    for (k, p) in paths {
        if let Some(p) = p {
            set_path(&mut root, k, Value::String(p.to_string_lossy().into_owned()))?;
        }
    }
    if let Some(seed) = env_seed {
        if root.get("seed").is_some() {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("CLFA_SEED must be an unsigned integer, got '{seed}'")))?;
            set_path(&mut root, "seed", Value::from(seed))?;
        }
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("'{name}' is required (config key or --{name})")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("report not serializable: {e}")))?;
    write_file(path, (text + "\n").as_bytes())
}

fn metrics_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

fn write_history(path: &Path, history: &[MetricRecord]) -> Result<()> {
    write_file(path, history_to_jsonl(history).as_bytes())
}

pub fn cmd_gen_data(run: &GenDataRun) -> Result<Vec<PathBuf>> {
    let out = required(&run.out, "out")?;
    let mut spec = run.dataset.clone();
    if let Some(s) = run.seed {
        spec.seed = s;
    }
    let data = spec.generate()?;
    write_dataset(out, &data, &spec)?;
    Ok(vec![out.to_path_buf()])
}

pub fn cmd_pretrain(run: &PretrainRun) -> Result<Vec<PathBuf>> {
    let data_dir = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let mut cfg = run.pretrain.clone();
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    run.model.validate()?;
    cfg.validate()?;
    let (data, manifest) = read_dataset(data_dir)?;
    if manifest.generator.image_size != run.model.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but model.image_size is {}",
            manifest.generator.image_size, run.model.image_size
        )));
    }
    let train = data.records_in(Split::Train);
    let val = data.records_in(Split::Validation);
    let outcome = match &run.resume {
        Some(ckpt) => {
            let loaded = load_pretrain(ckpt)?;
            if loaded.header.model_config != run.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            resume(loaded.state, &train, &val, &cfg)?
        }
        None => pretrain(&train, &val, &run.model, &cfg)?,
    };
    save_pretrain(out, &outcome.state, &cfg)?;
    let metrics = metrics_path(&run.metrics, out);
    write_history(&metrics, &outcome.history)?;
    Ok(vec![out.to_path_buf(), metrics])
}

pub fn cmd_adapt(run: &AdaptRun) -> Result<Vec<PathBuf>> {
    let data_dir = required(&run.data, "data")?;
    let ckpt = required(&run.backbone, "backbone")?;
    let out = required(&run.out, "out")?;
    let mut cfg = run.adapt.clone();
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (backbone, hash) = load_backbone(ckpt)?;
    let (data, _) = read_dataset(data_dir)?;
    let outcome = train_adaptor(
        &backbone,
        &data.pairs_in(Split::Train),
        &data.pairs_in(Split::Validation),
        &cfg,
    )?;
    save_adaptor(out, &outcome.adaptor, &backbone.config, &hash, &cfg)?;
    let metrics = metrics_path(&run.metrics, out);
    write_history(&metrics, &outcome.history)?;
    Ok(vec![out.to_path_buf(), metrics])
}

/// Evaluates every configured run; entries are keyed by
/// `model_variant/adaptor_variant/loss_variant`.
pub fn eval_report(run: &EvalRun) -> Result<EvalReport> {
    let data_dir = required(&run.data, "data")?;
    if run.runs.is_empty() {
        return Err(Error::Config("eval needs at least one run (--run CKPT[,ADAPTOR])".into()));
    }
    let (data, _) = read_dataset(data_dir)?;
    let mut entries = BTreeMap::new();
    for target in &run.runs {
        let loaded = load_pretrain(&target.backbone)?;
        let variant = loaded.header.branch_variant.unwrap_or(BranchVariant::SupervisedOnly);
        let backbone = loaded.state.model.backbone;
        let adaptor = match &target.adaptor {
            Some(p) => {
                let (a, header) = load_adaptor(p, &loaded.sha256)?;
                let cfg: AdaptConfig = serde_json::from_value(header.config)
                    .map_err(|e| Error::Format(format!("bad adaptor config in {}: {e}", p.display())))?;
                Some((a, cfg.loss_variant))
            }
            None => None,
        };
        let entry = evaluate_model(&data, &backbone, variant, adaptor.as_ref().map(|(a, l)| (a, *l)))?;
        let key = entry.key();
        if entries.insert(key.clone(), entry).is_some() {
            return Err(Error::Config(format!("two runs share the report key '{key}'")));
        }
    }
    Ok(EvalReport { entries })
}

pub fn cmd_eval(run: &EvalRun) -> Result<Vec<PathBuf>> {
    let out = required(&run.out, "out")?;
    let report = eval_report(run)?;
    write_json(out, &report)?;
    Ok(vec![out.to_path_buf()])
}

pub fn cmd_export_features(run: &ExportRun) -> Result<Vec<PathBuf>> {
    let data_dir = required(&run.data, "data")?;
    let ckpt = required(&run.backbone, "backbone")?;
    let out = required(&run.out, "out")?;
    let (backbone, hash) = load_backbone(ckpt)?;
    let adaptor = match &run.adaptor {
        Some(p) => Some(load_adaptor(p, &hash)?.0),
        None => None,
    };
    let (data, _) = read_dataset(data_dir)?;
    let features = export_features(&backbone, adaptor.as_ref(), &data.pairs_in(run.split))?;
    write_file(out, features.to_csv().as_bytes())?;
    Ok(vec![out.to_path_buf()])
}

pub fn probe_report(features: &FeatureBatch, config: &ProbeConfig) -> Result<ProbeReport> {
    Ok(ProbeReport {
        auc_laterality: linear_probe_auc(features, ProbeTarget::Laterality, config)?,
        auc_camera: linear_probe_auc(features, ProbeTarget::Camera, config)?,
    })
}

pub fn cmd_probe(run: &ProbeRun) -> Result<Vec<PathBuf>> {
    let path = required(&run.features, "features")?;
    let out = required(&run.out, "out")?;
    let mut cfg = run.probe.clone();
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read features {}: {e}", path.display())))?;
    let features = FeatureBatch::from_csv(&text)?;
    write_json(out, &probe_report(&features, &cfg)?)?;
    Ok(vec![out.to_path_buf()])
}

pub fn cmd_benchmark(run: &BenchmarkRun) -> Result<Vec<PathBuf>> {
    let out = required(&run.out, "out")?;
    let mut cfg = run.benchmark.clone();
    if let Some(s) = run.seed {
        cfg.data_seed = s;
    }
    let report = run_benchmark(&cfg, &run.cells, |line| eprintln!("{line}"))?;
    write_json(out, &report)?;
    Ok(vec![out.to_path_buf()])
}

fn parse_eval_target(s: &str) -> Result<EvalTarget> {
    let mut parts = s.splitn(2, ',');
    let backbone = parts.next().filter(|p| !p.is_empty());
    let backbone = backbone.ok_or_else(|| Error::Config(format!("bad --run '{s}'")))?;
    Ok(EvalTarget {
        backbone: PathBuf::from(backbone),
        adaptor: parts.next().filter(|p| !p.is_empty()).map(PathBuf::from),
    })
}

/// Runs a parsed command line and returns the files it wrote.
pub fn execute(cli: &Cli, env_seed: Option<&str>) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::GenData { cfg, out } => cmd_gen_data(&load_config(cfg, &[("out", out)], env_seed)?),
        Command::Pretrain {
            cfg,
            data,
            out,
            metrics,
            resume,
        } => cmd_pretrain(&load_config(
            cfg,
            &[("data", data), ("out", out), ("metrics", metrics), ("resume", resume)],
            env_seed,
        )?),
        Command::Adapt {
            cfg,
            data,
            backbone,
            out,
            metrics,
        } => cmd_adapt(&load_config(
            cfg,
            &[("data", data), ("backbone", backbone), ("out", out), ("metrics", metrics)],
            env_seed,
        )?),
        Command::Eval { cfg, data, runs, out } => {
            let mut run: EvalRun = load_config(cfg, &[("data", data), ("out", out)], env_seed)?;
            for r in runs {
                run.runs.push(parse_eval_target(r)?);
            }
            cmd_eval(&run)
        }
        Command::ExportFeatures {
            cfg,
            data,
            backbone,
            adaptor,
            out,
        } => cmd_export_features(&load_config(
            cfg,
            &[("data", data), ("backbone", backbone), ("adaptor", adaptor), ("out", out)],
            env_seed,
        )?),
        Command::Probe { cfg, features, out } => {
            cmd_probe(&load_config(cfg, &[("features", features), ("out", out)], env_seed)?)
        }
        Command::Benchmark { cfg, out } => cmd_benchmark(&load_config(cfg, &[("out", out)], env_seed)?),
    }
}

/// Full entry point: parses `args`, runs the command and maps the outcome
/// to an exit status (0 ok, 2 config, 3 data, 4 numeric).
pub fn main_with<I, T>(args: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, env_seed) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
