//! Command-line entry point.
//!
//! Every stage reads and writes files, so `ingest -> label -> train -> eval`
//! can be re-run from any persisted intermediate. Outputs are written to a
//! temporary sibling and renamed into place; when a command fails, outputs it
//! already committed are removed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::backbone::{BackboneKind, ModelError};
use crate::config::{ConfigError, ProviderKind, RunConfig};
use crate::encoder::Dynamics;
use crate::eval::{
    aggregate_runs, case_study_table, depth_stratified, render_stage_figure, write_aggregate_csv, write_metrics_csv,
    write_stage_table, EvalError, MetricsRow,
};
use crate::format::{read_ndtree, write_ndtree, FormatError, LabeledTree};
use crate::ingest::{parse_dataset, split, DatasetFormat, IngestError, SplitIndices};
use crate::model::{Checkpoint, CODE_VERSION};
use crate::stance::{label_dataset, HttpProvider, LabelCache, LabelError, MockProvider, StanceProvider};
use crate::synthetic::{GeneratorError, Regime, SyntheticGenerator};
use crate::training::{predict_all, train, RateInit, TrainError};

#[derive(Debug, Parser)]
#[command(name = "ein", version, about = "Rumor detection on propagation trees with an epidemiology-informed encoder")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a raw dataset into featurized canonical trees.
    Ingest(IngestArgs),
    /// Attach stance/state labels to trees.
    Label(LabelArgs),
    /// Generate a synthetic labeled dataset.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write a metrics table.
    Eval(EvalArgs),
    /// Grid over rate initialisations and lambda, several runs each.
    Sweep(SweepArgs),
    /// Export per-stage state distributions of one event as a table and figure.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// native, weibo-style or pheme-style
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub trees: PathBuf,
    #[arg(long, value_parser = ProviderKind::from_str)]
    pub provider: Option<ProviderKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Per-class regimes `alpha:beta[:min-max[:depth]]`, comma separated;
    /// class i is the i-th entry.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long, value_parser = BackboneKind::from_str)]
    pub backbone: Option<BackboneKind>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Weight of the classification loss (0 trains on the state loss only).
    #[arg(long)]
    pub ce_weight: Option<f64>,
    #[arg(long, value_parser = RateInit::from_str)]
    pub alpha0: Option<RateInit>,
    #[arg(long, value_parser = RateInit::from_str)]
    pub beta0: Option<RateInit>,
    /// eusd or usd
    #[arg(long, value_parser = Dynamics::from_str)]
    pub dynamics: Option<Dynamics>,
    /// Train the backbone-only baseline.
    #[arg(long)]
    pub no_encoder: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (defaults to `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub by_depth: bool,
    /// train, val, test or all
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML file whose `[sweep]` section (and any other section) defines the grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub event_id: String,
    /// SVG figure; the stage table goes next to it with a `.csv` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Provider(_) => 4,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(IngestError, FormatError, TrainError, EvalError, ModelError, GeneratorError, std::io::Error);

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Provider(_) => CliError::Provider(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Files committed by the running command, removed again if it fails.
#[derive(Default)]
struct Outputs {
    committed: Vec<PathBuf>,
}

impl Outputs {
    fn write(
        &mut self,
        path: &Path,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let tmp = temp_sibling(path);
        let result = (|| {
            let mut w = BufWriter::new(File::create(&tmp)?);
            body(&mut w)?;
            w.flush()?;
            drop(w);
            std::fs::rename(&tmp, path)?;
            Ok(())
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        } else {
            self.committed.push(path.to_path_buf());
        }
        result
    }

    /// For writers that insist on a path of their own.
    fn write_via_path(
        &mut self,
        path: &Path,
        body: impl FnOnce(&Path) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let tmp = temp_sibling(path);
        let result = body(&tmp).and_then(|()| std::fs::rename(&tmp, path).map_err(CliError::from));
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        } else {
            self.committed.push(path.to_path_buf());
        }
        result
    }

    fn rollback(&mut self) {
        for p in self.committed.drain(..) {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.partial", std::process::id()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn provenance(command: &str, cfg: &RunConfig) -> serde_json::Value {
    json!({
        "code_version": CODE_VERSION,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_json(),
    })
}

fn to_io(e: serde_json::Error) -> CliError {
    CliError::Data(e.to_string())
}

fn write_sidecar(outputs: &mut Outputs, path: &Path, prov: &serde_json::Value) -> Result<(), CliError> {
    outputs.write(&sidecar(path), |w| {
        serde_json::to_writer_pretty(&mut *w, prov).map_err(to_io)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn base_config(cli_config: Option<&Path>) -> Result<RunConfig, CliError> {
    match cli_config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn parse_format(s: &str) -> Result<DatasetFormat, CliError> {
    DatasetFormat::from_str(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_trees(cfg: &RunConfig) -> Result<Vec<LabeledTree>, CliError> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::Usage("no data path given (use --data or [data] path)".into()))?;
    if !path.exists() {
        return Err(CliError::Data(format!("{} does not exist", path.display())));
    }
    let trees = parse_dataset(path, cfg.data.format)?.trees;
    let featurizer = cfg.data.featurizer()?;
    Ok(featurizer.featurize_missing(trees))
}

fn split_trees(cfg: &RunConfig, trees: &[LabeledTree]) -> Result<SplitIndices, CliError> {
    let labels: Vec<u8> = trees.iter().map(|t| t.tree.label()).collect();
    Ok(split(&labels, &cfg.data.split_spec())?)
}

/// Parses `alpha:beta[:min-max[:depth]]` entries over a base regime list.
pub fn parse_classes(spec: &str, base: &[Regime]) -> Result<Vec<Regime>, String> {
    let fallback = base.first().copied().ok_or("no base regime")?;
    spec.split(',')
        .enumerate()
        .map(|(i, entry)| {
            let mut r = base.get(i).copied().unwrap_or(fallback);
            let parts: Vec<&str> = entry.trim().split(':').collect();
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("bad number '{s}' in '{entry}'"));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("bad count '{s}' in '{entry}'"));
            match parts.as_slice() {
                [a, b, rest @ ..] if rest.len() <= 2 => {
                    r.alpha = num(a)?;
                    r.beta = num(b)?;
                    if let Some(range) = rest.first() {
                        let (lo, hi) = range
                            .split_once('-')
                            .ok_or_else(|| format!("expected min-max in '{entry}'"))?;
                        r.min_nodes = int(lo)?;
                        r.max_nodes = int(hi)?;
                    }
                    if let Some(d) = rest.get(1) {
                        r.max_depth = int(d)?;
                    }
                    Ok(r)
                }
                _ => Err(format!("expected alpha:beta[:min-max[:depth]], got '{entry}'")),
            }
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut outputs = Outputs::default();
    let result = dispatch(cli, &mut outputs);
    if result.is_err() {
        outputs.rollback();
    }
    result
}

fn dispatch(cli: Cli, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = base_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Ingest(a) => ingest_cmd(cfg, a, outputs),
        Command::Label(a) => label_cmd(cfg, a, outputs),
        Command::Simulate(a) => simulate_cmd(cfg, a, outputs),
        Command::Train(a) => train_cmd(cfg, a, outputs),
        Command::Eval(a) => eval_cmd(cfg, a, outputs),
        Command::Sweep(a) => sweep_cmd(cfg, a, cli.seed, outputs),
        Command::Plot(a) => plot_cmd(a, outputs),
    }
}

fn ingest_cmd(mut cfg: RunConfig, a: IngestArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    if let Some(f) = &a.format {
        cfg.data.format = parse_format(f)?;
    }
    if let Some(d) = a.feature_dim {
        cfg.data.feature_dim = d;
    }
    if a.embeddings.is_some() {
        cfg.data.embeddings = a.embeddings.clone();
    }
    cfg.data.path = Some(a.input.clone());
    let dataset = parse_dataset(&a.input, cfg.data.format)?;
    let trees = cfg.data.featurizer()?.featurize_missing(dataset.trees);
    let meta = provenance("ingest", &cfg);
    outputs.write(&a.out, |w| Ok(write_ndtree(w, &trees, Some(&meta), true)?))?;
    println!("ingested {} events ({} skipped) -> {}", trees.len(), dataset.skipped, a.out.display());
    Ok(())
}

fn label_cmd(mut cfg: RunConfig, a: LabelArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let l = &mut cfg.labeler;
    if let Some(p) = a.provider {
        l.provider = p;
    }
    if let Some(e) = a.endpoint {
        l.endpoint = e;
    }
    if let Some(m) = a.model {
        l.model = m;
    }
    if let Some(t) = a.temperature {
        l.temperature = t;
    }
    if a.cache.is_some() {
        l.cache = a.cache.clone();
    }
    if let Some(c) = a.concurrency {
        l.concurrency = c;
    }
    cfg.data.path = Some(a.trees.clone());

    let read = read_ndtree(&a.trees)?;
    if read.trees.is_empty() {
        return Err(CliError::Data(format!("no valid events in {}", a.trees.display())));
    }
    let provider: Box<dyn StanceProvider> = match cfg.labeler.provider {
        ProviderKind::Mock => Box::new(MockProvider),
        ProviderKind::Http => {
            let p = HttpProvider::new(cfg.labeler.http_config(), cfg.labeler.templates())
                .map_err(|e| CliError::Provider(e.to_string()))?;
            if let Err(e) = p.require_token() {
                log::warn!("{e}; sending requests without authorization");
            }
            Box::new(p)
        }
    };
    let mut cache = match &cfg.labeler.cache {
        Some(path) => LabelCache::open(path)?,
        None => LabelCache::in_memory(),
    };
    let plain: Vec<_> = read.trees.iter().map(|t| t.tree.clone()).collect();
    let results = label_dataset(
        &plain,
        provider.as_ref(),
        &mut cache,
        &cfg.labeler.retry_policy(),
        cfg.labeler.concurrency,
    )?;

    let (mut labeled, mut failed, mut provider_failures) = (0usize, 0usize, 0usize);
    let mut out = Vec::with_capacity(read.trees.len());
    for (item, res) in read.trees.into_iter().zip(results) {
        match res {
            Ok(labels) => {
                labeled += 1;
                out.push(LabeledTree {
                    tree: item.tree,
                    labels: Some(labels),
                });
            }
            Err(LabelError::NoResponses(_)) => out.push(LabeledTree::unlabeled(item.tree)),
            Err(e) => {
                failed += 1;
                if matches!(e, LabelError::Provider(_)) {
                    provider_failures += 1;
                }
                log::warn!("{}: left without state labels: {e}", item.tree.event_id());
                out.push(LabeledTree::unlabeled(item.tree));
            }
        }
    }
    if labeled == 0 && provider_failures > 0 {
        return Err(CliError::Provider(format!(
            "stance provider failed for all {provider_failures} labelable events"
        )));
    }
    let meta = provenance("label", &cfg);
    outputs.write(&a.out, |w| Ok(write_ndtree(w, &out, Some(&meta), true)?))?;
    println!(
        "labeled {labeled} events, {failed} failed, {} without responses -> {}",
        out.len() - labeled - failed,
        a.out.display()
    );
    Ok(())
}

fn simulate_cmd(mut cfg: RunConfig, a: SimulateArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    if let Some(spec) = &a.classes {
        cfg.simulate.regimes = parse_classes(spec, &cfg.simulate.regimes).map_err(CliError::Usage)?;
    }
    if let Some(d) = a.feature_dim {
        cfg.simulate.feature_dim = d;
    }
    if let Some(s) = a.sigma {
        cfg.simulate.noise_sigma = s;
    }
    let generator = SyntheticGenerator::new(cfg.simulate.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let trees = generator.generate_dataset(a.count, cfg.seed)?;
    let meta = provenance("simulate", &cfg);
    outputs.write(&a.out, |w| Ok(write_ndtree(w, &trees, Some(&meta), true)?))?;
    println!("simulated {} events -> {}", trees.len(), a.out.display());
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(f) = &a.format {
        cfg.data.format = parse_format(f)?;
    }
    if let Some(b) = a.backbone {
        cfg.model.backbone = b;
    }
    if let Some(d) = a.dynamics {
        cfg.model.dynamics = d;
    }
    if a.no_encoder {
        cfg.model.use_encoder = false;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.ce_weight {
        t.ce_weight = v;
    }
    if let Some(v) = a.alpha0 {
        t.alpha0 = v;
    }
    if let Some(v) = a.beta0 {
        t.beta0 = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.threads {
        t.threads = v;
    }
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    apply_train_flags(&mut cfg, &a)?;
    let trees = load_trees(&cfg)?;
    let idx = split_trees(&cfg, &trees)?;
    let (tr, va, te) = idx.select(&trees);
    let train_cfg = cfg.train_config();
    train_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = train(&tr, &va, &train_cfg)?;

    let test_acc = if te.is_empty() {
        None
    } else {
        let preds = predict_all(&outcome.model, &te)?;
        let refs: Vec<_> = te.iter().map(|t| &t.tree).collect();
        depth_stratified(&refs, &preds, "train", "test")?.rows[0].acc
    };

    let ckpt = Checkpoint {
        code_version: CODE_VERSION.to_string(),
        seed: cfg.seed,
        run_config: cfg.to_json(),
        model: outcome.model,
        epochs_trained: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
    };
    outputs.write(&a.out, |w| {
        serde_json::to_writer(&mut *w, &ckpt).map_err(to_io)?;
        Ok(())
    })?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let prov = provenance("train", &cfg);
    outputs.write(&log_path, |w| {
        serde_json::to_writer(&mut *w, &json!({ "meta": prov })).map_err(to_io)?;
        w.write_all(b"\n")?;
        for rec in &outcome.log {
            serde_json::to_writer(&mut *w, rec).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let best = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch);
    println!(
        "trained {} epochs (best {}), val acc {}, test acc {}, alpha {:.4}, beta {:.4} -> {}",
        outcome.epochs_run,
        outcome.best_epoch,
        best.and_then(|r| r.val_acc).map_or("-".into(), |v| format!("{v:.4}")),
        test_acc.map_or("-".into(), |v| format!("{v:.4}")),
        ckpt.model.params.encoder.alpha(),
        ckpt.model.params.encoder.beta(),
        a.out.display()
    );
    Ok(())
}

fn checkpoint_config(ckpt: &Checkpoint) -> RunConfig {
    serde_json::from_value(ckpt.run_config.clone()).unwrap_or_else(|e| {
        log::warn!("checkpoint run config unreadable ({e}); using defaults");
        RunConfig::default()
    })
}

fn select_split(cfg: &RunConfig, trees: Vec<LabeledTree>, which: &str) -> Result<Vec<LabeledTree>, CliError> {
    if which == "all" {
        return Ok(trees);
    }
    let idx = split_trees(cfg, &trees)?;
    let (tr, va, te) = idx.select(&trees);
    match which {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(CliError::Usage(format!("unknown split '{other}' (train, val, test or all)"))),
    }
}

fn eval_cmd(_cli_cfg: RunConfig, a: EvalArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = checkpoint_config(&ckpt);
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(f) = &a.format {
        cfg.data.format = parse_format(f)?;
    }
    if a.by_depth {
        cfg.eval.by_depth = true;
    }
    if let Some(s) = &a.split {
        cfg.eval.split = s.clone();
    }
    let trees = load_trees(&cfg)?;
    let dim = trees[0].tree.features().map_or(0, |x| x.ncols());
    if dim != ckpt.model.config.input_dim {
        return Err(CliError::Data(format!(
            "data has {dim}-dimensional features, checkpoint expects {}",
            ckpt.model.config.input_dim
        )));
    }
    let items = select_split(&cfg, trees, &cfg.eval.split)?;
    if items.is_empty() {
        return Err(CliError::Data(format!("split '{}' is empty", cfg.eval.split)));
    }
    let preds = predict_all(&ckpt.model, &items)?;
    let refs: Vec<_> = items.iter().map(|t| &t.tree).collect();
    let run_id = a.run_id.clone().unwrap_or_else(|| format!("seed{}", ckpt.seed));
    let report = depth_stratified(&refs, &preds, &run_id, &cfg.eval.split)?;
    let rows: Vec<MetricsRow> = if cfg.eval.by_depth {
        report.rows.clone()
    } else {
        report.rows[..1].to_vec()
    };
    outputs.write(&a.out, |w| Ok(write_metrics_csv(w, &rows)?))?;
    let mut prov = provenance("eval", &cfg);
    prov["checkpoint"] = json!(a.ckpt.display().to_string());
    prov["checkpoint_code_version"] = json!(ckpt.code_version);
    prov["bucket_shares"] = serde_json::to_value(&report.shares).map_err(to_io)?;
    write_sidecar(outputs, &a.out, &prov)?;

    write_metrics_csv(std::io::stdout().lock(), &rows)?;
    if cfg.eval.by_depth {
        for s in &report.shares {
            println!("share {}: {:.2}% ({})", s.bucket, s.percent_2dp(), s.count);
        }
    }
    Ok(())
}

fn sweep_cmd(cli_cfg: RunConfig, a: SweepArgs, seed_flag: Option<u64>, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = match &a.grid {
        Some(p) => RunConfig::load(p)?,
        None => cli_cfg,
    };
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(f) = &a.format {
        cfg.data.format = parse_format(f)?;
    }
    if let Some(r) = a.runs {
        cfg.eval.runs = r;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if cfg.eval.runs < 2 {
        return Err(CliError::Usage("a sweep needs at least 2 runs per configuration".into()));
    }
    let trees = load_trees(&cfg)?;
    let idx = split_trees(&cfg, &trees)?;
    let (tr, va, te) = idx.select(&trees);
    if te.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let refs: Vec<_> = te.iter().map(|t| &t.tree).collect();

    // (grid, rate init, lambda)
    let mut grid: Vec<(&str, RateInit, f64)> = cfg
        .sweep
        .rate_inits
        .iter()
        .map(|&r| ("rates", r, cfg.train.lambda))
        .collect();
    grid.extend(cfg.sweep.lambdas.iter().map(|&l| ("lambda", cfg.train.alpha0, l)));

    let mut lines = Vec::new();
    for (kind, init, lambda) in &grid {
        let mut runs = Vec::new();
        for r in 0..cfg.eval.runs {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = cfg.seed + r as u64;
            run_cfg.train.lambda = *lambda;
            run_cfg.train.alpha0 = *init;
            run_cfg.train.beta0 = if *kind == "rates" { *init } else { cfg.train.beta0 };
            let outcome = train(&tr, &va, &run_cfg.train_config())?;
            let preds = predict_all(&outcome.model, &te)?;
            let report = depth_stratified(&refs, &preds, &format!("seed{}", run_cfg.seed), "test")?;
            runs.push(report.rows[..1].to_vec());
        }
        let agg = aggregate_runs(&runs)?;
        let beta = if *kind == "rates" { *init } else { cfg.train.beta0 };
        lines.push((kind.to_string(), *init, beta, *lambda, agg[0].clone()));
        log::info!("sweep {kind} alpha0={init} lambda={lambda}: acc {:?}", agg[0].acc);
    }

    outputs.write(&a.out, |w| {
        writeln!(w, "grid,alpha0,beta0,lambda,runs,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std")?;
        for (kind, a0, b0, lambda, row) in &lines {
            let f = |m: Option<crate::eval::MeanStd>| match m {
                Some(m) => format!("{:.6},{:.6}", m.mean, m.std),
                None => ",".to_string(),
            };
            writeln!(w, "{kind},{a0},{b0},{lambda},{},{},{},{}", row.runs, f(row.acc), f(row.auc), f(row.f1))?;
        }
        Ok(())
    })?;
    write_sidecar(outputs, &a.out, &provenance("sweep", &cfg))?;
    let all: Vec<_> = lines.iter().map(|l| l.4.clone()).collect();
    write_aggregate_csv(std::io::stdout().lock(), &all)?;
    Ok(())
}

fn embed_svg_metadata(svg: &str, meta: &serde_json::Value) -> String {
    let text = meta.to_string().replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    match svg.find("<svg").and_then(|s| svg[s..].find('>').map(|e| s + e + 1)) {
        Some(at) => format!("{}\n<metadata>{text}</metadata>{}", &svg[..at], &svg[at..]),
        None => svg.to_string(),
    }
}

fn plot_cmd(a: PlotArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = checkpoint_config(&ckpt);
    if let Some(d) = &a.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(f) = &a.format {
        cfg.data.format = parse_format(f)?;
    }
    let trees = load_trees(&cfg)?;
    let item = trees
        .iter()
        .find(|t| t.tree.event_id() == a.event_id)
        .ok_or_else(|| CliError::Data(format!("event '{}' not found", a.event_id)))?;
    let stages = case_study_table(&ckpt.model, &item.tree);
    let mut prov = provenance("plot", &cfg);
    prov["checkpoint"] = json!(a.ckpt.display().to_string());
    prov["event_id"] = json!(a.event_id);

    outputs.write_via_path(&a.out, |tmp| {
        render_stage_figure(tmp, &format!("event {}", a.event_id), &stages)?;
        let svg = std::fs::read_to_string(tmp)?;
        std::fs::write(tmp, embed_svg_metadata(&svg, &prov))?;
        Ok(())
    })?;
    let table = a.out.with_extension("csv");
    outputs.write(&table, |w| Ok(write_stage_table(w, &stages)?))?;
    write_sidecar(outputs, &table, &prov)?;
    write_stage_table(std::io::stdout().lock(), &stages)?;
    Ok(())
}
