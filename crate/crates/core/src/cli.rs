//! Command-line front end. `main.rs` only forwards to [`run`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attention::CandidateOp;
use crate::car::LossRegion;
use crate::data::{load_cifar_batches, synth_shapes, ImageDataset};
use crate::error::{Error, Result};
use crate::gradcheck::run_gradcheck;
use crate::persist::{self, write_atomic, HistoryRow, MetricsRow};
use crate::plot::{history_series, metrics_series, render_svg, Metric};
use crate::scale::scale_sweep;
use crate::search::{
    bilevel_epoch, pipeline_hash, prepare_car_search, prepare_finetune, AlphaInit, SearchConfig, SearchData,
    SearchState,
};
use crate::space::MacroConfig;
use crate::tensor::{set_precision, Precision};
use crate::train::{train_with_callback, Selection, TrainConfig, TrainedModel};

pub const PRECISION_ENV: &str = "ATTNAS_PRECISION";

#[derive(Debug, Parser)]
#[command(name = "attnas", version, about = "Attention-only architecture search, training and evaluation")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Two-phase search (reconstruction, then classification) and discretization.
    Search(SearchArgs),
    /// Train a discretized architecture from scratch.
    Train(TrainArgs),
    /// Evaluate a trained model checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Render a history or metrics CSV as an SVG line chart.
    Plot(PlotArgs),
    /// Width and depth sweep of a fixed operation pattern.
    Scale(ScaleArgs),
    /// Dump a trained model checkpoint as JSON.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// Five stages on 32×32 inputs, full-length schedules.
    Full,
    /// Two stages on 16×16 inputs, short schedules.
    Desk,
}

impl Preset {
    fn macro_config(self) -> MacroConfig {
        match self {
            Preset::Full => MacroConfig::full_size(),
            Preset::Desk => MacroConfig::desk(),
        }
    }

    fn search_configs(self) -> (SearchConfig, SearchConfig) {
        match self {
            Preset::Full => (SearchConfig::car_search(), SearchConfig::finetune()),
            Preset::Desk => (SearchConfig::desk_car(), SearchConfig::desk_finetune()),
        }
    }

    fn train_config(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegionArg {
    All,
    Masked,
}

impl From<RegionArg> for LossRegion {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::All => LossRegion::All,
            RegionArg::Masked => LossRegion::Masked,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Loss,
    Accuracy,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Labeled dataset for the classification phase.
    #[arg(long, default_value = "synth:n=600,size=16,classes=3,seed=0")]
    data: DataSpec,
    /// Corpus for the reconstruction phase; defaults to --data.
    #[arg(long)]
    search_data: Option<DataSpec>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// TOML file with `[car_search]` and `[finetune]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// Reconstruction-phase epochs.
    #[arg(long)]
    car_epochs: Option<u64>,
    /// Stem width; every stage is scaled proportionally.
    #[arg(long)]
    channels: Option<usize>,
    /// Truncate the macro config to this many stages, or extend it with
    /// stages of doubled width.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs with consecutive seeds; the one with the lowest
    /// final validation loss is selected.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Skip the reconstruction phase.
    #[arg(long)]
    no_car: bool,
    /// Tie architecture rows of odd-numbered and of even-numbered stages.
    #[arg(long)]
    uniform_space: bool,
    /// `zeros` or `uniform:EPS`.
    #[arg(long)]
    alpha_init: Option<AlphaInitArg>,
    #[arg(long, value_enum)]
    loss_region: Option<RegionArg>,
    /// Carry the reconstruction phase's encoder weights into fine-tuning.
    #[arg(long)]
    warm_start_weights: bool,
    /// Continue from checkpoints in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value = "runs/search")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Architecture JSON written by `search`.
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, default_value = "synth:n=600,size=16,classes=3,seed=0")]
    data: DataSpec,
    #[arg(long, default_value = "synth:n=300,size=16,classes=3,seed=1")]
    test_data: DataSpec,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// TOML file with a `[train]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Stem width; every stage is scaled proportionally.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Select the reported epoch on this fraction of the training set
    /// instead of the test set.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "synth:n=300,size=16,classes=3,seed=1")]
    data: DataSpec,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds per operation.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value = "runs/gradcheck")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// `history.csv` from search or `metrics.csv` from train.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Loss)]
    metric: MetricArg,
    #[arg(long)]
    title: Option<String>,
    #[arg(long, default_value = "runs/plot")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScaleArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Stem widths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    channels: Vec<usize>,
    /// Stage counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    stages: Vec<usize>,
    /// Operations cycled over the layers.
    #[arg(long, value_delimiter = ',', default_value = "LocalSA_k3_h4")]
    pattern: Vec<String>,
    /// Training epochs per point; 0 only counts parameters.
    #[arg(long, default_value_t = 0)]
    epochs: u64,
    #[arg(long, default_value = "synth:n=600,size=16,classes=3,seed=0")]
    data: DataSpec,
    #[arg(long, default_value = "synth:n=300,size=16,classes=3,seed=1")]
    test_data: DataSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/scale")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "runs/export")]
    out: PathBuf,
}

/// Where images come from: `synth:n=600,size=16,classes=3,seed=0` or
/// `cifar:data_batch_1.bin,data_batch_2.bin`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synth {
        n: usize,
        size: usize,
        classes: usize,
        seed: u64,
    },
    Cifar {
        paths: Vec<PathBuf>,
    },
}

impl FromStr for DataSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synth" => {
                let (mut n, mut size, mut classes, mut seed) = (600, 16, 3, 0);
                for kv in rest.split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
                    let num = |v: &str| -> Result<u64> {
                        v.parse().map_err(|_| Error::Config(format!("`{k}` needs an integer, got `{v}`")))
                    };
                    match k {
                        "n" => n = num(v)? as usize,
                        "size" => size = num(v)? as usize,
                        "classes" => classes = num(v)? as usize,
                        "seed" => seed = num(v)?,
                        _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
                    }
                }
                Ok(DataSpec::Synth { n, size, classes, seed })
            }
            "cifar" => {
                let paths: Vec<PathBuf> = rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
                if paths.is_empty() {
                    return Err(Error::Config("cifar: needs at least one batch file".into()));
                }
                Ok(DataSpec::Cifar { paths })
            }
            _ => Err(Error::Config(format!("unknown data source `{kind}` (expected synth: or cifar:)"))),
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<ImageDataset> {
        match self {
            DataSpec::Synth { n, size, classes, seed } => synth_shapes(*seed, *n, *size, *classes),
            DataSpec::Cifar { paths } => load_cifar_batches(paths),
        }
    }

    fn files(&self) -> Vec<PathBuf> {
        match self {
            DataSpec::Synth { .. } => Vec::new(),
            DataSpec::Cifar { paths } => paths.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AlphaInitArg(AlphaInit);

impl FromStr for AlphaInitArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "zeros" => Ok(AlphaInitArg(AlphaInit::Zeros)),
            Some(("uniform", eps)) => match eps.parse::<f64>() {
                Ok(eps) if eps > 0.0 && eps.is_finite() => Ok(AlphaInitArg(AlphaInit::Uniform { eps })),
                _ => Err(Error::Config(format!("uniform init needs a positive epsilon, got `{eps}`"))),
            },
            _ => Err(Error::Config(format!("expected `zeros` or `uniform:EPS`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written as `<out>/manifest.json` by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub precision: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
}

/// Per-seed result of `search`, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub seed: u64,
    pub final_val_loss: f64,
    pub choices: Vec<String>,
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let matches = match command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn command() -> clap::Command {
    let (car, ft) = Preset::Full.search_configs();
    let search_keys = format!(
        "Config keys (--config TOML) with their full-scale defaults; --preset desk shortens schedules:\n{}{}",
        key_listing("car_search", &car),
        key_listing("finetune", &ft)
    );
    let train_keys = format!(
        "Config keys (--config TOML) with their full-scale defaults:\n{}",
        key_listing("train", &TrainConfig::default())
    );
    let precision = format!("Environment: {PRECISION_ENV}=f32|f64 selects arithmetic precision (default f64).");
    Cli::command()
        .after_help(precision)
        .mut_subcommand("search", |c| c.after_long_help(search_keys))
        .mut_subcommand("train", |c| c.after_long_help(train_keys))
}

fn key_listing<T: Serialize>(table: &str, cfg: &T) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) if !m.contains_key("kind") => {
                for (k, v) in m {
                    walk(&format!("{prefix}.{k}"), v, out);
                }
            }
            _ => {
                let _ = writeln!(out, "  {prefix} = {v}");
            }
        }
    }
    let mut out = format!("[{table}]\n");
    walk(table, &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    out.replace(&format!("  {table}."), "  ")
}

fn dispatch(cli: Cli, args: &[OsString]) -> Result<()> {
    let precision = match std::env::var(PRECISION_ENV) {
        Ok(v) => v.parse()?,
        Err(std::env::VarError::NotPresent) => Precision::F64,
        Err(_) => return Err(Error::Config(format!("{PRECISION_ENV} is not valid UTF-8"))),
    };
    set_precision(precision);
    let ctx = Context {
        start: Instant::now(),
        command: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        precision,
    };
    match cli.command {
        Command::Search(a) => cmd_search(&ctx, a, args),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Plot(a) => cmd_plot(&ctx, a),
        Command::Scale(a) => cmd_scale(&ctx, a),
        Command::Export(a) => cmd_export(&ctx, a),
    }
}

struct Context {
    start: Instant,
    command: Vec<String>,
    precision: Precision,
}

impl Context {
    fn manifest(&self, sub: &str, config: Value, seeds: Vec<u64>, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<RunManifest> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            command: self.command.clone(),
            subcommand: sub.into(),
            config,
            seeds,
            version: env!("CARGO_PKG_VERSION").into(),
            precision: match self.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
            inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        })
    }

    fn write_manifest(
        &self,
        out: &Path,
        sub: &str,
        config: Value,
        seeds: Vec<u64>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let m = self.manifest(sub, config, seeds, inputs, outputs)?;
        write_json(&out.join("manifest.json"), &m)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Read the TOML tables named in `tables` from `path`.
fn config_tables(path: Option<&Path>, tables: &[&str]) -> Result<Vec<Option<Value>>> {
    let Some(path) = path else {
        return Ok(vec![None; tables.len()]);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if let Some(k) = doc.keys().find(|k| !tables.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "{}: unknown table `{k}` (expected one of {tables:?})",
            path.display()
        )));
    }
    Ok(tables
        .iter()
        .map(|t| doc.get(*t).map(|v| serde_json::to_value(v).expect("TOML converts to JSON")))
        .collect())
}

/// Overlay `over` onto `base`, rejecting keys `base` does not have. Tagged
/// enums (objects with a `kind`) are replaced whole.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(cfg: &T, over: Option<Value>, table: &str) -> Result<T> {
    let Some(over) = over else {
        let v = serde_json::to_value(cfg).expect("config serializes");
        return serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()));
    };
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    merge(&mut v, over, table)?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("[{table}]: {e}")))
}

#[derive(Debug, Clone, Serialize)]
struct SearchPlan {
    preset: Preset,
    data: DataSpec,
    search_data: DataSpec,
    skip_car: bool,
    macro_config: MacroConfig,
    car_search: SearchConfig,
    finetune: SearchConfig,
}

fn resolve_search(a: &SearchArgs) -> Result<SearchPlan> {
    if a.warm_start_weights && a.no_car {
        return Err(Error::Config("--warm-start-weights needs the reconstruction phase (drop --no-car)".into()));
    }
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let (car, ft) = a.preset.search_configs();
    let tables = config_tables(a.config.as_deref(), &["car_search", "finetune"])?;
    let mut car = overlay(&car, tables[0].clone(), "car_search")?;
    let mut ft = overlay(&ft, tables[1].clone(), "finetune")?;
    let mut macro_config = a.preset.macro_config();
    if let Some(n) = a.stages {
        if n == 0 {
            return Err(Error::Config("--stages must be at least 1".into()));
        }
        macro_config = macro_config.with_stage_count(n);
    }
    if let Some(c) = a.channels {
        macro_config = macro_config.scaled(c)?;
    }
    macro_config.validate()?;
    for c in [&mut car, &mut ft] {
        c.seed = a.seed;
        if let Some(bs) = a.batch_size {
            c.batch_size = bs;
        }
        if a.uniform_space {
            c.tie_stages = true;
        }
        if let Some(AlphaInitArg(init)) = a.alpha_init {
            c.alpha_init = init;
        }
        if let Some(r) = a.loss_region {
            c.car.loss_region = r.into();
        }
    }
    if let Some(e) = a.epochs {
        ft.epochs = e;
    }
    if let Some(e) = a.car_epochs {
        car.epochs = e;
    }
    if a.warm_start_weights {
        ft.warm_start_weights = true;
    }
    for c in [&car, &ft] {
        if c.batch_size == 0 || c.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(c.split_ratio > 0.0 && c.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
    }
    Ok(SearchPlan {
        preset: a.preset,
        data: a.data.clone(),
        search_data: a.search_data.clone().unwrap_or_else(|| a.data.clone()),
        skip_car: a.no_car,
        macro_config,
        car_search: car,
        finetune: ft,
    })
}

fn cmd_search(ctx: &Context, a: SearchArgs, args: &[OsString]) -> Result<()> {
    let plan = resolve_search(&a)?;
    create_dir(&a.out)?;
    if a.seeds > 1 {
        return search_multi(ctx, &a, &plan, args);
    }
    let target = plan.data.load()?;
    let corpus = if plan.skip_car || plan.search_data == plan.data {
        None
    } else {
        Some(plan.search_data.load()?)
    };
    let ckpt = |phase: &str| a.out.join(format!("{phase}.ckpt"));
    let save = |state: &SearchState| persist::save_checkpoint(&state.to_checkpoint(), ckpt(state.config.phase.label()));
    let load = |phase: &str, expected: &SearchConfig| -> Result<Option<SearchState>> {
        let path = ckpt(phase);
        if !a.resume || !path.exists() {
            return Ok(None);
        }
        let state = SearchState::from_checkpoint(&persist::load_checkpoint(&path)?)?;
        if &state.config != expected || state.supernet.config != plan.macro_config {
            return Err(Error::Config(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
        eprintln!("resuming {phase} after epoch {}", state.epoch);
        Ok(Some(state))
    };
    let run = |state: &mut SearchState, data: &SearchData| -> Result<()> {
        while state.epoch < state.config.epochs {
            let s = bilevel_epoch(state, data)?;
            eprintln!(
                "{} epoch {}/{}: train loss {:.4}, val loss {:.4}{}",
                state.config.phase.label(),
                state.epoch,
                state.config.epochs,
                s.train_loss,
                s.val_loss,
                s.val_acc.map(|v| format!(", val acc {v:.3}")).unwrap_or_default()
            );
            save(state)?;
        }
        Ok(())
    };

    let mut ft_cfg = plan.finetune.clone();
    ft_cfg.phase = crate::search::Phase::Finetune;
    let mut car_cfg = plan.car_search.clone();
    car_cfg.phase = crate::search::Phase::CarSearch;

    let resumed_ft = load("finetune", &ft_cfg)?;
    let car_state = if plan.skip_car {
        None
    } else {
        let (fresh, data) = prepare_car_search(&car_cfg, &plan.macro_config, corpus.as_ref().unwrap_or(&target))?;
        let mut state = match load("car_search", &car_cfg)? {
            Some(s) => s,
            None if resumed_ft.is_some() => {
                return Err(Error::Config("finetune checkpoint found without its car_search checkpoint".into()))
            }
            None => fresh,
        };
        if resumed_ft.is_none() {
            run(&mut state, &data)?;
        }
        Some(state)
    };
    let car_alpha = car_state.as_ref().map(|s| s.alpha().clone());
    let weights = car_state
        .as_ref()
        .filter(|_| ft_cfg.warm_start_weights)
        .map(|s| &s.supernet.store);
    let (fresh, data) = prepare_finetune(&ft_cfg, &plan.macro_config, &target, car_alpha.as_ref(), weights)?;
    let mut ft = resumed_ft.unwrap_or(fresh);
    run(&mut ft, &data)?;

    let mut history: Vec<HistoryRow> = car_state.map(|s| s.history).unwrap_or_default();
    history.extend(ft.history.iter().cloned());
    let final_val_loss = ft
        .history
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .map_or(f64::NAN, |r| r.loss);
    let arch = ft
        .supernet
        .discretize(a.seed, pipeline_hash(&car_cfg, &ft_cfg, plan.skip_car))?;
    let arch_path = a.out.join("arch.json");
    let history_path = a.out.join("history.csv");
    let summary_path = a.out.join("summary.json");
    persist::save_arch(&arch, &arch_path)?;
    persist::write_csv(&history, &history_path)?;
    let summary = SearchSummary {
        seed: a.seed,
        final_val_loss,
        choices: arch.choices.iter().map(|c| c.to_string()).collect(),
    };
    write_json(&summary_path, &summary)?;
    println!("seed {}: final val loss {:.4}", a.seed, final_val_loss);
    println!("architecture: {}", summary.choices.join(" "));
    let mut outputs = vec![arch_path, history_path, summary_path, ckpt("finetune")];
    if !plan.skip_car {
        outputs.push(ckpt("car_search"));
    }
    let inputs: Vec<PathBuf> = plan.data.files().into_iter().chain(plan.search_data.files()).collect();
    ctx.write_manifest(&a.out, "search", to_value(&plan), vec![a.seed], &inputs, &outputs)
}

/// One child process per seed; the lowest final validation loss wins.
fn search_multi(ctx: &Context, a: &SearchArgs, plan: &SearchPlan, args: &[OsString]) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed + i).collect();
    let mut summaries = Vec::new();
    for &s in &seeds {
        let dir = a.out.join(format!("seed-{s}"));
        eprintln!("seed {s}: running in {}", dir.display());
        let status = std::process::Command::new(&exe)
            .args(&args[1..])
            .arg("--seed")
            .arg(s.to_string())
            .arg("--seeds")
            .arg("1")
            .arg("--out")
            .arg(&dir)
            .status()
            .map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            let code = status.code().unwrap_or(1);
            let msg = format!("child run for seed {s} exited with code {code}");
            return Err(match code {
                2 => Error::Numerical(msg),
                3 => Error::io(&dir, std::io::Error::other(msg)),
                _ => Error::Config(msg),
            });
        }
        summaries.push(read_json::<SearchSummary>(&dir.join("summary.json"))?);
    }
    let best = summaries
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.final_val_loss.total_cmp(&y.1.final_val_loss))
        .map(|(i, _)| i)
        .expect("at least one seed");
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        final_val_loss: f64,
        selected: bool,
    }
    let rows: Vec<Row> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| Row {
            seed: s.seed,
            final_val_loss: s.final_val_loss,
            selected: i == best,
        })
        .collect();
    let best_dir = a.out.join(format!("seed-{}", summaries[best].seed));
    let mut outputs = Vec::new();
    for f in ["arch.json", "history.csv", "summary.json"] {
        let (src, dst) = (best_dir.join(f), a.out.join(f));
        let bytes = std::fs::read(&src).map_err(|e| Error::io(&src, e))?;
        write_atomic(&dst, &bytes)?;
        outputs.push(dst);
    }
    let seeds_path = a.out.join("seeds.csv");
    persist::write_csv(&rows, &seeds_path)?;
    outputs.push(seeds_path);
    for r in &rows {
        println!("seed {}: final val loss {:.4}{}", r.seed, r.final_val_loss, if r.selected { "  <- selected" } else { "" });
    }
    let inputs: Vec<PathBuf> = plan.data.files().into_iter().chain(plan.search_data.files()).collect();
    ctx.write_manifest(&a.out, "search", to_value(plan), seeds, &inputs, &outputs)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

#[derive(Debug, Clone, Serialize)]
struct TrainPlan {
    arch: PathBuf,
    data: DataSpec,
    test_data: DataSpec,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: usize,
    pub best_epoch: u64,
    pub top1_error: f64,
    pub top5_error: Option<f64>,
    pub wall_clock_s: f64,
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let tables = config_tables(a.config.as_deref(), &["train"])?;
    let mut cfg = overlay(&a.preset.train_config(), tables[0].clone(), "train")?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(c) = a.channels {
        cfg.initial_channels = Some(c);
    }
    if let Some(bs) = a.batch_size {
        cfg.batch_size = bs;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.holdout {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config("--holdout must lie in (0, 1)".into()));
        }
        cfg.selection = Selection::Validation { ratio: 1.0 - r };
    }
    if a.no_augment {
        cfg.augmentation = None;
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let arch = persist::load_arch(&a.arch)?;
    let train = a.data.load()?;
    let test = a.test_data.load()?;
    create_dir(&a.out)?;
    let outcome = train_with_callback(&arch, &cfg, &train, &test, |r: &MetricsRow| {
        eprintln!(
            "epoch {}: train loss {:.4}, test top-1 {:.3}",
            r.epoch, r.train_loss, r.test_top1
        );
    })?;
    let eval = outcome.model.evaluate(&test, cfg.batch_size.max(64))?;
    let report = TrainReport {
        params: outcome.params,
        best_epoch: outcome.best_epoch,
        top1_error: eval.top1_error,
        top5_error: eval.top5_error,
        wall_clock_s: ctx.start.elapsed().as_secs_f64(),
    };
    let paths = [a.out.join("metrics.csv"), a.out.join("model.ckpt"), a.out.join("report.json")];
    persist::write_csv(&outcome.metrics, &paths[0])?;
    persist::save_checkpoint(&outcome.model.to_checkpoint()?, &paths[1])?;
    write_json(&paths[2], &report)?;
    println!(
        "params {}  best epoch {}  top-1 error {:.4}{}",
        report.params,
        report.best_epoch,
        report.top1_error,
        report.top5_error.map(|e| format!("  top-5 error {e:.4}")).unwrap_or_default()
    );
    let plan = TrainPlan {
        arch: a.arch.clone(),
        data: a.data.clone(),
        test_data: a.test_data.clone(),
        train: cfg.clone(),
    };
    let inputs: Vec<PathBuf> = std::iter::once(a.arch).chain(a.data.files()).chain(a.test_data.files()).collect();
    ctx.write_manifest(&a.out, "train", to_value(&plan), vec![cfg.seed], &inputs, &paths)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::from_checkpoint(&persist::load_checkpoint(path)?)
}

fn cmd_eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let model = load_model(&a.checkpoint)?;
    let ds = a.data.load()?;
    let report = model.evaluate(&ds, a.batch_size)?;
    create_dir(&a.out)?;
    let path = a.out.join("report.json");
    write_json(&path, &report)?;
    println!(
        "{} images  loss {:.4}  top-1 error {:.4}{}",
        report.count,
        report.loss,
        report.top1_error,
        report.top5_error.map(|e| format!("  top-5 error {e:.4}")).unwrap_or_default()
    );
    let config = serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "batch_size": a.batch_size });
    let inputs: Vec<PathBuf> = std::iter::once(a.checkpoint).chain(a.data.files()).collect();
    ctx.write_manifest(&a.out, "eval", config, vec![], &inputs, &[path])
}

fn cmd_gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let report = run_gradcheck(a.seed, a.seeds)?;
    println!("{report}");
    create_dir(&a.out)?;
    let path = a.out.join("gradcheck.json");
    write_json(&path, &report)?;
    let config = serde_json::json!({ "first_seed": a.seed, "seeds": a.seeds });
    let seeds = (a.seed..a.seed + a.seeds as u64).collect();
    ctx.write_manifest(&a.out, "gradcheck", config, seeds, &[], &[path])?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for: {}", report.failing().join(", "))))
    }
}

fn cmd_plot(ctx: &Context, a: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let metric = match a.metric {
        MetricArg::Loss => Metric::Loss,
        MetricArg::Accuracy => Metric::Accuracy,
    };
    let header = text.lines().next().unwrap_or("");
    let series = if header.starts_with("phase,") {
        history_series(&persist::parse_csv::<HistoryRow>(&text)?, metric)
    } else if header.starts_with("epoch,") {
        metrics_series(&persist::parse_csv::<MetricsRow>(&text)?, metric)
    } else {
        return Err(Error::Parse(format!("{}: not a history or metrics CSV", a.input.display())));
    };
    let y_label = match metric {
        Metric::Loss => "loss",
        Metric::Accuracy => "accuracy",
    };
    let title = a.title.clone().unwrap_or_else(|| a.input.display().to_string());
    let svg = render_svg(&title, "epoch", y_label, &series)?;
    create_dir(&a.out)?;
    let path = a.out.join("plot.svg");
    write_atomic(&path, svg.as_bytes())?;
    println!("{} series -> {}", series.len(), path.display());
    let config = serde_json::json!({ "input": a.input, "metric": y_label, "title": title });
    ctx.write_manifest(&a.out, "plot", config, vec![], &[a.input], &[path])
}

fn cmd_scale(ctx: &Context, a: ScaleArgs) -> Result<()> {
    let pattern = a
        .pattern
        .iter()
        .map(|s| s.parse::<CandidateOp>())
        .collect::<Result<Vec<_>>>()?;
    if a.channels.is_empty() || a.stages.is_empty() || a.channels.contains(&0) {
        return Err(Error::Config("--channels and --stages need positive values".into()));
    }
    let train = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..a.preset.train_config()
    };
    let data = if a.epochs > 0 {
        Some((a.data.load()?, a.test_data.load()?))
    } else {
        None
    };
    let rows = scale_sweep(
        &a.preset.macro_config(),
        &pattern,
        &a.channels,
        &a.stages,
        &train,
        data.as_ref().map(|(x, y)| (x, y)),
    )?;
    create_dir(&a.out)?;
    let path = a.out.join("scale.csv");
    persist::write_csv(&rows, &path)?;
    println!("{:>8} {:>6} {:>6} {:>10} {:>8}", "channels", "stages", "layers", "params", "top1");
    for r in &rows {
        println!(
            "{:>8} {:>6} {:>6} {:>10} {:>8}",
            r.channels,
            r.stages,
            r.layers,
            r.params,
            r.top1_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    let config = serde_json::json!({
        "preset": a.preset,
        "channels": a.channels,
        "stages": a.stages,
        "pattern": a.pattern,
        "train": train,
        "data": data.as_ref().map(|_| (&a.data, &a.test_data)),
    });
    let inputs: Vec<PathBuf> = if a.epochs > 0 {
        a.data.files().into_iter().chain(a.test_data.files()).collect()
    } else {
        Vec::new()
    };
    ctx.write_manifest(&a.out, "scale", config, vec![a.seed], &inputs, &[path])
}

/// Model JSON written by `export`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedModel {
    pub arch: crate::space::Architecture,
    pub initial_channels: Option<usize>,
    pub normalization: ExportedNorm,
    pub params: Vec<ExportedParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn cmd_export(ctx: &Context, a: ExportArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let out = ExportedModel {
        arch: model.network.arch.clone(),
        initial_channels: model.initial_channels,
        normalization: ExportedNorm {
            mean: model.norm.mean,
            std: model.norm.std,
        },
        params: model
            .network
            .store
            .entries()
            .iter()
            .map(|e| ExportedParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })
            .collect(),
    };
    create_dir(&a.out)?;
    let path = a.out.join("model.json");
    write_json(&path, &out)?;
    println!("{} tensors -> {}", out.params.len(), path.display());
    let config = serde_json::json!({ "checkpoint": a.checkpoint });
    ctx.write_manifest(&a.out, "export", config, vec![], &[a.checkpoint], &[path])
}
