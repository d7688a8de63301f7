use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use rainnas_core::baselines::{self, BaselineKind};
use rainnas_core::data::{self, Dataset, Mode, SyntheticConfig};
use rainnas_core::dm;
use rainnas_core::grad::ParamSet;
use rainnas_core::metrics::{pixel_error_maps, write_raster, MetricReport};
use rainnas_core::retrain::{self, TrainConfig};
use rainnas_core::search::{self, SearchConfig};
use rainnas_core::supernet::ArchChoice;

use crate::manifest::{beside, Recorder};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn config_error(msg: impl Into<String>) -> CliError {
    CliError {
        code: 5,
        kind: "config",
        msg: msg.into(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Replaces the extension-bearing file name of `path` with `stem.suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Smod,
    Mmod,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Smod => Mode::Smod,
            ModeArg::Mmod => Mode::Mmod,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

fn select(data: &Dataset, split: SplitArg) -> Dataset {
    match split {
        SplitArg::All => data.clone(),
        SplitArg::Train => data::split_timeline(data).0,
        SplitArg::Val => data::split_timeline(data).1,
    }
}

/// Attaches the offending path to a failed read.
fn reading<T>(path: &Path, r: rainnas_core::Result<T>) -> Result<T> {
    r.map_err(|e| {
        let mut e = CliError::from(e);
        e.msg = format!("{}: {}", path.display(), e.msg);
        e
    })
}

fn load_data(path: &Path, rec: &mut Recorder) -> Result<Dataset> {
    rec.input(path);
    reading(path, Dataset::load(path))
}

#[derive(Args, Serialize)]
pub struct GenArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Mmod)]
    pub mode: ModeArg,
    /// Override the mode's member count.
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut rec = Recorder::new("gen", Some(a.seed), &a);
    let mut cfg = SyntheticConfig::new(a.n, a.mode.into(), a.seed);
    if let Some(c) = a.members {
        cfg.channels = c;
    }
    let data = data::generate_synthetic(&cfg)?;
    ensure_parent(&a.out)?;
    data.save(&a.out)?;
    rec.output(&a.out);
    rec.finish(&beside(&a.out))
}

#[derive(Args, Serialize)]
pub struct SearchArgs {
    /// Dataset file; the search uses its training split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    /// Epoch t trains weights when t % u > 0, logits otherwise.
    #[arg(long, default_value_t = 3)]
    pub u: usize,
    #[arg(long, default_value_t = 0.99)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub arch_lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 24)]
    pub crop: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    #[arg(long, default_value_t = 4)]
    pub pool: usize,
    /// Cap on mini-batches per epoch.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Use observation MSE instead of the contrastive objective.
    #[arg(long)]
    pub supervised: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Architecture JSON to write.
    #[arg(long)]
    pub out_arch: PathBuf,
    /// Per-epoch CSV log; defaults to `<arch stem>.log.csv`.
    #[arg(long)]
    pub out_log: Option<PathBuf>,
    /// Also save the online supernet weights (for `retrain --reuse`).
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
}

pub fn search(a: SearchArgs) -> Result<()> {
    let mut rec = Recorder::new("search", Some(a.seed), &a);
    let cfg = SearchConfig {
        epochs: a.epochs,
        blocks: a.blocks,
        u: a.u,
        momentum: a.momentum,
        batch_size: a.batch,
        lr: a.lr,
        arch_lr: a.arch_lr,
        crop: a.crop,
        features: a.features,
        projector_pool: a.pool,
        steps_per_epoch: a.steps_per_epoch,
        supervised: a.supervised,
        seed: a.seed,
    };
    cfg.validate()?;
    let data = load_data(&a.data, &mut rec)?;
    let (train, _) = data::split_timeline(&data);
    let out = search::run_search(&train, &cfg)?;
    ensure_parent(&a.out_arch)?;
    out.arch.save(&a.out_arch)?;
    rec.output(&a.out_arch);
    let log_path = a.out_log.clone().unwrap_or_else(|| sibling(&a.out_arch, "log.csv"));
    ensure_parent(&log_path)?;
    let mut buf = Vec::new();
    search::write_search_log(&mut buf, &out.log)?;
    fs::write(&log_path, buf)?;
    rec.output(&log_path);
    if let Some(w) = &a.out_weights {
        ensure_parent(w)?;
        out.state.online.save(w)?;
        rec.output(w);
    }
    println!("{}", out.arch.to_json());
    rec.finish(&beside(&a.out_arch))
}

#[derive(Args, Serialize)]
pub struct RetrainArgs {
    /// Dataset file; trains on its training split, scores its validation split.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture JSON.
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2.5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Weight of the classification term.
    #[arg(long, default_value_t = 10.0)]
    pub ch: f64,
    /// Soft-binning temperature, mm/day.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub eps: f64,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    #[arg(long, default_value_t = 4)]
    pub pool: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from searched supernet weights instead of a fresh init.
    #[arg(long)]
    pub reuse: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Metric history CSV; defaults to `<ckpt stem>.history.csv`.
    #[arg(long)]
    pub out_history: Option<PathBuf>,
}

pub fn retrain(a: RetrainArgs) -> Result<()> {
    let mut rec = Recorder::new("retrain", Some(a.seed), &a);
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        c_h: a.ch,
        eps: a.eps,
        tau: a.tau,
        features: a.features,
        projector_pool: a.pool,
        seed: a.seed,
    };
    cfg.validate()?;
    rec.input(&a.arch);
    let arch = reading(&a.arch, ArchChoice::load(&a.arch))?;
    let data = load_data(&a.data, &mut rec)?;
    let init = match &a.reuse {
        Some(p) => {
            rec.input(p);
            Some(reading(p, ParamSet::load(p))?)
        }
        None => None,
    };
    let (train, val) = data::split_timeline(&data);
    let out = retrain::retrain(&arch, &train, &val, &cfg, init)?;
    ensure_parent(&a.out_ckpt)?;
    out.params.save(&a.out_ckpt)?;
    rec.output(&a.out_ckpt);
    let hist = a.out_history.clone().unwrap_or_else(|| sibling(&a.out_ckpt, "history.csv"));
    ensure_parent(&hist)?;
    let mut buf = Vec::new();
    retrain::write_history(&mut buf, &out.history)?;
    fs::write(&hist, buf)?;
    rec.output(&hist);
    rec.finish(&beside(&a.out_ckpt))
}

/// Writes `metrics.csv`, `losses.csv` and the MAE/RMSE rasters into `dir`.
fn write_scores(dir: &Path, preds: &[Vec<f64>], data: &Dataset, rec: &mut Recorder) -> Result<MetricReport> {
    fs::create_dir_all(dir)?;
    let report = retrain::evaluate(preds, data)?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
    rec.output(&metrics);

    let obs: Vec<Vec<f64>> = data
        .samples()
        .iter()
        .map(|s| s.observation.iter().map(|&v| v as f64).collect())
        .collect();
    let losses = dir.join("losses.csv");
    dm::write_loss_series(&losses, &dm::per_sample_mse(preds, &obs)?)?;
    rec.output(&losses);

    let (mae, rmse) = pixel_error_maps(preds, &obs)?;
    for (name, values) in [("mae", mae), ("rmse", rmse)] {
        let path = dir.join(format!("{name}.raster"));
        let mut buf = Vec::new();
        write_raster(&mut buf, name, data.width, data.height, &values)?;
        fs::write(&path, buf)?;
        rec.output(&path);
    }
    println!("{}\n{}", MetricReport::CSV_HEADER, report.csv_row());
    Ok(report)
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", None, &a);
    rec.input(&a.arch);
    let arch = reading(&a.arch, ArchChoice::load(&a.arch))?;
    rec.input(&a.ckpt);
    let mut params = reading(&a.ckpt, ParamSet::load(&a.ckpt))?;
    let net = retrain::infer_network(&params, &arch)?;
    let data = load_data(&a.data, &mut rec)?;
    if data.channels != net.config.in_channels {
        return Err(config_error(format!(
            "checkpoint expects {} members, data has {}",
            net.config.in_channels, data.channels
        )));
    }
    let part = select(&data, a.split);
    let preds = retrain::predict_dataset(&net, &arch, &mut params, &part)?;
    write_scores(&a.out, &preds, &part, &mut rec)?;
    rec.finish(&a.out.join("manifest.json"))
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Em,
    Pm,
    Wem,
}

impl From<MethodArg> for BaselineKind {
    fn from(m: MethodArg) -> BaselineKind {
        match m {
            MethodArg::Em => BaselineKind::Em,
            MethodArg::Pm => BaselineKind::Pm,
            MethodArg::Wem => BaselineKind::Wem,
        }
    }
}

#[derive(Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Split to score; WEM weights always come from the training split.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let mut rec = Recorder::new("baseline", None, &a);
    let data = load_data(&a.data, &mut rec)?;
    let kind: BaselineKind = a.method.into();
    let weights = match kind {
        BaselineKind::Wem => Some(baselines::fit_wem_weights(&data::split_timeline(&data).0)?),
        _ => None,
    };
    let part = select(&data, a.split);
    let preds = baselines::predict(kind, &part, weights.as_deref())?;
    write_scores(&a.out, &preds, &part, &mut rec)?;
    if let Some(w) = weights {
        let path = a.out.join("weights.json");
        fs::write(&path, serde_json::json!({ "weights": w }).to_string() + "\n")?;
        rec.output(&path);
    }
    rec.finish(&a.out.join("manifest.json"))
}

#[derive(Args, Serialize)]
pub struct DmArgs {
    /// Loss series of the first forecaster (one value per line).
    #[arg(long = "lossA", alias = "loss-a")]
    pub loss_a: PathBuf,
    /// Loss series of the second forecaster.
    #[arg(long = "lossB", alias = "loss-b")]
    pub loss_b: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Optional CSV with `statistic,prob`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dm(a: DmArgs) -> Result<()> {
    let mut rec = Recorder::new("dm", None, &a);
    rec.input(&a.loss_a);
    rec.input(&a.loss_b);
    let la = reading(&a.loss_a, dm::read_loss_series(&a.loss_a))?;
    let lb = reading(&a.loss_b, dm::read_loss_series(&a.loss_b))?;
    let r = dm::dm_test(&la, &lb, a.horizon)?;
    println!("DM={} prob={}", r.statistic, r.prob);
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        fs::write(out, format!("statistic,prob\n{},{}\n", r.statistic, r.prob))?;
        rec.output(out);
        rec.finish(&beside(out))?;
    }
    Ok(())
}
