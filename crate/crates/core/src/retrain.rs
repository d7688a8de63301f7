//! Supervised training of a fixed architecture with the composite
//! objective `mse + c_h / max(hss_soft, eps)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{soft_level_row, Adam, BnMode, ParamSet, Tape, Tensor, Var};
use crate::metrics::{MetricReport, RainLevel};
use crate::supernet::{ArchChoice, NetworkConfig, Supernet, GRID};

/// Network outputs are multiplied by this to give mm/day.
pub const OUTPUT_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the classification term.
    pub c_h: f64,
    /// Lower clamp of the soft HSS.
    pub eps: f64,
    /// Soft-binning temperature in mm/day.
    pub tau: f64,
    pub features: usize,
    pub projector_pool: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.5e-4,
            batch_size: 64,
            epochs: 300,
            c_h: 10.0,
            eps: 1e-10,
            tau: 0.5,
            features: 32,
            projector_pool: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch size and epochs must be positive".into()));
        }
        if !(self.c_h >= 0.0) || !self.c_h.is_finite() {
            return Err(Error::Config(format!("c_h must be non-negative, got {}", self.c_h)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn network(&self, in_channels: usize, blocks: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            features: self.features,
            num_blocks: blocks,
            width: GRID,
            height: GRID,
            projector_pool: self.projector_pool,
        }
    }
}

/// Per-value membership probabilities of the five rainfall levels.
pub fn soft_level_probs(y: &[f64], tau: f64) -> Result<Vec<[f64; 5]>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("soft level temperature must be positive"));
    }
    Ok(y.iter().map(|&v| soft_level_row(v, tau).0).collect())
}

fn obs_levels(obs: &Tensor) -> Result<Vec<u8>> {
    obs.data()
        .iter()
        .map(|&v| RainLevel::classify(v).map(|l| l.index() as u8))
        .collect()
}

/// Soft HSS of predictions against hard-binned observations.
pub fn soft_hss(tape: &mut Tape, pred: Var, obs: &Tensor, tau: f64) -> Result<Var> {
    let levels = obs_levels(obs)?;
    tape.soft_hss(pred, &levels, tau)
}

/// `mse(pred, obs) + c_h / max(soft_hss, eps)`; exactly the MSE when
/// `c_h == 0`.
pub fn composite_loss(tape: &mut Tape, pred: Var, obs: &Tensor, c_h: f64, eps: f64, tau: f64) -> Result<Var> {
    if !(c_h >= 0.0) || !(eps > 0.0) {
        return Err(Error::invalid("composite loss needs c_h >= 0 and eps > 0"));
    }
    let target = tape.constant(obs.clone());
    let mse = tape.mse_loss(pred, target)?;
    if c_h == 0.0 {
        return Ok(mse);
    }
    let hss = soft_hss(tape, pred, obs, tau)?;
    let clamped = tape.clamp_min(hss, eps);
    let inv = tape.recip(clamped)?;
    let term = tape.scale(inv, c_h);
    tape.add(mse, term)
}

/// Forward pass in mm/day.
pub fn forward_mm(
    tape: &mut Tape,
    net: &Supernet,
    arch: &ArchChoice,
    params: &mut ParamSet,
    x: &Tensor,
    mode: BnMode,
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let out = net.forward(tape, xv, arch, params, mode)?;
    Ok(tape.scale(out, OUTPUT_SCALE))
}

/// Eval-mode predictions for every sample, clamped at zero.
pub fn predict_dataset(net: &Supernet, arch: &ArchChoice, params: &mut ParamSet, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let px = data.pixels();
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let (x, _) = data.batch(chunk);
        let mut tape = Tape::new();
        let y = forward_mm(&mut tape, net, arch, params, &x, BnMode::Eval)?;
        out.extend(tape.value(y).data().chunks(px).map(|g| g.iter().map(|v| v.max(0.0)).collect()));
    }
    Ok(out)
}

/// Pooled scores of gridded predictions. A degenerate contingency table
/// reports NaN for ACC and HSS instead of failing.
pub fn evaluate(preds: &[Vec<f64>], data: &Dataset) -> Result<MetricReport> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(Error::invalid("one prediction per sample required"));
    }
    let pred: Vec<f64> = preds.concat();
    let obs: Vec<f64> = data
        .samples()
        .iter()
        .flat_map(|s| s.observation.iter().map(|&v| v as f64))
        .collect();
    match MetricReport::compute(&pred, &obs) {
        Err(Error::Degenerate(msg)) => {
            log::warn!("{msg}; ACC/HSS reported as NaN");
            Ok(MetricReport {
                bias: crate::metrics::bias(&pred, &obs)?,
                mae: crate::metrics::mae(&pred, &obs)?,
                rmse: crate::metrics::rmse(&pred, &obs)?,
                nse: crate::metrics::nse(&pred, &obs)?,
                acc: f64::NAN,
                hss: f64::NAN,
            })
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricReport,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_bias,val_mae,val_rmse,val_nse,val_acc,val_hss";

pub fn write_history<W: Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub net: Supernet,
    pub params: ParamSet,
    pub history: Vec<HistoryRow>,
}

/// Trains `arch` on `train`, scoring `val` after every epoch. `init`
/// supplies starting weights (for example from the search); fresh
/// weights are drawn from `cfg.seed` otherwise.
pub fn retrain(
    arch: &ArchChoice,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<ParamSet>,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    if val.channels != train.channels {
        return Err(Error::Config("train and validation member counts differ".into()));
    }
    let net = Supernet::new(cfg.network(train.channels, arch.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match init {
        Some(p) => {
            let fresh = net.init_params_for(arch, &mut rng)?;
            subset_for(&p, &fresh)?
        }
        None => {
            let mut p = net.init_params_for(arch, &mut rng)?;
            // start from climatology: every output begins at the mean
            // training observation
            let mean = train
                .samples()
                .iter()
                .flat_map(|s| s.observation.iter().map(|&v| v as f64))
                .sum::<f64>()
                / (train.len() * train.pixels()) as f64;
            p.get_mut("proj.fc.bias")?.data_mut().fill(mean / OUTPUT_SCALE);
            p
        }
    };
    let mut opt = Adam::new(cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(idx);
            let mut tape = Tape::new();
            let pred = forward_mm(&mut tape, &net, arch, &mut params, &x, BnMode::Train)?;
            let loss = composite_loss(&mut tape, pred, &y, cfg.c_h, cfg.eps, cfg.tau)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Degenerate(format!("training loss became {value} in epoch {epoch}")));
            }
            params.zero_grad();
            tape.backward_into(loss, &mut params)?;
            opt.step(&mut params);
            total += value;
            steps += 1;
        }
        params.zero_grad();
        let preds = predict_dataset(&net, arch, &mut params, val)?;
        let report = evaluate(&preds, val)?;
        let train_loss = total / steps as f64;
        log::info!("retrain epoch {epoch} loss {train_loss:.5} val mae {:.4} hss {:.4}", report.mae, report.hss);
        history.push(HistoryRow {
            epoch,
            train_loss,
            val: report,
        });
    }
    Ok(RetrainOutcome { net, params, history })
}

/// Copies the tensors and statistics `template` needs out of `source`.
fn subset_for(source: &ParamSet, template: &ParamSet) -> Result<ParamSet> {
    let mut out = template.clone();
    for (name, t) in out.iter_mut() {
        let s = source.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::shape("reuse weights", s.shape(), t.shape()));
        }
        t.data_mut().copy_from_slice(s.data());
    }
    let prefixes: Vec<String> = out.stats_iter().map(|(k, _)| k.to_string()).collect();
    for p in prefixes {
        *out.stats_mut(&p)? = source.stats(&p)?.clone();
    }
    Ok(out)
}

/// Rebuilds the network definition a checkpoint was trained with.
pub fn infer_network(params: &ParamSet, arch: &ArchChoice) -> Result<Supernet> {
    let stem = params.get("stem.conv.weight")?;
    let [features, in_channels, _, _] = stem.shape() else {
        return Err(Error::Format {
            offset: 0,
            msg: "stem.conv.weight is not rank 4".into(),
        });
    };
    let fc = params.get("proj.fc.weight")?;
    let din = fc.shape()[0];
    let pool = (1..=din).find(|p| features * p * p == din).ok_or_else(|| Error::Format {
        offset: 0,
        msg: format!("projector input {din} is not {features} x p^2"),
    })?;
    let side = (fc.shape()[1] as f64).sqrt() as usize;
    let net = Supernet::new(NetworkConfig {
        in_channels: *in_channels,
        features: *features,
        num_blocks: arch.len(),
        width: side,
        height: side,
        projector_pool: pool,
    })?;
    net.check_arch(arch)?;
    Ok(net)
}
