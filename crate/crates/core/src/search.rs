//! Alternating architecture search with a self-supervised objective.
//!
//! An online network and an EMA target network see different random crops
//! of the same ensemble stack; the online embeddings regress the target
//! embeddings. Epoch `t` trains the weights when `t % u > 0` and otherwise
//! updates the logits of one scheduled block.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{Adam, BnMode, ParamSet, Tape, Tensor, Var};
use crate::search_space::OpKind;
use crate::supernet::{derive_arch, sample_arch, sample_block, ArchChoice, ArchParams, NetworkConfig, Supernet, GRID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Total epochs `T`.
    pub epochs: usize,
    /// Number of blocks `N`.
    pub blocks: usize,
    /// Weight/logit balance: epoch `t` is a weight epoch iff `t % u > 0`.
    pub u: usize,
    /// EMA momentum of the target network.
    pub momentum: f64,
    pub batch_size: usize,
    /// Weight learning rate.
    pub lr: f64,
    /// Logit learning rate.
    pub arch_lr: f64,
    pub crop: usize,
    pub features: usize,
    pub projector_pool: usize,
    /// Caps mini-batches per epoch; `None` is a full pass.
    pub steps_per_epoch: Option<usize>,
    /// Replace the contrastive objective by MSE against observations.
    pub supervised: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 24,
            blocks: 4,
            u: 3,
            momentum: 0.99,
            batch_size: 8,
            lr: 1e-5,
            arch_lr: 1e-2,
            crop: 24,
            features: 32,
            projector_pool: 4,
            steps_per_epoch: None,
            supervised: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("search needs at least one block".into());
        }
        if self.epochs < self.blocks || self.epochs / self.blocks == 0 {
            return fail(format!("epochs ({}) must be at least blocks ({})", self.epochs, self.blocks));
        }
        if self.u < 2 {
            return fail(format!("u must be at least 2, got {}", self.u));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return fail(format!("momentum must lie in (0, 1), got {}", self.momentum));
        }
        if self.crop < 4 || self.crop > GRID {
            return fail(format!("crop must lie in 4..={GRID}, got {}", self.crop));
        }
        if self.batch_size == 0 || self.features == 0 || self.projector_pool == 0 {
            return fail("batch size, features and projector pool must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.arch_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn network(&self, in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            features: self.features,
            num_blocks: self.blocks,
            width: GRID,
            height: GRID,
            projector_pool: self.projector_pool,
        }
    }
}

/// 1-based block whose logits epoch `t` (0-based) updates. Clamped to
/// `blocks` when `epochs` is not a multiple of `blocks`.
pub fn theta_block_index(t: usize, epochs: usize, blocks: usize) -> Result<usize> {
    let per = epochs / blocks.max(1);
    if blocks == 0 || per == 0 {
        return Err(Error::Config(format!("{epochs} epochs cannot cover {blocks} blocks")));
    }
    Ok((t / per + 1).min(blocks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Weights,
    Theta,
}

impl Phase {
    pub fn of(t: usize, u: usize) -> Phase {
        if t % u > 0 {
            Phase::Weights
        } else {
            Phase::Theta
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Weights => "W",
            Phase::Theta => "theta",
        })
    }
}

/// One line of the search log; `block` is 0 for weight epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub block: usize,
    pub loss: f64,
}

pub const SEARCH_LOG_HEADER: &str = "epoch,phase,block,loss";

pub fn write_search_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "{SEARCH_LOG_HEADER}")?;
    for e in log {
        writeln!(w, "{},{},{},{:e}", e.epoch, e.phase, e.block, e.loss)?;
    }
    Ok(())
}

/// Per-row Adam moments, so that unscheduled rows never move.
#[derive(Clone, Debug)]
struct RowAdam {
    lr: f64,
    m: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    steps: Vec<i32>,
}

impl RowAdam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, rows: usize) -> Self {
        RowAdam {
            lr,
            m: vec![[0.0; 3]; rows],
            v: vec![[0.0; 3]; rows],
            steps: vec![0; rows],
        }
    }

    fn step(&mut self, theta: &mut ArchParams, row: usize, g: [f64; 3]) {
        self.steps[row] += 1;
        let k = self.steps[row];
        let mut r = theta.row(row);
        for j in 0..3 {
            self.m[row][j] = Self::B1 * self.m[row][j] + (1.0 - Self::B1) * g[j];
            self.v[row][j] = Self::B2 * self.v[row][j] + (1.0 - Self::B2) * g[j] * g[j];
            let mh = self.m[row][j] / (1.0 - Self::B1.powi(k));
            let vh = self.v[row][j] / (1.0 - Self::B2.powi(k));
            r[j] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
        theta.set_row(row, r);
    }
}

/// Online weights, EMA target weights and architecture logits.
#[derive(Clone, Debug)]
pub struct TwinState {
    pub net: Supernet,
    pub online: ParamSet,
    pub target: ParamSet,
    pub theta: ArchParams,
    w_opt: Adam,
    theta_opt: RowAdam,
    baseline: Option<f64>,
}

impl TwinState {
    /// Starts the target as an exact, gradient-free copy of `online`.
    pub fn new(net: Supernet, online: ParamSet, theta: ArchParams, cfg: &SearchConfig) -> Result<Self> {
        if theta.num_blocks() != net.config.num_blocks {
            return Err(Error::Config("logit rows do not match the block count".into()));
        }
        let mut target = online.clone();
        target.zero_grad();
        for (_, t) in target.iter_mut() {
            t.set_requires_grad(false);
        }
        Ok(TwinState {
            theta_opt: RowAdam::new(cfg.arch_lr, theta.num_blocks()),
            w_opt: Adam::new(cfg.lr)?,
            net,
            online,
            target,
            theta,
            baseline: None,
        })
    }

    /// Fresh supernet weights and near-uniform logits.
    pub fn init<R: Rng + ?Sized>(cfg: &SearchConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let net = Supernet::new(cfg.network(in_channels))?;
        let online = net.init_params(rng);
        let theta = ArchParams::random(cfg.blocks, rng)?;
        Self::new(net, online, theta, cfg)
    }
}

/// `target = m * target + (1 - m) * online` for every tensor and every
/// batch-norm running statistic.
pub fn ema_sync(target: &mut ParamSet, online: &ParamSet, m: f64) -> Result<()> {
    if !target.same_structure(online) {
        return Err(Error::invalid("target and online parameter sets differ in structure"));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    let mix = |t: &mut [f64], o: &[f64]| {
        for (a, b) in t.iter_mut().zip(o) {
            *a = m * *a + (1.0 - m) * b;
        }
    };
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        mix(t.data_mut(), o.data());
    }
    for ((_, t), (_, o)) in target.stats_iter_mut().zip(online.stats_iter()) {
        mix(&mut t.mean, &o.mean);
        mix(&mut t.var, &o.var);
    }
    Ok(())
}

/// Four crops of a `[B, c, H, W]` batch with offsets drawn independently
/// per view and per sample, plus the offsets as `(row, col)`.
pub struct CropViews {
    pub views: [Tensor; 4],
    pub offsets: [Vec<(usize, usize)>; 4],
}

pub fn crop_at(x: &Tensor, crop: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("crop")?;
    if crop == 0 || crop > h || crop > w {
        return Err(Error::invalid(format!("crop {crop} does not fit a {h}x{w} grid")));
    }
    if offsets.len() != n {
        return Err(Error::invalid("one crop offset per sample required"));
    }
    let mut out = Vec::with_capacity(n * c * crop * crop);
    let d = x.data();
    for (s, &(oy, ox)) in offsets.iter().enumerate() {
        if oy + crop > h || ox + crop > w {
            return Err(Error::invalid(format!("crop offset ({oy}, {ox}) out of range")));
        }
        for ch in 0..c {
            for y in 0..crop {
                let row = ((s * c + ch) * h + oy + y) * w + ox;
                out.extend_from_slice(&d[row..row + crop]);
            }
        }
    }
    Tensor::new(&[n, c, crop, crop], out)
}

pub fn random_crop4<R: Rng + ?Sized>(x: &Tensor, crop: usize, rng: &mut R) -> Result<CropViews> {
    let (n, _, h, w) = x.dims4("random_crop4")?;
    if crop == 0 || crop > h || crop > w {
        return Err(Error::invalid(format!("crop {crop} does not fit a {h}x{w} grid")));
    }
    let offsets: [Vec<(usize, usize)>; 4] = std::array::from_fn(|_| {
        (0..n)
            .map(|_| (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop)))
            .collect()
    });
    let views = [
        crop_at(x, crop, &offsets[0])?,
        crop_at(x, crop, &offsets[1])?,
        crop_at(x, crop, &offsets[2])?,
        crop_at(x, crop, &offsets[3])?,
    ];
    Ok(CropViews { views, offsets })
}

/// `mse(q1, k1) + mse(q2, k2)`; the targets enter as constants.
pub fn contrastive_loss(tape: &mut Tape, q1: Var, q2: Var, k1: &Tensor, k2: &Tensor) -> Result<Var> {
    let k1 = tape.constant(Tensor::new(k1.shape(), k1.data().to_vec())?);
    let k2 = tape.constant(Tensor::new(k2.shape(), k2.data().to_vec())?);
    let l1 = tape.mse_loss(q1, k1)?;
    let l2 = tape.mse_loss(q2, k2)?;
    tape.add(l1, l2)
}

/// A mini-batch: ensemble stack `[B, c, 33, 33]` and observations
/// `[B, 1089]`.
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

/// Target embeddings of two views along `arch`, computed on a scratch copy
/// so the target changes only through [`ema_sync`].
fn target_embed(state: &TwinState, arch: &ArchChoice, views: [&Tensor; 2]) -> Result<[Tensor; 2]> {
    let mut scratch = state.target.clone();
    let mut out = Vec::with_capacity(2);
    for v in views {
        let mut tape = Tape::new();
        let x = tape.constant(v.clone());
        let y = state.net.forward(&mut tape, x, arch, &mut scratch, BnMode::Train)?;
        out.push(tape.value(y).clone());
    }
    let k2 = out.pop().expect("two views");
    let k1 = out.pop().expect("two views");
    Ok([k1, k2])
}

/// Builds the objective on `tape` with the online network along `a1` and
/// the target along `a2`.
fn objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    state: &TwinState,
    online: &mut ParamSet,
    batch: &Batch,
    a1: &ArchChoice,
    a2: &ArchChoice,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<Var> {
    if cfg.supervised {
        let x = tape.constant(batch.x.clone());
        let q = state.net.forward(tape, x, a1, online, BnMode::Train)?;
        let y = tape.constant(batch.y.clone());
        return tape.mse_loss(q, y);
    }
    let CropViews { views, .. } = random_crop4(&batch.x, cfg.crop, rng)?;
    let [x1, x2, x1t, x2t] = views;
    let [k1, k2] = target_embed(state, a2, [&x1t, &x2t])?;
    let v1 = tape.constant(x1);
    let q1 = state.net.forward(tape, v1, a1, online, BnMode::Train)?;
    let v2 = tape.constant(x2);
    let q2 = state.net.forward(tape, v2, a1, online, BnMode::Train)?;
    contrastive_loss(tape, q1, q2, &k1, &k2)
}

/// Weight step: sample two paths, descend the online weights, then pull
/// the target towards them. Logits are untouched.
pub fn search_step_weights<R: Rng + ?Sized>(
    batch: &Batch,
    state: &mut TwinState,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<f64> {
    let a1 = sample_arch(&state.theta, rng);
    let a2 = sample_arch(&state.theta, rng);
    let mut online = std::mem::take(&mut state.online);
    let mut tape = Tape::new();
    let result = objective(&mut tape, state, &mut online, batch, &a1, &a2, cfg, rng).and_then(|loss| {
        online.zero_grad();
        tape.backward_into(loss, &mut online)?;
        Ok(tape.value(loss).item())
    });
    state.online = online;
    let loss = result?;
    state.w_opt.step(&mut state.online);
    state.online.zero_grad();
    ema_sync(&mut state.target, &state.online, cfg.momentum)?;
    Ok(loss)
}

/// Logit step for 1-based `block`: both paths are resampled at that block
/// only (other blocks take their argmax) and the row's logits follow a
/// score-function gradient with a moving-average baseline. Weights,
/// running statistics and the other rows are left bit-for-bit unchanged.
pub fn search_step_theta<R: Rng + ?Sized>(
    batch: &Batch,
    state: &mut TwinState,
    cfg: &SearchConfig,
    block: usize,
    rng: &mut R,
) -> Result<f64> {
    if block == 0 || block > state.theta.num_blocks() {
        return Err(Error::Config(format!(
            "block {block} outside 1..={}",
            state.theta.num_blocks()
        )));
    }
    let row = block - 1;
    let a1 = sample_block(&state.theta, row, rng);
    let a2 = sample_block(&state.theta, row, rng);
    let mut scratch = state.online.clone();
    let mut tape = Tape::new();
    let loss_var = objective(&mut tape, state, &mut scratch, batch, &a1, &a2, cfg, rng)?;
    let loss = tape.value(loss_var).item();

    let baseline = *state.baseline.get_or_insert(loss);
    let advantage = loss - baseline;
    let p = state.theta.probs(row);
    let mut g = [0.0; 3];
    let paths: &[&ArchChoice] = if cfg.supervised { &[&a1] } else { &[&a1, &a2] };
    for arch in paths {
        let k = arch.ops[row].index();
        for j in 0..3 {
            g[j] += advantage * (f64::from(u8::from(j == k)) - p[j]);
        }
    }
    state.theta_opt.step(&mut state.theta, row, g);
    state.baseline = Some(0.9 * baseline + 0.1 * loss);
    Ok(loss)
}

/// Result of a search run.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub arch: ArchChoice,
    pub state: TwinState,
    pub log: Vec<EpochLog>,
}

fn batches<R: Rng + ?Sized>(n: usize, cfg: &SearchConfig, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if let Some(cap) = cfg.steps_per_epoch {
        out.truncate(cap.max(1));
    }
    out
}

/// Runs the full schedule from a prepared state.
pub fn run_search_from<R: Rng + ?Sized>(
    data: &Dataset,
    mut state: TwinState,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("search dataset"));
    }
    if data.channels != state.net.config.in_channels {
        return Err(Error::Config(format!(
            "data has {} members, network expects {}",
            data.channels, state.net.config.in_channels
        )));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for t in 0..cfg.epochs {
        let phase = Phase::of(t, cfg.u);
        let block = match phase {
            Phase::Weights => 0,
            Phase::Theta => theta_block_index(t, cfg.epochs, cfg.blocks)?,
        };
        let mut total = 0.0;
        let plan = batches(data.len(), cfg, rng);
        for idx in &plan {
            let (x, y) = data.batch(idx);
            let batch = Batch { x, y };
            total += match phase {
                Phase::Weights => search_step_weights(&batch, &mut state, cfg, rng)?,
                Phase::Theta => search_step_theta(&batch, &mut state, cfg, block, rng)?,
            };
        }
        let loss = total / plan.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Degenerate(format!("search loss diverged at epoch {t}")));
        }
        log::info!("search epoch {t} {phase} block {block} loss {loss:.6}");
        log.push(EpochLog {
            epoch: t,
            phase,
            block,
            loss,
        });
    }
    Ok(SearchOutcome {
        arch: derive_arch(&state.theta),
        state,
        log,
    })
}

/// Seeds everything from `cfg.seed`, initializes a fresh supernet and runs
/// the schedule.
pub fn run_search(data: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = TwinState::init(cfg, data.channels, &mut rng)?;
    run_search_from(data, state, cfg, &mut rng)
}

/// Number of weight epochs the schedule contains.
pub fn weight_epochs(epochs: usize, u: usize) -> usize {
    (0..epochs).filter(|t| t % u > 0).count()
}

/// Operation names of a derived architecture, for logs.
pub fn describe(arch: &ArchChoice) -> Vec<&'static str> {
    arch.ops.iter().map(|o: &OpKind| o.name()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Mode, SyntheticConfig};

    fn tiny_cfg() -> SearchConfig {
        SearchConfig {
            epochs: 4,
            blocks: 2,
            u: 2,
            batch_size: 4,
            crop: 16,
            features: 4,
            projector_pool: 2,
            steps_per_epoch: Some(2),
            lr: 1e-3,
            seed: 3,
            ..SearchConfig::default()
        }
    }

    fn data(n: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            channels: 2,
            ..SyntheticConfig::new(n, Mode::Mmod, 11)
        })
        .unwrap()
    }

    #[test]
    fn schedule_example() {
        let seq: Vec<usize> = (0..24).map(|t| theta_block_index(t, 24, 4).unwrap()).collect();
        let expect: Vec<usize> = (1..=4).flat_map(|i| [i; 6]).collect();
        assert_eq!(seq, expect);
        assert_eq!(theta_block_index(24, 25, 4).unwrap(), 4);
        assert!(theta_block_index(0, 3, 4).is_err());
        assert_eq!(weight_epochs(24, 3), 16);
        assert_eq!(weight_epochs(24, 2), 12);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        for bad in [
            SearchConfig { u: 1, ..SearchConfig::default() },
            SearchConfig { epochs: 3, ..SearchConfig::default() },
            SearchConfig { momentum: 1.0, ..SearchConfig::default() },
            SearchConfig { momentum: 0.0, ..SearchConfig::default() },
            SearchConfig { crop: 34, ..SearchConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let mut online = ParamSet::new();
        online.insert("w", Tensor::full(&[3], 1.0).with_grad());
        let mut target = online.clone();
        target.get_mut("w").unwrap().data_mut().fill(0.0);
        let before = target.clone();
        ema_sync(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, before);
        ema_sync(&mut target, &online, 0.99).unwrap();
        assert!(target.get("w").unwrap().data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        ema_sync(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.get("w").unwrap().data(), online.get("w").unwrap().data());
        let mut other = ParamSet::new();
        other.insert("v", Tensor::zeros(&[3]));
        assert!(ema_sync(&mut other, &online, 0.5).is_err());
    }

    #[test]
    fn full_crop_is_identity_and_shapes() {
        let x = Tensor::from_fn(&[2, 3, 33, 33], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = random_crop4(&x, 33, &mut rng).unwrap();
        assert!(v.views.iter().all(|t| t == &x));
        let v = random_crop4(&x, 24, &mut rng).unwrap();
        assert!(v.views.iter().all(|t| t.shape() == [2, 3, 24, 24]));
        let (oy, ox) = v.offsets[0][1];
        assert_eq!(v.views[0].data()[24 * 24 * 3], x.data()[(3 * 33 + oy) * 33 + ox]);
        assert!(random_crop4(&x, 34, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let x = Tensor::zeros(&[1, 1, 33, 33]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let crop = 30;
        let side = 33 - crop + 1;
        let mut counts = vec![0usize; side * side];
        let draws = 10_000;
        for _ in 0..draws / 4 {
            let v = random_crop4(&x, crop, &mut rng).unwrap();
            for o in &v.offsets {
                counts[o[0].0 * side + o[0].1] += 1;
            }
        }
        let expect = draws as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 15 degrees of freedom, 99.9% quantile is 37.7
        assert!(chi2 < 37.7, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn contrastive_examples() {
        let mut tape = Tape::new();
        let k1 = Tensor::from_fn(&[2, 5], |i| i as f64 * 0.3);
        let k2 = Tensor::from_fn(&[2, 5], |i| 1.0 - i as f64);
        let q1 = tape.leaf(k1.clone());
        let q2 = tape.leaf(k2.clone());
        let l = contrastive_loss(&mut tape, q1, q2, &k1, &k2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let shifted = Tensor::new(&[2, 5], k2.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let q2 = tape.leaf(shifted);
        let l = contrastive_loss(&mut tape, q1, q2, &k1, &k2).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-15);
        let bad = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(contrastive_loss(&mut tape, bad, q2, &k1, &k2).is_err());
    }

    fn state_and_batch(cfg: &SearchConfig) -> (TwinState, Batch, ChaCha8Rng) {
        let d = data(8);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = TwinState::init(cfg, 2, &mut rng).unwrap();
        let (x, y) = d.batch(&[0, 1, 2, 3]);
        (state, Batch { x, y }, rng)
    }

    #[test]
    fn theta_step_freezes_everything_but_its_row() {
        let cfg = tiny_cfg();
        let (mut state, batch, mut rng) = state_and_batch(&cfg);
        for _ in 0..3 {
            let online = state.online.clone();
            let target = state.target.clone();
            let before = state.theta.clone();
            search_step_theta(&batch, &mut state, &cfg, 2, &mut rng).unwrap();
            assert_eq!(state.online, online);
            assert_eq!(state.target, target);
            assert_eq!(state.theta.row(0).map(f64::to_bits), before.row(0).map(f64::to_bits));
        }
        assert!(search_step_theta(&batch, &mut state, &cfg, 3, &mut rng).is_err());
    }

    #[test]
    fn weight_step_leaves_theta_and_target_grad_free() {
        let cfg = tiny_cfg();
        let (mut state, batch, mut rng) = state_and_batch(&cfg);
        let theta = state.theta.clone();
        let online = state.online.clone();
        search_step_weights(&batch, &mut state, &cfg, &mut rng).unwrap();
        assert_eq!(state.theta, theta);
        assert_ne!(state.online, online);
        assert!(state.target.iter().all(|(_, t)| !t.requires_grad() && t.grad().is_none()));
    }

    #[test]
    fn weight_steps_reduce_loss_on_fixed_batch() {
        let cfg = SearchConfig {
            momentum: 0.5,
            ..tiny_cfg()
        };
        let (mut state, batch, _) = state_and_batch(&cfg);
        state.theta = ArchParams::from_rows(&[[0.0, 0.0, 50.0], [50.0, 0.0, 0.0]]).unwrap();
        // reseeding fixes the crops, so every step sees the same views
        let step = |s: &mut TwinState| search_step_weights(&batch, s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let first = step(&mut state);
        assert!(first > 0.0);
        let mut last = first;
        for _ in 0..49 {
            last = step(&mut state);
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn search_is_deterministic_and_logs_every_epoch() {
        let cfg = tiny_cfg();
        let d = data(8);
        let a = run_search(&d, &cfg).unwrap();
        let b = run_search(&d, &cfg).unwrap();
        assert_eq!(a.arch, b.arch);
        assert_eq!(a.state.theta, b.state.theta);
        assert_eq!(a.arch.len(), 2);
        assert_eq!(a.log.len(), 4);
        assert_eq!(a.log.iter().filter(|e| e.phase == Phase::Weights).count(), weight_epochs(4, 2));
        let mut csv = Vec::new();
        write_search_log(&mut csv, &a.log).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,phase,block,loss\n0,theta,1,"));
        assert_eq!(text.lines().count(), 5);
        let empty = d.slice(0..0);
        assert!(matches!(run_search(&empty, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn supervised_arm_runs() {
        let cfg = SearchConfig {
            supervised: true,
            ..tiny_cfg()
        };
        let out = run_search(&data(8), &cfg).unwrap();
        assert!(out.log.iter().all(|e| e.loss.is_finite()));
    }
}
