//! Ensemble/observation grids: screening, chronological split, a synthetic
//! generator and the `ADNR` container format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dm::normal_cdf;
use crate::error::{Error, Result};
use crate::grad::{ByteReader, Tensor};
use crate::supernet::GRID;

const DATASET_MAGIC: &[u8; 4] = b"ADNR";
const DATASET_VERSION: u32 = 1;

/// Ensemble source: one model's perturbed members, or several models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Smod,
    Mmod,
}

impl Mode {
    /// Member count of the real data sets.
    pub fn channels(self) -> usize {
        match self {
            Mode::Smod => 50,
            Mode::Mmod => 4,
        }
    }

    fn code(self) -> u8 {
        match self {
            Mode::Smod => 0,
            Mode::Mmod => 1,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Smod => "smod",
            Mode::Mmod => "mmod",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smod" => Ok(Mode::Smod),
            "mmod" => Ok(Mode::Mmod),
            _ => Err(Error::Parse(format!("unknown mode {s:?} (expected smod or mmod)"))),
        }
    }
}

/// One forecast day: `c` member grids and the observed grid, mm/day.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub timestamp: String,
    /// `c * h * w`, member-major.
    pub ensemble: Vec<f32>,
    /// `h * w`.
    pub observation: Vec<f32>,
}

impl GridSample {
    pub fn member(&self, j: usize, pixels: usize) -> &[f32] {
        &self.ensemble[j * pixels..(j + 1) * pixels]
    }
}

/// Time-ordered samples sharing one grid geometry and member count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    samples: Vec<GridSample>,
}

impl Dataset {
    /// Checks geometry, value ranges and strictly increasing timestamps.
    pub fn new(mode: Mode, channels: usize, width: usize, height: usize, samples: Vec<GridSample>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::invalid("dataset extents must be positive"));
        }
        let pixels = width * height;
        for (i, s) in samples.iter().enumerate() {
            if s.ensemble.len() != channels * pixels || s.observation.len() != pixels {
                return Err(Error::invalid(format!("sample {i} does not match {channels}x{height}x{width}")));
            }
            if s.ensemble.iter().chain(&s.observation).any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("sample {i} holds negative or non-finite rainfall")));
            }
            if i > 0 && samples[i - 1].timestamp >= s.timestamp {
                return Err(Error::invalid(format!(
                    "timestamps must strictly increase: {} then {}",
                    samples[i - 1].timestamp, s.timestamp
                )));
            }
        }
        Ok(Dataset {
            mode,
            channels,
            width,
            height,
            samples,
        })
    }

    pub fn samples(&self) -> &[GridSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Dataset of the same geometry holding `samples[range]`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            mode: self.mode,
            channels: self.channels,
            width: self.width,
            height: self.height,
            samples: Vec::new(),
        }
    }

    /// Stacks ensembles to `[B, c, h, w]` and observations to `[B, h*w]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (c, px) = (self.channels, self.pixels());
        let mut x = Vec::with_capacity(indices.len() * c * px);
        let mut y = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            x.extend(self.samples[i].ensemble.iter().map(|&v| v as f64));
            y.extend(self.samples[i].observation.iter().map(|&v| v as f64));
        }
        (
            Tensor::new(&[indices.len(), c, self.height, self.width], x).expect("geometry checked"),
            Tensor::new(&[indices.len(), px], y).expect("geometry checked"),
        )
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds the file format")))
        };
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&[self.mode.code()])?;
        w.write_all(&dim(self.channels, "channel count")?.to_le_bytes())?;
        w.write_all(&dim(self.width, "width")?.to_le_bytes())?;
        w.write_all(&dim(self.height, "height")?.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            let ts = s.timestamp.as_bytes();
            w.write_all(&dim(ts.len(), "timestamp length")?.to_le_bytes())?;
            w.write_all(ts)?;
            for v in s.ensemble.iter().chain(&s.observation) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Dataset> {
        let mut cur = ByteReader::new(r);
        let magic = cur.take::<4>().map_err(|_| Error::Format {
            offset: 0,
            msg: "not an ADNR file".into(),
        })?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not an ADNR file".into(),
            });
        }
        let version = u32::from_le_bytes(cur.take()?);
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported ADNR version {version}"),
            });
        }
        let mode = match cur.take::<1>()?[0] {
            0 => Mode::Smod,
            1 => Mode::Mmod,
            other => {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("unknown mode byte {other}"),
                })
            }
        };
        let channels = u16::from_le_bytes(cur.take()?) as usize;
        let width = u16::from_le_bytes(cur.take()?) as usize;
        let height = u16::from_le_bytes(cur.take()?) as usize;
        let n = u32::from_le_bytes(cur.take()?) as usize;
        let pixels = width * height;
        let mut samples = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u16::from_le_bytes(cur.take()?) as usize;
            let at = cur.offset;
            let timestamp = String::from_utf8(cur.take_vec(len)?).map_err(|_| Error::Format {
                offset: at,
                msg: "timestamp is not UTF-8".into(),
            })?;
            let mut read_grid = |count: usize| -> Result<Vec<f32>> {
                let bytes = cur.take_vec(count * 4)?;
                Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            };
            let ensemble = read_grid(channels * pixels)?;
            let observation = read_grid(pixels)?;
            samples.push(GridSample {
                timestamp,
                ensemble,
                observation,
            });
        }
        let end = cur.offset;
        Dataset::new(mode, channels, width, height, samples).map_err(|e| Error::Format {
            offset: end,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Dataset::read(&bytes[..])
    }
}

/// A sample as delivered, before screening.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    /// Valid time of the forecast.
    pub forecast_time: String,
    pub observation_time: String,
    /// `None` marks an absent member.
    pub members: Vec<Option<Vec<f32>>>,
    pub observation: Vec<f32>,
}

impl From<&GridSample> for RawSample {
    fn from(s: &GridSample) -> Self {
        let pixels = s.observation.len();
        RawSample {
            forecast_time: s.timestamp.clone(),
            observation_time: s.timestamp.clone(),
            members: s.ensemble.chunks(pixels.max(1)).map(|m| Some(m.to_vec())).collect(),
            observation: s.observation.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    TimeMismatch,
    MissingMember,
    AllZero,
    InvalidValue,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::TimeMismatch => "time mismatch",
            RejectReason::MissingMember => "missing member",
            RejectReason::AllZero => "all-zero",
            RejectReason::InvalidValue => "invalid value",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScreenReport {
    pub kept: Vec<GridSample>,
    /// `(input index, reason)` for every dropped sample.
    pub rejected: Vec<(usize, RejectReason)>,
}

/// Drops samples whose forecast and observation times differ, that lack
/// any of `members` members (absent or NaN), or whose ensemble or
/// observation is entirely zero. Negative or infinite values are rejected
/// as invalid.
pub fn screen(samples: &[RawSample], members: usize) -> ScreenReport {
    let mut report = ScreenReport::default();
    for (i, s) in samples.iter().enumerate() {
        let reason = if s.forecast_time != s.observation_time {
            Some(RejectReason::TimeMismatch)
        } else if s.members.len() < members
            || s.members
                .iter()
                .any(|m| m.as_ref().is_none_or(|g| g.len() != s.observation.len() || g.iter().any(|v| v.is_nan())))
            || s.observation.iter().any(|v| v.is_nan())
        {
            Some(RejectReason::MissingMember)
        } else if s
            .members
            .iter()
            .flatten()
            .flatten()
            .chain(&s.observation)
            .any(|v| v.is_infinite() || *v < 0.0)
        {
            Some(RejectReason::InvalidValue)
        } else if s.observation.iter().all(|&v| v == 0.0)
            || s.members.iter().flatten().flatten().all(|&v| v == 0.0)
        {
            Some(RejectReason::AllZero)
        } else {
            None
        };
        match reason {
            Some(r) => report.rejected.push((i, r)),
            None => report.kept.push(GridSample {
                timestamp: s.forecast_time.clone(),
                ensemble: s.members.iter().take(members).flatten().flatten().copied().collect(),
                observation: s.observation.clone(),
            }),
        }
    }
    report
}

/// Chronological split: the first `ceil(0.9 n)` samples train, the rest
/// validate.
pub fn split_timeline(dataset: &Dataset) -> (Dataset, Dataset) {
    let n = dataset.len();
    if n < 10 {
        log::warn!("splitting only {n} samples");
    }
    let cut = (9 * n).div_ceil(10);
    (dataset.slice(0..cut), dataset.slice(cut..n))
}

/// Relative frequencies of None, Light, Moderate, Heavy and Violent pixels
/// in multi-model observations. The published shares add up to 99.6%;
/// the generator normalizes.
pub const MMOD_LEVEL_MIX: [f64; 5] = [0.081, 0.764, 0.127, 0.020, 0.004];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub mode: Mode,
    /// Member count; defaults to the mode's.
    pub channels: usize,
    pub seed: u64,
    pub level_mix: [f64; 5],
    /// Range of the per-member additive bias in mm/day.
    pub bias_range: (f64, f64),
}

impl SyntheticConfig {
    pub fn new(n: usize, mode: Mode, seed: u64) -> Self {
        SyntheticConfig {
            n,
            mode,
            channels: mode.channels(),
            seed,
            level_mix: MMOD_LEVEL_MIX,
            bias_range: DEFAULT_BIAS_RANGE,
        }
    }
}

/// Default range of the per-member additive bias, mm/day.
pub const DEFAULT_BIAS_RANGE: (f64, f64) = (0.0, 2.0);

const BUMPS: usize = 6;
const SHARED_WEIGHT: f64 = 0.3;
const MAX_SHIFT: i64 = 2;
const NOISE_SIGMA: f64 = 0.3;

/// Maps a uniform quantile to rainfall so that levels occur with the
/// probabilities in `mix`; inside a level the value rises with the
/// quantile.
fn quantile_to_rain(q: f64, mix: &[f64; 5]) -> f64 {
    let mut lo = 0.0;
    for (level, &p) in mix.iter().enumerate() {
        let hi = lo + p;
        if q < hi || level == 4 {
            let r = if p > 0.0 { ((q - lo) / p).clamp(0.0, 1.0) } else { 0.0 };
            return match level {
                0 => 0.0,
                1 => 0.1 + 9.99 * r.powf(1.6),
                2 => 10.1 + 14.99 * r,
                3 => 25.1 + 24.99 * r,
                _ => 50.1 + 60.0 * r,
            };
        }
        lo = hi;
    }
    unreachable!()
}

/// Spatially coherent field whose every pixel is marginally standard
/// normal: a shared daily anomaly plus a normalized sum of Gaussian bumps
/// with random centres, widths and signed amplitudes.
fn latent_field<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let shared: f64 = rng.sample(StandardNormal);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..BUMPS)
        .map(|_| {
            let cx = rng.random_range(-6.0..size as f64 + 6.0);
            let cy = rng.random_range(-6.0..size as f64 + 6.0);
            let width: f64 = rng.random_range(4.0..10.0);
            let amp: f64 = rng.sample(StandardNormal);
            (cx, cy, width, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut num = 0.0;
            let mut norm = 0.0;
            for &(cx, cy, width, amp) in &bumps {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let phi = (-d2 / (2.0 * width * width)).exp();
                num += amp * phi;
                norm += phi * phi;
            }
            let local = if norm > 1e-300 { num / norm.sqrt() } else { 0.0 };
            out.push(SHARED_WEIGHT.sqrt() * shared + (1.0 - SHARED_WEIGHT).sqrt() * local);
        }
    }
    out
}

/// Synthetic ensemble rainfall on a 33x33 grid.
///
/// Observations follow `level_mix` pixel-wise. Each member sees the
/// observation displaced by up to two pixels, multiplied by lognormal
/// noise and offset by a member-specific additive bias that is fixed for
/// the whole data set. The ensemble mean is therefore informative but
/// biased and blurred.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::invalid("synthetic data needs n >= 1"));
    }
    if cfg.channels == 0 {
        return Err(Error::invalid("synthetic data needs at least one member"));
    }
    let total: f64 = cfg.level_mix.iter().sum();
    if cfg.level_mix.iter().any(|&p| !(p >= 0.0)) || !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("level mix must be non-negative with a positive sum"));
    }
    let mix = cfg.level_mix.map(|p| p / total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.bias_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::invalid("bias range must be finite and ordered"));
    }
    let member_bias: Vec<f64> = (0..cfg.channels).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let noise = LogNormal::new(0.0, NOISE_SIGMA).expect("valid lognormal");
    let start = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");
    let size = GRID;
    let pixels = size * size;
    let mut samples = Vec::with_capacity(cfg.n);
    let mut day = 0i64;
    while samples.len() < cfg.n {
        let date = start + Duration::days(day);
        day += 1;
        let latent = latent_field(&mut rng, size);
        let obs: Vec<f64> = latent
            .iter()
            .map(|&u| quantile_to_rain(normal_cdf(u), &mix) as f32 as f64)
            .collect();
        let mut ensemble = Vec::with_capacity(cfg.channels * pixels);
        for &bias in &member_bias {
            let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            for y in 0..size as i64 {
                for x in 0..size as i64 {
                    let sy = (y + dy).clamp(0, size as i64 - 1) as usize;
                    let sx = (x + dx).clamp(0, size as i64 - 1) as usize;
                    let v = obs[sy * size + sx] * noise.sample(&mut rng) + bias;
                    ensemble.push(v.max(0.0) as f32);
                }
            }
        }
        let observation: Vec<f32> = obs.iter().map(|&v| v as f32).collect();
        // keep the data set screening-clean
        if observation.iter().all(|&v| v == 0.0) || ensemble.iter().all(|&v| v == 0.0) {
            continue;
        }
        samples.push(GridSample {
            timestamp: format!("{}T00:00:00Z", date.format("%Y-%m-%d")),
            ensemble,
            observation,
        });
    }
    Dataset::new(cfg.mode, cfg.channels, size, size, samples)
}
