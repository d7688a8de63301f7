//! Verification scores for deterministic rainfall forecasts.
//!
//! Continuous scores (bias, MAE, RMSE, NSE) work on pooled pixel values;
//! categorical scores (ACC, HSS) work on a five-level contingency table.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edges of Light, Moderate, Heavy and Violent in mm/day.
pub const LEVEL_THRESHOLDS: [f64; 4] = [0.1, 10.1, 25.1, 50.1];

/// Number of rainfall categories.
pub const NUM_LEVELS: usize = 5;

/// Daily rainfall category. Intervals are half-open: a value sitting on a
/// threshold belongs to the upper level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RainLevel {
    None,
    Light,
    Moderate,
    Heavy,
    Violent,
}

impl RainLevel {
    pub const ALL: [RainLevel; NUM_LEVELS] = [
        RainLevel::None,
        RainLevel::Light,
        RainLevel::Moderate,
        RainLevel::Heavy,
        RainLevel::Violent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RainLevel> {
        Self::ALL.get(i).copied()
    }

    /// Hard binning of one value in mm/day.
    pub fn classify(mm: f64) -> Result<RainLevel> {
        if mm.is_nan() || mm < 0.0 {
            return Err(Error::invalid(format!("rainfall must be non-negative, got {mm}")));
        }
        let above = LEVEL_THRESHOLDS.iter().filter(|&&t| mm >= t).count();
        Ok(Self::ALL[above])
    }
}

/// Classifies every value of a grid.
pub fn classify(grid: &[f64]) -> Result<Vec<RainLevel>> {
    grid.iter().map(|&v| RainLevel::classify(v)).collect()
}

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::shape("metric", &[pred.len()], &[obs.len()]));
    }
    if obs.is_empty() {
        return Err(Error::Empty("metric inputs"));
    }
    Ok(())
}

/// Ratio of total predicted to total observed rainfall.
pub fn bias(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    let total: f64 = obs.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("observed rainfall sums to zero".into()));
    }
    Ok(pred.iter().sum::<f64>() / total)
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / obs.len() as f64)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    let mse = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / obs.len() as f64;
    Ok(mse.sqrt())
}

/// Nash-Sutcliffe efficiency: one minus squared error over the
/// observations' squared deviation from their mean.
pub fn nse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let spread: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
    if spread == 0.0 {
        return Err(Error::Degenerate("observations are constant".into()));
    }
    let err: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum();
    Ok(1.0 - err / spread)
}

/// Counts `n[i][j]` of cases observed at level `i` and predicted at `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: [[u64; NUM_LEVELS]; NUM_LEVELS],
}

impl ContingencyTable {
    pub fn from_counts(counts: [[u64; NUM_LEVELS]; NUM_LEVELS]) -> Self {
        ContingencyTable { counts }
    }

    pub fn from_levels(pred: &[RainLevel], obs: &[RainLevel]) -> Result<Self> {
        if pred.len() != obs.len() {
            return Err(Error::shape("contingency", &[pred.len()], &[obs.len()]));
        }
        let mut t = ContingencyTable::default();
        for (p, o) in pred.iter().zip(obs) {
            t.counts[o.index()][p.index()] += 1;
        }
        Ok(t)
    }

    /// Adds another table's counts.
    pub fn merge(&mut self, other: &ContingencyTable) {
        for i in 0..NUM_LEVELS {
            for j in 0..NUM_LEVELS {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn count(&self, obs: RainLevel, pred: RainLevel) -> u64 {
        self.counts[obs.index()][pred.index()]
    }

    pub fn counts(&self) -> &[[u64; NUM_LEVELS]; NUM_LEVELS] {
        &self.counts
    }

    /// Row sums (per observed level).
    pub fn row_totals(&self) -> [u64; NUM_LEVELS] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Column sums (per predicted level).
    pub fn col_totals(&self) -> [u64; NUM_LEVELS] {
        let mut out = [0; NUM_LEVELS];
        for row in &self.counts {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(diagonal count, sum of row-total x column-total, N_T)` in exact
    /// integer arithmetic.
    fn agreement_terms(&self) -> Result<(u128, u128, u128)> {
        let nt = self.total() as u128;
        if nt == 0 {
            return Err(Error::Empty("contingency table"));
        }
        let diag: u128 = (0..NUM_LEVELS).map(|i| self.counts[i][i] as u128).sum();
        let (rows, cols) = (self.row_totals(), self.col_totals());
        let chance: u128 = rows.iter().zip(&cols).map(|(&r, &c)| r as u128 * c as u128).sum();
        Ok((diag, chance, nt))
    }

    /// Fraction of cases whose predicted level equals the observed level.
    pub fn acc(&self) -> Result<f64> {
        let (diag, _, nt) = self.agreement_terms()?;
        Ok(diag as f64 / nt as f64)
    }

    /// Heidke skill score: accuracy in excess of chance agreement, scaled
    /// by the largest possible excess. Evaluated as
    /// `(N_T * diag - sum R C) / (N_T^2 - sum R C)` so the only rounding is
    /// the final division.
    pub fn hss(&self) -> Result<f64> {
        let (diag, chance, nt) = self.agreement_terms()?;
        let denom = nt * nt - chance;
        if denom == 0 {
            return Err(Error::Degenerate("degenerate marginals: HSS denominator is zero".into()));
        }
        let num = (nt * diag) as i128 - chance as i128;
        Ok(num as f64 / denom as f64)
    }
}

/// The six reported scores for one prediction set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub nse: f64,
    pub acc: f64,
    pub hss: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "bias,mae,rmse,nse,acc,hss";

    /// Scores over all pooled pixels. Predictions must already be
    /// non-negative.
    pub fn compute(pred: &[f64], obs: &[f64]) -> Result<MetricReport> {
        let table = ContingencyTable::from_levels(&classify(pred)?, &classify(obs)?)?;
        Ok(MetricReport {
            bias: bias(pred, obs)?,
            mae: mae(pred, obs)?,
            rmse: rmse(pred, obs)?,
            nse: nse(pred, obs)?,
            acc: table.acc()?,
            hss: table.hss()?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.bias, self.mae, self.rmse, self.nse, self.acc, self.hss
        )
    }
}

/// Per-pixel MAE and RMSE maps over a series of `w*h` grids.
pub fn pixel_error_maps(preds: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if preds.len() != obs.len() {
        return Err(Error::shape("pixel_error_maps", &[preds.len()], &[obs.len()]));
    }
    let Some(first) = obs.first() else {
        return Err(Error::Empty("pixel_error_maps"));
    };
    let npix = first.len();
    let mut abs = vec![0.0; npix];
    let mut sq = vec![0.0; npix];
    for (p, o) in preds.iter().zip(obs) {
        if p.len() != npix || o.len() != npix {
            return Err(Error::shape("pixel_error_maps", &[p.len()], &[o.len()]));
        }
        for k in 0..npix {
            let d = p[k] - o[k];
            abs[k] += d.abs();
            sq[k] += d * d;
        }
    }
    let n = obs.len() as f64;
    Ok((
        abs.iter().map(|v| v / n).collect(),
        sq.iter().map(|v| (v / n).sqrt()).collect(),
    ))
}

/// Writes a raster: one text line `RASTER <name> <width> <height> f32le`
/// followed by `width*height` little-endian `f32` values, row-major.
pub fn write_raster<W: Write>(mut w: W, name: &str, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("raster", &[values.len()], &[height, width]));
    }
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(Error::invalid(format!("raster name {name:?} must be a single word")));
    }
    writeln!(w, "RASTER {name} {width} {height} f32le")?;
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a raster written by [`write_raster`]: `(name, width, height, values)`.
pub fn read_raster<R: Read>(mut r: R) -> Result<(String, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        offset: 0,
        msg: "missing raster header line".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format {
        offset: 0,
        msg: "raster header is not UTF-8".into(),
    })?;
    let parts: Vec<&str> = header.split(' ').collect();
    let bad = || Error::Format {
        offset: 0,
        msg: format!("bad raster header {header:?}"),
    };
    if parts.len() != 5 || parts[0] != "RASTER" || parts[4] != "f32le" {
        return Err(bad());
    }
    let width: usize = parts[2].parse().map_err(|_| bad())?;
    let height: usize = parts[3].parse().map_err(|_| bad())?;
    let body = &bytes[nl + 1..];
    if body.len() != width * height * 4 {
        return Err(Error::Format {
            offset: (nl + 1 + body.len()) as u64,
            msg: format!("raster body holds {} bytes, expected {}", body.len(), width * height * 4),
        });
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((parts[1].to_string(), width, height, values))
}
