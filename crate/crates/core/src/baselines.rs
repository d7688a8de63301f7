//! Classical ensemble post-processing: ensemble mean (EM), probability
//! matching (PM) and error-weighted ensemble mean (WEM).
//!
//! Every function takes one member-major stack of `c` grids with `pixels`
//! cells each and returns a single grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Additive smoothing in the inverse-error weights.
pub const WEM_DELTA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Em,
    Pm,
    Wem,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Em, BaselineKind::Pm, BaselineKind::Wem];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Em => "em",
            BaselineKind::Pm => "pm",
            BaselineKind::Wem => "wem",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(BaselineKind::Em),
            "pm" => Ok(BaselineKind::Pm),
            "wem" => Ok(BaselineKind::Wem),
            _ => Err(Error::Parse(format!("unknown baseline {s:?} (expected em, pm or wem)"))),
        }
    }
}

fn check_stack(x: &[f64], c: usize) -> Result<usize> {
    if c == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    if x.len() % c != 0 {
        return Err(Error::invalid(format!("{} values do not split into {c} members", x.len())));
    }
    Ok(x.len() / c)
}

pub fn ensemble_mean(x: &[f64], c: usize) -> Result<Vec<f64>> {
    let pixels = check_stack(x, c)?;
    let mut out = vec![0.0; pixels];
    for member in x.chunks_exact(pixels.max(1)) {
        for (o, v) in out.iter_mut().zip(member) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    Ok(out)
}

/// Probability matching: the spatial pattern comes from the ensemble mean,
/// the value distribution from the pooled members. Pooled values are
/// sorted descending and every `c`-th one is kept; the k-th largest kept
/// value goes to the pixel with the k-th largest mean (ties by row-major
/// index).
pub fn prob_match(x: &[f64], c: usize) -> Result<Vec<f64>> {
    let em = ensemble_mean(x, c)?;
    let mut pooled = x.to_vec();
    pooled.sort_by(|a, b| b.total_cmp(a));
    let mut order: Vec<usize> = (0..em.len()).collect();
    order.sort_by(|&p, &q| em[q].total_cmp(&em[p]).then(p.cmp(&q)));
    let mut out = vec![0.0; em.len()];
    for (k, &pixel) in order.iter().enumerate() {
        out[pixel] = pooled[(k + 1) * c - 1];
    }
    Ok(out)
}

pub fn weighted_em(x: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let c = weights.len();
    let pixels = check_stack(x, c)?;
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("weights must be non-negative and sum to one"));
    }
    let mut out = vec![0.0; pixels];
    for (member, &w) in x.chunks_exact(pixels.max(1)).zip(weights) {
        for (o, v) in out.iter_mut().zip(member) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Normalized inverse-MAE weights from per-member errors.
pub fn inverse_error_weights(maes: &[f64]) -> Result<Vec<f64>> {
    if maes.is_empty() {
        return Err(Error::Empty("member errors"));
    }
    let raw: Vec<f64> = maes
        .iter()
        .map(|&m| {
            if m.is_nan() || m < 0.0 {
                0.0
            } else {
                1.0 / (m + WEM_DELTA)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("every member has infinite error".into()));
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// One global weight per member, from each member's MAE against the
/// observations over the whole training split.
pub fn fit_wem_weights(train: &Dataset) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let px = train.pixels();
    let mut abs_sum = vec![0.0f64; train.channels];
    for s in train.samples() {
        for (j, sum) in abs_sum.iter_mut().enumerate() {
            *sum += s
                .member(j, px)
                .iter()
                .zip(&s.observation)
                .map(|(&f, &o)| (f as f64 - o as f64).abs())
                .sum::<f64>();
        }
    }
    let n = (train.len() * px) as f64;
    let maes: Vec<f64> = abs_sum.iter().map(|s| s / n).collect();
    inverse_error_weights(&maes)
}

/// Applies a baseline to every sample of `data`. WEM needs `weights`.
pub fn predict(kind: BaselineKind, data: &Dataset, weights: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    data.samples()
        .iter()
        .map(|s| {
            let x: Vec<f64> = s.ensemble.iter().map(|&v| v as f64).collect();
            match kind {
                BaselineKind::Em => ensemble_mean(&x, data.channels),
                BaselineKind::Pm => prob_match(&x, data.channels),
                BaselineKind::Wem => {
                    let w = weights.ok_or_else(|| Error::invalid("WEM needs fitted weights"))?;
                    weighted_em(&x, w)
                }
            }
        })
        .collect()
}
