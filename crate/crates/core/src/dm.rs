//! Diebold-Mariano comparison of two forecasters' loss series.

use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    /// One-sided `Phi(statistic)`.
    pub prob: f64,
}

/// Sample autocovariance at `lag`, normalized by the series length.
fn autocov(d: &[f64], mean: f64, lag: usize) -> f64 {
    let n = d.len();
    (lag..n).map(|t| (d[t] - mean) * (d[t - lag] - mean)).sum::<f64>() / n as f64
}

/// Tests whether `loss_a` and `loss_b` differ in expectation. Positive
/// statistics mean `a` has the larger loss.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64], horizon: usize) -> Result<DmResult> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::invalid(format!(
            "loss series lengths differ: {} vs {}",
            loss_a.len(),
            loss_b.len()
        )));
    }
    let n = loss_a.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 losses, got {n}")));
    }
    if horizon == 0 || horizon >= n {
        return Err(Error::invalid(format!("horizon {horizon} outside 1..{n}")));
    }
    if loss_a.iter().chain(loss_b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("loss series must be finite"));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let gamma0 = autocov(&d, mean, 0);
    let scale = d.iter().map(|v| v * v).sum::<f64>() / n as f64;
    // relative threshold absorbs rounding in constant differentials
    if gamma0 <= 1e-24 * scale || gamma0 == 0.0 {
        return Err(Error::Degenerate("degenerate differential".into()));
    }
    let long_run = gamma0 + 2.0 * (1..horizon).map(|k| autocov(&d, mean, k)).sum::<f64>();
    if !(long_run > 0.0) {
        return Err(Error::Degenerate("non-positive long-run variance".into()));
    }
    let statistic = mean / (long_run / n as f64).sqrt();
    Ok(DmResult {
        statistic,
        prob: normal_cdf(statistic),
    })
}

/// Mean squared error of each predicted grid against its observation.
pub fn per_sample_mse(preds: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds.len() != obs.len() {
        return Err(Error::invalid("prediction and observation counts differ"));
    }
    preds
        .iter()
        .zip(obs)
        .map(|(p, o)| {
            if p.len() != o.len() || p.is_empty() {
                return Err(Error::shape("per_sample_mse", &[p.len()], &[o.len()]));
            }
            Ok(p.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64)
        })
        .collect()
}

/// Loss series file: one value per line; blank lines, `#` comments and a
/// leading non-numeric header are skipped.
pub fn read_loss_series(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let field = line.split(',').next_back().unwrap_or("").trim();
        if field.is_empty() || field.starts_with('#') {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Parse(format!("line {}: {field:?} is not a number", i + 1))),
        }
    }
    Ok(out)
}

pub fn write_loss_series(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut s = String::from("loss\n");
    for v in losses {
        s.push_str(&format!("{v:e}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Simpson integration of the density from 0.
    fn cdf_by_quadrature(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let f = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(0.0) + f(z);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for z in [-3.0, -1.0, 0.3, 1.62, 1.77, 4.0] {
            assert!((normal_cdf(z) - cdf_by_quadrature(z)).abs() < 1e-10, "{z}");
        }
        let p = normal_cdf(1.62);
        assert!((0.9465..=0.9475).contains(&p), "{p}");
        let p = normal_cdf(1.77);
        assert!((0.9610..=0.9620).contains(&p), "{p}");
    }

    #[test]
    fn constant_differential_is_degenerate() {
        let b = [0.3, 1.7, 2.2, 0.9, 5.1];
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        assert!(dm_test(&a, &b, 1).unwrap_err().to_string().contains("degenerate differential"));
        assert!(dm_test(&b, &b, 1).is_err());
    }

    #[test]
    fn argument_errors() {
        assert!(dm_test(&[1.0, 2.0], &[1.0, 3.0], 1).is_err());
        assert!(dm_test(&[1.0, 2.0, 3.0], &[1.0, 3.0], 1).is_err());
        assert!(dm_test(&[1.0, 2.0, 3.0], &[0.0, 3.0, 1.0], 0).is_err());
    }

    #[test]
    fn hand_example() {
        // d = (1, 2, 3, 6): mean 3, gamma0 = (4+1+0+9)/4 = 3.5
        let r = dm_test(&[2.0, 3.0, 4.0, 7.0], &[1.0, 1.0, 1.0, 1.0], 1).unwrap();
        assert!((r.statistic - 3.0 / (3.5f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn loss_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_loss_series(&p, &[0.25, 1e-3, 7.0]).unwrap();
        assert_eq!(read_loss_series(&p).unwrap(), vec![0.25, 1e-3, 7.0]);
        std::fs::write(&p, "loss\n1\nx\n").unwrap();
        assert!(read_loss_series(&p).is_err());
    }

    proptest! {
        #[test]
        fn cdf_symmetry(z in -8.0f64..8.0) {
            prop_assert!((normal_cdf(-z) - (1.0 - normal_cdf(z))).abs() < 1e-15);
        }

        #[test]
        fn antisymmetric_and_scale_invariant(
            a in prop::collection::vec(0.0f64..10.0, 12),
            b in prop::collection::vec(0.0f64..10.0, 12),
            lambda in 0.01f64..100.0,
            h in 1usize..3,
        ) {
            let Ok(ab) = dm_test(&a, &b, h) else { return Ok(()) };
            let ba = dm_test(&b, &a, h).unwrap();
            prop_assert!((ab.statistic + ba.statistic).abs() < 1e-9 * (1.0 + ab.statistic.abs()));
            let sa: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * lambda).collect();
            let scaled = dm_test(&sa, &sb, h).unwrap();
            prop_assert!((scaled.statistic - ab.statistic).abs() < 1e-9 * (1.0 + ab.statistic.abs()));
        }
    }
}
