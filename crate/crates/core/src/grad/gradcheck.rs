//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is an
//! independent oracle for the analytic backward pass.

use super::{ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel_err: f64,
    /// `(tensor index, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

fn compare(report: &mut GradCheckReport, tol: Tolerance, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
    report.checked += 1;
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    if diff > tol.abs_floor && rel > tol.rel {
        report.failures += 1;
    }
    if diff > tol.abs_floor && rel >= report.max_rel_err {
        report.max_rel_err = rel;
        report.worst = Some((tensor, elem, analytic, numeric));
    }
}

/// Checks `d f / d inputs` where every input enters the tape as a
/// differentiable leaf.
pub fn check_inputs<F>(inputs: &[Tensor], tol: Tolerance, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(inputs)?;
    tape.backward(out)?;
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for e in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + tol.step;
            let (t1, _, o1) = eval(&work)?;
            let plus = t1.value(o1).item();
            work[ti].data_mut()[e] = orig - tol.step;
            let (t2, _, o2) = eval(&work)?;
            let minus = t2.value(o2).item();
            work[ti].data_mut()[e] = orig;
            compare(&mut report, tol, ti, e, analytic[e], (plus - minus) / (2.0 * tol.step));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to the trainable tensors of `params`,
/// probing at most `max_per_tensor` evenly spaced elements of each.
///
/// `f` receives a scratch copy of the set so batch-norm buffers may be
/// updated freely.
pub fn check_params<F>(params: &ParamSet, max_per_tensor: usize, tol: Tolerance, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut ParamSet) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut scratch = p.clone();
        let mut tape = Tape::new();
        let out = f(&mut tape, &mut scratch)?;
        Ok(tape.value(out).item())
    };
    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut scratch = params.clone();
        let mut tape = Tape::new();
        let out = f(&mut tape, &mut scratch)?;
        tape.backward_into(out, &mut analytic)?;
    }
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = params.clone();
    for ti in 0..params.len() {
        let t = params.by_id(ti);
        if !t.requires_grad() {
            continue;
        }
        let numel = t.numel();
        let stride = numel.div_ceil(max_per_tensor.max(1)).max(1);
        let grads = analytic
            .by_id(ti)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        for e in (0..numel).step_by(stride) {
            let orig = t.data()[e];
            work.by_id_mut(ti).data_mut()[e] = orig + tol.step;
            let plus = eval(&work)?;
            work.by_id_mut(ti).data_mut()[e] = orig - tol.step;
            let minus = eval(&work)?;
            work.by_id_mut(ti).data_mut()[e] = orig;
            compare(&mut report, tol, ti, e, grads[e], (plus - minus) / (2.0 * tol.step));
        }
    }
    Ok(report)
}
