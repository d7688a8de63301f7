use super::params::ParamSet;
use crate::error::{Error, Result};

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("learning rate must be positive, got {lr}")))
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Sgd { lr })
    }

    pub fn step(&self, params: &mut ParamSet) {
        for (_, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (w, gv) in t.data_mut().iter_mut().zip(g) {
                *w -= self.lr * gv;
            }
        }
    }
}

/// Adam with bias-corrected moment estimates. State is laid out by
/// parameter index, so one instance must stay with one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn single(w: f64, g: f64) -> ParamSet {
        let mut p = ParamSet::new();
        let mut t = Tensor::new(&[1], vec![w]).unwrap().with_grad();
        t.accumulate_grad(&[g]);
        p.insert("w", t);
        p
    }

    #[test]
    fn sgd_on_square_takes_hand_computed_step() {
        // f(w) = w^2 at w = 1 has gradient 2.
        let mut p = single(1.0, 2.0);
        Sgd::new(0.1).unwrap().step(&mut p);
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(0.3, 0.0);
        Sgd::new(0.5).unwrap().step(&mut p);
        assert_eq!(p.get("w").unwrap().item(), 0.3);
        let mut adam = Adam::new(0.5).unwrap();
        adam.step(&mut p);
        assert_eq!(p.get("w").unwrap().item(), 0.3);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001, bias-corrected both to 1: step = lr / (1 + eps).
        let mut p = single(0.0, 1.0);
        Adam::new(1e-3).unwrap().step(&mut p);
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        assert!(Sgd::new(0.0).is_err());
        assert!(Adam::new(-1e-3).is_err());
    }
}
