//! Adam with bias correction and classic coupled L2 regularization.
//!
//! The decay term is added to the gradient before the moment updates
//! (grad += weight_decay * param), matching the original Adam-with-L2
//! formulation rather than decoupled weight decay. A non-finite gradient
//! aborts the step before any state is touched, so the caller can restore
//! a known-good snapshot.

use crate::error::DtError;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
            return Err(DtError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                cfg.lr
            )));
        }
        for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DtError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(Adam {
            cfg,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over every parameter. `grads` must align with the
    /// parameter list the optimizer was built for, slot by slot.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DtError::Shape(format!(
                "optimizer tracks {} parameters, got {} tensors and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(DtError::Shape(format!(
                    "parameter {k}: optimizer state has {} entries, \
                     tensor has {} and gradient has {}",
                    self.m[k].len(),
                    p.numel(),
                    g.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(DtError::Numeric(format!(
                    "non-finite gradient at parameter {k}, element {i}; \
                     step aborted"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let grad = g[i] + self.cfg.weight_decay * *x;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * grad;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * grad * grad;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter_alone() {
        let mut p = scalar(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &[1]).unwrap();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0]]).unwrap();
        }
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With m_hat = g and v_hat = g^2 on step one, the update is
        // lr * g / (|g| + eps) regardless of the betas.
        let mut p = scalar(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &[1]).unwrap();
        adam.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.9000000009).abs() < 1e-9);
    }

    #[test]
    fn coupled_decay_shrinks_parameters_without_gradient() {
        let mut p = scalar(2.0);
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &[1]).unwrap();
        let mut prev = 2.0;
        for _ in 0..20 {
            adam.step(&mut [&mut p], &[&[0.0]]).unwrap();
            let now = p.data()[0];
            assert!(now < prev, "decay should shrink the parameter monotonically");
            assert!(now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize p^2 from p = 1; gradient is 2p.
        let mut p = scalar(1.0);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &[1]).unwrap();
        for _ in 0..1000 {
            let g = 2.0 * p.data()[0];
            adam.step(&mut [&mut p], &[&[g]]).unwrap();
        }
        assert!(
            p.data()[0].abs() < 1e-3,
            "ended at {} after 1000 steps",
            p.data()[0]
        );
    }

    #[test]
    fn non_finite_gradient_aborts_before_mutation() {
        let mut a = scalar(1.0);
        let mut b = scalar(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &[1, 1]).unwrap();
        let err = adam
            .step(&mut [&mut a, &mut b], &[&[0.5], &[f64::NAN]])
            .unwrap_err();
        assert!(matches!(err, DtError::Numeric(_)));
        // The healthy first slot must not have moved either.
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 2.0);
        // And the failed call must not have consumed a step: a following
        // clean step behaves like step one.
        adam.step(&mut [&mut a, &mut b], &[&[1.0], &[0.0]]).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((a.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Adam::new(AdamConfig { lr: f64::NAN, ..Default::default() }, &[1]).is_err());
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..Default::default() }, &[1]).is_err());
    }

    #[test]
    fn mismatched_slots_rejected() {
        let mut p = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &[2]).unwrap();
        assert!(matches!(
            adam.step(&mut [&mut p], &[&[1.0]]),
            Err(DtError::Shape(_))
        ));
    }
}
