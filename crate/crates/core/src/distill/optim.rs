use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("Adam eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), params.len().max(grad.len())));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 - decay)·params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::shape(ema.len(), params.len()));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new(cfg(0.1), 2);
        let mut p = [1.0, 1.0];
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.5,
                ..cfg(0.1)
            },
            1,
        );
        let mut p = [2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(cfg(0.05), 2);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn ema_edge_decays() {
        let mut e = [1.0, 2.0];
        ema_update(&mut e, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(e, [5.0, 6.0]);
        ema_update(&mut e, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(e, [5.0, 6.0]);
        assert!(ema_update(&mut e, &[0.0], 0.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut e = [0.0];
        for n in 1..=20 {
            ema_update(&mut e, &[1.0], 0.9).unwrap();
            assert!((1.0 - e[0] - 0.9f64.powi(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(cfg(0.0).validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..cfg(0.1) }.validate().is_err());
        assert!(cfg(0.1).validate().is_ok());
    }
}
