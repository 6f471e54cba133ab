use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

/// Adaptive-moment descent with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_dim("optimizer parameters", self.m.len(), params.len())?;
        check_dim("optimizer gradient", self.m.len(), grad.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Learning rate at optimisation step `step` of `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.update(&mut p, &[3.0, -0.5], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut opt = AdamW::new(1, 0.1);
        let mut p = vec![2.0];
        opt.update(&mut p, &[0.0], 0.5).unwrap();
        assert!((p[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        let mut opt = AdamW::new(3, 0.0);
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        for k in 0..3000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.update(&mut p, &g, cosine_lr(0.05, k, 3000, true)).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, true), 1.0);
        assert!(cosine_lr(1.0, 10, 10, true).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10, true) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_lr(1.0, 5, 10, false), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let mut opt = AdamW::new(2, 0.0);
        assert!(opt.update(&mut [0.0], &[0.0], 0.1).is_err());
    }
}
