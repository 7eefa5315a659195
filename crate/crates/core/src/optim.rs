use std::ops::Range;

use crate::error::{Result, RiffError};

/// AdamW with decoupled weight decay and the AMSGrad running maximum of the
/// second moment. Minimizes: callers pass the gradient of a loss.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            amsgrad: true,
            m: vec![0.0; len],
            v: vec![0.0; len],
            v_max: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update restricted to the `trainable` index ranges; everything
    /// outside them is left untouched, weight decay included.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], trainable: &[Range<usize>]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != params.len() {
            return Err(RiffError::Shape(format!(
                "optimizer sized for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for range in trainable {
            for i in range.clone() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let v = if self.amsgrad {
                    self.v_max[i] = self.v_max[i].max(self.v[i]);
                    self.v_max[i]
                } else {
                    self.v[i]
                };
                params[i] *= 1.0 - self.lr * self.weight_decay;
                let m_hat = self.m[i] / bc1;
                let denom = (v / bc2).sqrt() + self.eps;
                params[i] -= self.lr * m_hat / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut p = vec![0.3, -1.25, -0.0, 7.0];
        let before = p.clone();
        let mut opt = AdamW::new(4, 0.0, 1e-4);
        opt.step(&mut p, &[1.0, -2.0, 0.5, 3.0], &[0..4]).unwrap();
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, &[0..2]).unwrap();
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn frozen_ranges_untouched() {
        let mut p = vec![1.0, 1.0, 1.0];
        let mut opt = AdamW::new(3, 0.1, 0.5);
        opt.step(&mut p, &[1.0, 1.0, 1.0], &[1..2]).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[2], 1.0);
        assert!(p[1] < 1.0);
    }
}
