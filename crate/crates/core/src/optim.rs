//! Adam over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    step: u32,
}

impl<T: Real> Adam<T> {
    /// Conventional defaults: `β = (0.9, 0.999)`, `ε = 1e-8`.
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, lr: f64, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed under the optimiser");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - libm::pow(self.beta1, self.step as f64));
        let c2 = T::lit(1.0 - libm::pow(self.beta2, self.step as f64));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::<f64>::new(2);
        let mut p = vec![1.0, -1.0];
        adam.step(0.1, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut adam = Adam::<f32>::new(2);
        let mut p = vec![0.5, 0.25];
        adam.step(0.1, &mut p, &[0.0, 0.0]);
        adam.step(0.0, &mut p, &[1.0, 1.0]);
        assert_eq!(p, vec![0.5, 0.25]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::<f64>::new(1);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(0.01, &mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
