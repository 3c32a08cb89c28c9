//! Mini-batch gradient descent with per-parameter adaptive steps from
//! first/second-moment accumulation (decay 0.9 / 0.999, epsilon 1e-8, step
//! 1e-3 unless configured otherwise), with bias-corrected moments.

use crate::layers::ParamSet;
use crate::real::{c, Real};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `grad_of` yields the gradient for a parameter name; params
    /// without gradients (no path to the loss this step) are left untouched
    /// but their moments still decay.
    pub fn step(&mut self, params: &mut ParamSet<T>, grad_of: impl Fn(&str) -> Option<Tensor<T>>) {
        self.step_count += 1;
        let b1 = c::<T>(BETA1);
        let b2 = c::<T>(BETA2);
        let one_b1 = c::<T>(1.0 - BETA1);
        let one_b2 = c::<T>(1.0 - BETA2);
        let bias1 = 1.0 - BETA1.powi(self.step_count as i32);
        let bias2 = 1.0 - BETA2.powi(self.step_count as i32);
        let rate = c::<T>(self.lr / bias1);
        let bias2_sqrt_inv = c::<T>(1.0 / bias2.sqrt());
        let eps = c::<T>(EPS);
        for (idx, (name, tensor)) in params.iter_mut().enumerate() {
            let grad = match grad_of(name) {
                Some(g) => g,
                None => continue,
            };
            debug_assert_eq!(grad.shape(), tensor.shape(), "gradient shape for '{name}'");
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = tensor.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = (v[i] * bias2_sqrt_inv * bias2_sqrt_inv).sqrt() + eps;
                p[i] = p[i] - rate * m[i] / denom;
            }
        }
    }

    /// Moment buffers and step count, for checkpointing (aligned with the
    /// parameter order).
    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.step_count, &self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size");
        assert_eq!(v.len(), self.v.len(), "optimizer state size");
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]));
        let mut opt = Adam::new(&params, 0.05);
        for _ in 0..500 {
            let mut tape: Tape<f64> = Tape::new();
            let ids = params.leaves(&mut tape);
            let x = ids["x"];
            let sq = tape.square(x);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            opt.step(&mut params, |name| Some(grads.get(ids[name], &[2])));
        }
        let x = params.get("x");
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{:?}", x.data());
    }
}
