//! Adam with per-tensor moment buffers. Steps are applied at an explicit
//! barrier: accumulate gradients however you like, call `step`, then zero.

use crate::grid::ParamSet;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one_b1 = T::of(1.0 - self.beta1);
        let one_b2 = T::of(1.0 - self.beta2);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..t.values.len() {
                let g = t.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i].f64() / bc1;
                let v_hat = v[i].f64() / bc2;
                let upd = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                t.values[i] = T::of(t.values[i].f64() - upd);
            }
        }
        params.zero_grads();
    }

    /// Moment buffers in tensor order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..400 {
            let vals = ps.get(id).values.clone();
            for (i, v) in vals.iter().enumerate() {
                ps.get_mut(id).grad[i] = 2.0 * v;
            }
            opt.step(&mut ps);
        }
        assert!(ps.get(id).values.iter().all(|v| v.abs() < 1e-2));
        assert_eq!(ps.grad_abs_sum(), 0.0);
    }
}
