//! Bias-corrected Adam over a [`ParamStore`].

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments exist only for parameters that have received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            t: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// One update. Parameters with `None` gradient are untouched bit for bit.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(ParamId(i)).data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.register("x", &[1], Init::Zeros).unwrap();
        s.get_mut(id).data_mut()[0] = x;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut adam = Adam::new(1);
        adam.step(&mut s, &[Some(Tensor::zeros(&[1]))], 0.1);
        assert_eq!(s.get(ParamId(0)).data()[0], 0.7);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(1);
        adam.step(&mut s, &[Some(Tensor::ones(&[1]))], 0.1);
        assert!((s.get(ParamId(0)).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(1);
        for _ in 0..200 {
            let x = s.get(ParamId(0)).data()[0];
            adam.step(&mut s, &[Some(Tensor::full(&[1], 2.0 * x))], 0.05);
        }
        assert!(
            s.get(ParamId(0)).data()[0].abs() < 1e-3,
            "{}",
            s.get(ParamId(0)).data()[0]
        );
    }

    #[test]
    fn missing_gradient_is_untouched() {
        let mut s = scalar_store(0.3);
        let mut adam = Adam::new(1);
        adam.step(&mut s, &[None], 1.0);
        assert_eq!(s.get(ParamId(0)).data()[0].to_bits(), 0.3f64.to_bits());
        assert!(adam.m[0].is_none());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![
            Some(Tensor::full(&[4], 1.0)),
            None,
            Some(Tensor::full(&[1], 2.0)),
        ];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 8f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
