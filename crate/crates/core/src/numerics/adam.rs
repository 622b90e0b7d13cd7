use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Gradients, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |n| vec![T::zero(); n];
        Self {
            config,
            step: 0,
            m: store.iter().map(|(_, t)| zeros(t.len())).collect(),
            v: store.iter().map(|(_, t)| zeros(t.len())).collect(),
        }
    }

    /// One bias-corrected Adam update. Every trainable parameter needs a
    /// gradient; parameters untouched by the loss should carry zeros.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if let Some(missing) = store
            .ids()
            .find(|&id| store.get(id).requires_grad && grads.get(id).is_none())
        {
            return Err(Error::MissingGradient(store.name(missing).to_string()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(eps);

        for id in store.ids().collect::<Vec<_>>() {
            let param = store.get_mut(id);
            if !param.requires_grad {
                continue;
            }
            let grad = grads.get(id).expect("checked above");
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Fills every trainable parameter lacking a gradient with zeros.
    pub fn complete(store: &ParamStore<T>, grads: &mut Gradients<T>) {
        for id in store.ids() {
            let t = store.get(id);
            if t.requires_grad && grads.get(id).is_none() {
                grads.set(id, vec![T::zero(); t.len()]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        s
    }

    fn grad(g: f64) -> Gradients<f64> {
        let mut grads = Gradients::new(1);
        grads.set(crate::numerics::tensor::ParamId(0), vec![g]);
        grads
    }

    /// Hand-rolled scalar Adam recurrence.
    fn reference(mut x: f64, gs: &[f64]) -> f64 {
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get(crate::numerics::tensor::ParamId(0)).data(), &[0.7]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn one_step_from_zero() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &grad(1.0)).unwrap();
        let x = s.by_name("x").unwrap().data()[0];
        assert!((x - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((x + 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_reference() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &grad(1.0)).unwrap();
        adam.step(&mut s, &grad(1.0)).unwrap();
        let x = s.by_name("x").unwrap().data()[0];
        assert!((x - reference(0.0, &[1.0, 1.0])).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, &Gradients::new(1)).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "x"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn update_is_odd_under_sign_flip() {
        for (x, g) in [(0.3, 1.5), (-2.0, 0.01), (1.0, -7.0)] {
            let mut a = scalar_store(x);
            let mut b = scalar_store(-x);
            let mut sa = AdamState::new(&a, AdamConfig::default());
            let mut sb = AdamState::new(&b, AdamConfig::default());
            for _ in 0..3 {
                sa.step(&mut a, &grad(g)).unwrap();
                sb.step(&mut b, &grad(-g)).unwrap();
            }
            assert_eq!(a.by_name("x").unwrap().data()[0], -b.by_name("x").unwrap().data()[0]);
        }
    }
}
