use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    learning_rate: f64,
    kind: OptimizerKind,
    step_count: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(learning_rate, OptimizerKind::Sgd)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(
            learning_rate,
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        )
    }

    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Optimizer {
            learning_rate,
            kind,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter in `params` that requires a
    /// gradient. Frozen parameters are skipped even when they hold a stale grad.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) -> Result<()> {
        for &id in params {
            let t = store.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::contract(format!(
                    "parameter '{}' requires grad but has none",
                    store.name(id)
                )));
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        for &id in params {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in t.data_mut().iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = grad.len();
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - libm::pow(beta1, self.step_count as f64);
                    let bc2 = 1.0 - libm::pow(beta2, self.step_count as f64);
                    for (((p, g), mi), vi) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(store: &mut ParamStore, params: &[ParamId]) {
        for &id in params {
            store.get_mut(id).zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let mut t = Tensor::scalar(value).with_requires_grad(true);
        t.set_grad(Some(vec![grad])).unwrap();
        t.set_requires_grad(trainable);
        let id = store.insert("p", t);
        (store, id)
    }

    #[test]
    fn sgd_rule() {
        let (mut store, id) = single(1.0, 2.0, true);
        Optimizer::sgd(0.1).step(&mut store, &[id]).unwrap();
        assert!((store.get(id).data()[0] - 0.8).abs() < 1e-15);
        // grads survive a step until zero_grad
        assert!(store.get(id).grad().is_some());
        Optimizer::zero_grad(&mut store, &[id]);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut store, id) = single(1.0, 2.0, false);
        Optimizer::sgd(0.1).step(&mut store, &[id]).unwrap();
        Optimizer::adam(0.1).step(&mut store, &[id]).unwrap();
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(1.0).with_requires_grad(true));
        assert!(matches!(
            Optimizer::sgd(0.1).step(&mut store, &[id]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2,
        // so the step is lr * g / (|g| + eps).
        for g in [3.0, -0.5] {
            let (mut store, id) = single(1.0, g, true);
            Optimizer::adam(0.01).step(&mut store, &[id]).unwrap();
            let expected = 1.0 - 0.01 * g / (libm::fabs(g) + 1e-8);
            let got = store.get(id).data()[0];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            assert_eq!(got < 1.0, g > 0.0);
        }
    }
}
