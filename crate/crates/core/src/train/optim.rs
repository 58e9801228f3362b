//! Momentum SGD and Adam keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Scalar hyperparameters and step count; slot tensors travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<S> {
    pub header: OptimizerHeader,
    /// SGD: `velocity/<param>`; Adam: `m/<param>` and `v/<param>`.
    pub slots: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn sgd(momentum: f64) -> Self {
        Self::with(OptimizerHeader { kind: OptimizerKind::Sgd, momentum, beta1: 0.0, beta2: 0.0, eps: 0.0, steps: 0 })
    }

    pub fn adam(beta1: f64, beta2: f64) -> Self {
        Self::with(OptimizerHeader { kind: OptimizerKind::Adam, momentum: 0.0, beta1, beta2, eps: 1e-8, steps: 0 })
    }

    pub fn with(header: OptimizerHeader) -> Self {
        Self { header, slots: BTreeMap::new() }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = &'p mut Param<S>>, grads: &Gradients<S>, lr: f64) {
        self.header.steps += 1;
        let h = self.header.clone();
        let lr_s = S::from_f64_lossy(lr);
        for p in params {
            let Some(g) = grads.param(p) else { continue };
            match h.kind {
                OptimizerKind::Sgd => {
                    let mu = S::from_f64_lossy(h.momentum);
                    let v = self.slots.entry(format!("velocity/{}", p.name())).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = mu * *vi + gi;
                    }
                    let v = v.clone();
                    for (w, &vi) in p.value_mut().data_mut().iter_mut().zip(v.data()) {
                        *w -= lr_s * vi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (S::from_f64_lossy(h.beta1), S::from_f64_lossy(h.beta2));
                    let one = S::one();
                    let c1 = S::from_f64_lossy(1.0 - h.beta1.powi(h.steps as i32));
                    let c2 = S::from_f64_lossy(1.0 - h.beta2.powi(h.steps as i32));
                    let eps = S::from_f64_lossy(h.eps);
                    let mut m = self.slots.remove(&format!("m/{}", p.name())).unwrap_or_else(|| Tensor::zeros(g.shape()));
                    let mut v = self.slots.remove(&format!("v/{}", p.name())).unwrap_or_else(|| Tensor::zeros(g.shape()));
                    let w = p.value_mut().data_mut();
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        let mi = b1 * m.data()[i] + (one - b1) * gi;
                        let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        w[i] -= lr_s * (mi / c1) / ((vi / c2).sqrt() + eps);
                    }
                    self.slots.insert(format!("m/{}", p.name()), m);
                    self.slots.insert(format!("v/{}", p.name()), v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn quadratic_step(opt: &mut Optimizer<f64>, p: &mut Param<f64>, lr: f64) {
        let g = Graph::new();
        let x = g.param(p);
        let loss = x.square().sum();
        let grads = g.backward(loss);
        opt.step([p], &grads, lr);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = Optimizer::sgd(0.9);
        quadratic_step(&mut opt, &mut p, 0.1);
        // g = 2, v = 2, w = 1 - 0.2
        assert!((p.value().data()[0] - 0.8).abs() < 1e-15);
        quadratic_step(&mut opt, &mut p, 0.1);
        // g = 1.6, v = 0.9 * 2 + 1.6 = 3.4, w = 0.8 - 0.34
        assert!((p.value().data()[0] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = Param::new("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Optimizer::adam(0.5, 0.999);
        quadratic_step(&mut opt, &mut p, 0.01);
        assert!((p.value().data()[0] - 2.99).abs() < 1e-9);
        assert!((p.value().data()[1] + 1.99).abs() < 1e-9);
        assert_eq!(opt.header.steps, 1);
        assert_eq!(opt.slots.len(), 2);
    }

    #[test]
    fn params_without_gradients_are_untouched() {
        let mut used = Param::new("a", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut unused = Param::new("b", Tensor::from_vec(&[1], vec![5.0]).unwrap());
        let g = Graph::new();
        let loss = g.param(&used).square().sum();
        let grads = g.backward(loss);
        let mut opt = Optimizer::adam(0.5, 0.999);
        opt.step([&mut used, &mut unused], &grads, 0.1);
        assert_eq!(unused.value().data(), &[5.0]);
        assert_ne!(used.value().data(), &[1.0]);
    }
}
