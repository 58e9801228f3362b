//! Parameterized layers built on the autograd tape.

use rand::{Rng, RngCore};

use crate::autograd::{ConvSpec, Graph, Param, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How batch-norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    TrainNoTrack,
    /// Running statistics.
    Eval,
    /// Running statistics with the affine parameters held constant.
    Frozen,
}

/// A block owning parameters and, optionally, running buffers.
///
/// Implementors list every tensor they own through [`Module::state`]; the
/// trainable subset is derived from [`Param::is_trainable`].
pub trait Module<S: Scalar> {
    /// Every owned tensor in a fixed order.
    fn state(&self) -> Vec<&Param<S>>;
    fn state_mut(&mut self) -> Vec<&mut Param<S>>;

    fn params(&self) -> Vec<&Param<S>> {
        self.state().into_iter().filter(|p| p.is_trainable()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.state_mut().into_iter().filter(|p| p.is_trainable()).collect()
    }

    fn buffers(&self) -> Vec<&Param<S>> {
        self.state().into_iter().filter(|p| !p.is_trainable()).collect()
    }
}

fn he_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub spec: ConvSpec,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool, rng: &mut R) -> Self {
        let k = spec.kernel;
        Self {
            weight: Param::new(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Var<'g, S> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        x.conv2d(w, b, self.spec)
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn state(&self) -> Vec<&Param<S>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[dout, din], (1.0 / din as f64).sqrt(), rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Var<'g, S> {
        x.linear(g.param(&self.weight), Some(g.param(&self.bias)))
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn state(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<S>, x: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let eps = S::from_f64_lossy(self.eps);
        match mode {
            NormMode::Train | NormMode::TrainNoTrack => {
                let (y, stats) = x.batch_norm(g.param(&self.gamma), g.param(&self.beta), eps);
                if mode == NormMode::Train {
                    let m = S::from_f64_lossy(self.momentum);
                    let keep = S::one() - m;
                    for (r, &b) in self.running_mean.value_mut().data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * b;
                    }
                    for (r, &b) in self.running_var.value_mut().data_mut().iter_mut().zip(&stats.var_unbiased) {
                        *r = keep * *r + m * b;
                    }
                }
                y
            }
            NormMode::Eval | NormMode::Frozen => {
                let inv_std = self.running_var.value().map(|v| S::one() / (v + eps).sqrt());
                let (gamma, beta) = if mode == NormMode::Frozen {
                    g.frozen(|| (g.param(&self.gamma), g.param(&self.beta)))
                } else {
                    (g.param(&self.gamma), g.param(&self.beta))
                };
                let scale = gamma.mul(g.constant(inv_std));
                let shift = beta.sub(scale.mul(g.constant(self.running_mean.value().clone())));
                x.channel_affine(scale, shift)
            }
        }
    }
}

impl<S: Scalar> Module<S> for BatchNorm<S> {
    fn state(&self) -> Vec<&Param<S>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
pub fn dropout<'g, S: Scalar, R: RngCore + ?Sized>(g: &'g Graph<S>, x: Var<'g, S>, rate: f64, rng: Option<&mut R>) -> Var<'g, S> {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let mask: Vec<S> = (0..n).map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep }).collect();
    x.mul(g.constant(Tensor::from_vec(&shape, mask).unwrap()))
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<S> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm<S>,
}

impl<S: Scalar> ConvBnRelu<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, spec: ConvSpec, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(&format!("{name}.conv"), cin, cout, spec, false, rng), bn: BatchNorm::new(&format!("{name}.bn"), cout) }
    }

    pub fn forward<'g>(&mut self, g: &'g Graph<S>, x: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let h = self.conv.forward(g, x);
        self.bn.forward(g, h, mode).relu()
    }
}

impl<S: Scalar> Module<S> for ConvBnRelu<S> {
    fn state(&self) -> Vec<&Param<S>> {
        let mut v = self.conv.state();
        v.extend(self.bn.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.conv.state_mut();
        v.extend(self.bn.state_mut());
        v
    }
}
