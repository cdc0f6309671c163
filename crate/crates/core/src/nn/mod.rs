//! Minimal layer library with explicit backward passes.
//!
//! Every layer caches what it needs during `forward` and consumes it in the
//! matching `backward`, so forward/backward calls must be paired on the same
//! layer instance. Parameter gradients accumulate until `zero_grad`.

mod act;
mod conv;
mod norm;

pub use act::{ActKind, Activation, AvgPool2x, GlobalAvgPool, Upsample2x};
pub use conv::Conv2d;
pub use norm::{Norm, NormKind};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A parameter buffer and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored as non-trainable params so checkpoints
    /// capture them; optimizers and clipping skip them.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    /// He-uniform initialization for a layer with the given fan-in.
    pub fn he_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::new((0..len).map(|_| T::lit(dist.sample(rng))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>>;

    /// Propagates `grad` (w.r.t. the last forward output) back to the input,
    /// accumulating parameter gradients on the way.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn visit_params_ref(&self, _f: &mut dyn FnMut(&Param<T>)) {}
}

/// Shared parameter utilities for anything exposing `visit_params`.
pub trait ParamSet<T: Scalar> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn for_each_param_ref(&self, f: &mut dyn FnMut(&Param<T>));

    fn zero_grad(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.for_each_param_ref(&mut |p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// Flat copy of every parameter and buffer in visitation order.
    fn snapshot(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.for_each_param_ref(&mut |p| out.push(p.value.clone()));
        out
    }

    fn restore(&mut self, values: &[Vec<T>]) -> Result<()> {
        let mut expected = 0usize;
        self.for_each_param_ref(&mut |_| expected += 1);
        if expected != values.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {expected} parameter tensors, found {}",
                values.len()
            )));
        }
        let mut idx = 0;
        let mut bad = None;
        self.for_each_param(&mut |p| {
            if p.value.len() == values[idx].len() {
                p.value.copy_from_slice(&values[idx]);
            } else if bad.is_none() {
                bad = Some((idx, p.value.len(), values[idx].len()));
            }
            idx += 1;
        });
        match bad {
            Some((i, want, got)) => Err(crate::Error::Checkpoint(format!(
                "parameter {i}: expected {want} values, found {got}"
            ))),
            None => Ok(()),
        }
    }

    /// Marks every parameter non-trainable.
    fn freeze(&mut self) {
        self.for_each_param(&mut |p| p.trainable = false);
    }

    /// Clamps every trainable parameter into `[-c, c]`.
    fn clip_weights(&mut self, c: T) {
        self.for_each_param(&mut |p| {
            if p.trainable {
                p.value.iter_mut().for_each(|v| *v = v.max(-c).min(c));
            }
        });
    }

    fn max_abs_param(&self) -> T {
        let mut m = T::zero();
        self.for_each_param_ref(&mut |p| {
            if p.trainable {
                m = p.value.iter().fold(m, |m, v| m.max(v.abs()));
            }
        });
        m
    }
}

impl<T: Scalar, L: Layer<T> + ?Sized> ParamSet<T> for L {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_params(f)
    }

    fn for_each_param_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.visit_params_ref(f)
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        for layer in &self.layers {
            layer.visit_params_ref(f);
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference checks shared by the layer tests.
    use super::*;

    /// Loss used by the checks: `sum(out * probe)`, so `dL/dout = probe`.
    fn probe_loss(out: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, train: bool, tol: f64) {
        let out = layer.forward(x, train).unwrap();
        let probe = Tensor::from_vec(
            out.shape(),
            (0..out.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
        )
        .unwrap();
        layer.zero_grad();
        let gx = layer.backward(&probe).unwrap();
        let h = 1e-5;

        for i in (0..x.len()).step_by((x.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = probe_loss(&layer.forward(&xp, train).unwrap(), &probe);
            let lm = probe_loss(&layer.forward(&xm, train).unwrap(), &probe);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(fd, gx.data()[i]) < tol,
                "input grad {i}: fd {fd} vs analytic {}",
                gx.data()[i]
            );
        }

        let mut analytic = Vec::new();
        layer.for_each_param_ref(&mut |p| {
            if p.trainable {
                analytic.push(p.grad.clone())
            }
        });
        for (pi, grads) in analytic.iter().enumerate() {
            for j in (0..grads.len()).step_by((grads.len() / 7).max(1)) {
                let eval = |layer: &mut dyn Layer<f64>, delta: f64| {
                    let mut k = 0;
                    layer.for_each_param(&mut |p| {
                        if p.trainable {
                            if k == pi {
                                p.value[j] += delta;
                            }
                            k += 1;
                        }
                    });
                };
                eval(layer, h);
                let lp = probe_loss(&layer.forward(x, train).unwrap(), &probe);
                eval(layer, -2.0 * h);
                let lm = probe_loss(&layer.forward(x, train).unwrap(), &probe);
                eval(layer, h);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    rel_err(fd, grads[j]) < tol,
                    "param {pi}[{j}]: fd {fd} vs analytic {}",
                    grads[j]
                );
            }
        }
    }
}
