use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::scalar::Scalar;

/// First-order optimizer over the trainable params of a network.
///
/// State is keyed by visitation order, so one optimizer instance must only
/// ever be stepped against one network.
pub trait Optimizer<T: Scalar> {
    /// Applies one descent step using the accumulated gradients.
    fn step(&mut self, params: &mut dyn ParamSet<T>);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut dyn ParamSet<T>) {
        self.t += 1;
        let lr = T::lit(self.cfg.learning_rate);
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let eps = T::lit(self.cfg.eps);
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.for_each_param(&mut |p| {
            if !p.trainable {
                return;
            }
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.value.len()]);
                vs.push(vec![T::zero(); p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl RmsPropConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

pub struct RmsProp<T> {
    cfg: RmsPropConfig,
    sq: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(cfg: RmsPropConfig) -> Self {
        Self {
            cfg,
            sq: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, params: &mut dyn ParamSet<T>) {
        let lr = T::lit(self.cfg.learning_rate);
        let alpha = T::lit(self.cfg.alpha);
        let eps = T::lit(self.cfg.eps);
        let sq = &mut self.sq;
        let mut idx = 0;
        params.for_each_param(&mut |p| {
            if !p.trainable {
                return;
            }
            if sq.len() <= idx {
                sq.push(vec![T::zero(); p.value.len()]);
            }
            let s = &mut sq[idx];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                s[i] = alpha * s[i] + (T::one() - alpha) * g * g;
                p.value[i] -= lr * g / (s[i].sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamSet};

    struct Quadratic {
        p: Param<f64>,
    }

    impl ParamSet<f64> for Quadratic {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p)
        }
        fn for_each_param_ref(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.p)
        }
    }

    fn minimize(opt: &mut dyn Optimizer<f64>, steps: usize) -> f64 {
        let mut q = Quadratic {
            p: Param::new(vec![3.0, -2.0]),
        };
        for _ in 0..steps {
            q.zero_grad();
            // f = |p - (1, 1)|^2
            for i in 0..2 {
                q.p.grad[i] = 2.0 * (q.p.value[i] - 1.0);
            }
            opt.step(&mut q);
        }
        q.p.value.iter().map(|v| (v - 1.0).powi(2)).sum()
    }

    #[test]
    fn adam_and_rmsprop_descend_a_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        assert!(minimize(&mut Adam::new(cfg), 500) < 1e-3);
        assert!(minimize(&mut RmsProp::new(RmsPropConfig::with_lr(0.01)), 1000) < 1e-3);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert_eq!(minimize(&mut Adam::new(cfg), 10), 4.0 + 9.0);
        assert_eq!(
            minimize(&mut RmsProp::new(RmsPropConfig::with_lr(0.0)), 10),
            13.0
        );
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut q = Quadratic {
            p: Param::new(vec![0.0]),
        };
        q.p.grad[0] = 123.0;
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        adam.step(&mut q);
        assert!((q.p.value[0] + 0.1).abs() < 1e-6);
    }
}
