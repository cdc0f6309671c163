use serde::{Deserialize, Serialize};

use super::{Layer, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
    Instance,
    None,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Instance => "instance",
            Self::None => "none",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "instance" => Ok(Self::Instance),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Batch or instance normalization with a learned per-channel affine.
///
/// Batch mode tracks running statistics and uses them outside training;
/// instance mode always normalizes with per-item statistics.
pub struct Norm<T> {
    kind: NormKind,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    momentum: T,
    eps: T,
    cache: Option<NormCache<T>>,
}

struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> Norm<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: Param::buffer(vec![T::zero(); channels]),
            running_var: Param::buffer(vec![T::one(); channels]),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Statistics groups: (group index per (item, channel), group count).
    fn group(&self, b: usize, c: usize) -> usize {
        match self.kind {
            NormKind::Instance => b * self.channels() + c,
            _ => c,
        }
    }
}

impl<T: Scalar> Layer<T> for Norm<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "norm expects {} channels, got {c}",
                self.channels()
            )));
        }
        if self.kind == NormKind::None {
            return Ok(x.clone());
        }
        let plane = h * w;
        let groups = match self.kind {
            NormKind::Instance => n * c,
            _ => c,
        };
        let batch_stats = train || self.kind == NormKind::Instance;
        let (mean, var) = if batch_stats {
            let count = T::lit((plane * n * c / groups) as f64);
            let mut mean = vec![T::zero(); groups];
            let mut var = vec![T::zero(); groups];
            for b in 0..n {
                for ch in 0..c {
                    let g = self.group(b, ch);
                    let s = &x.item(b)[ch * plane..(ch + 1) * plane];
                    mean[g] += s.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let g = self.group(b, ch);
                    let m = mean[g];
                    let s = &x.item(b)[ch * plane..(ch + 1) * plane];
                    var[g] += s.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            if train && self.kind == NormKind::Batch {
                let mo = self.momentum;
                let unbias = if count > T::one() {
                    count / (count - T::one())
                } else {
                    T::one()
                };
                for ch in 0..c {
                    self.running_mean.value[ch] =
                        (T::one() - mo) * self.running_mean.value[ch] + mo * mean[ch];
                    self.running_var.value[ch] =
                        (T::one() - mo) * self.running_var.value[ch] + mo * var[ch] * unbias;
                }
            }
            (mean, var)
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let g = self.group(b, ch);
                let (m, is) = (mean[g], inv_std[g]);
                let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                let range = ch * plane..(ch + 1) * plane;
                let src = &x.item(b)[range.clone()];
                let xh = &mut xhat.item_mut(b)[range.clone()];
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - m) * is;
                }
                let xh = &xhat.item(b)[range.clone()];
                let dst = &mut out.item_mut(b)[range];
                for (d, &v) in dst.iter_mut().zip(xh) {
                    *d = ga * v + be;
                }
            }
        }
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            batch_stats,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if self.kind == NormKind::None {
            return Ok(grad.clone());
        }
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape("norm backward before forward".into()))?;
        let [n, c, h, w] = grad.shape();
        let plane = h * w;
        let groups = cache.inv_std.len();
        let count = T::lit((plane * n * c / groups) as f64);
        let mut sum_dy = vec![T::zero(); groups];
        let mut sum_dy_xhat = vec![T::zero(); groups];
        for b in 0..n {
            for ch in 0..c {
                let g = self.group(b, ch);
                let range = ch * plane..(ch + 1) * plane;
                let dy = &grad.item(b)[range.clone()];
                let xh = &cache.xhat.item(b)[range];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for (&d, &x) in dy.iter().zip(xh) {
                    s1 += d;
                    s2 += d * x;
                }
                self.beta.grad[ch] += s1;
                self.gamma.grad[ch] += s2;
                sum_dy[g] += s1 * self.gamma.value[ch];
                sum_dy_xhat[g] += s2 * self.gamma.value[ch];
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for b in 0..n {
            for ch in 0..c {
                let g = self.group(b, ch);
                let ga = self.gamma.value[ch];
                let is = cache.inv_std[g];
                let range = ch * plane..(ch + 1) * plane;
                let dy = &grad.item(b)[range.clone()];
                let xh = &cache.xhat.item(b)[range.clone()];
                let dst = &mut dx.item_mut(b)[range];
                if cache.batch_stats {
                    let (m1, m2) = (sum_dy[g] / count, sum_dy_xhat[g] / count);
                    for ((d, &gy), &x) in dst.iter_mut().zip(dy).zip(xh) {
                        *d = is * (ga * gy - m1 - x * m2);
                    }
                } else {
                    for (d, &gy) in dst.iter_mut().zip(dy) {
                        *d = is * ga * gy;
                    }
                }
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;

    fn input() -> Tensor<f64> {
        let shape = [3, 2, 3, 3];
        Tensor::from_vec(
            shape,
            (0..54).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0 + (i as f64).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut bn = Norm::<f64>::new(NormKind::Batch, 2);
        let y = bn.forward(&input(), true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.item(b)[ch * 9..(ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [NormKind::Batch, NormKind::Instance] {
            let mut bn = Norm::<f64>::new(kind, 2);
            bn.gamma.value = vec![1.3, 0.7];
            bn.beta.value = vec![0.1, -0.2];
            check_layer(&mut bn, &input(), true, 1e-5);
        }
        let mut bn = Norm::<f64>::new(NormKind::Batch, 2);
        bn.running_mean.value = vec![0.2, -0.1];
        bn.running_var.value = vec![2.0, 0.5];
        check_layer(&mut bn, &input(), false, 1e-5);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = Norm::<f64>::new(NormKind::Batch, 2);
        let x = input();
        for _ in 0..200 {
            bn.forward(&x, true).unwrap();
        }
        let train = bn.forward(&x, true).unwrap();
        let eval = bn.forward(&x, false).unwrap();
        // unbiased running variance
        for (a, b) in train.data().iter().zip(eval.data()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }
}
