use super::Layer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Elementwise activation.
pub struct Activation<T> {
    kind: ActKind,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn relu() -> Self {
        Self::new(ActKind::Relu)
    }

    pub fn leaky(slope: f64) -> Self {
        Self::new(ActKind::LeakyRelu(slope))
    }

    pub fn sigmoid() -> Self {
        Self::new(ActKind::Sigmoid)
    }

    pub fn identity() -> Self {
        Self::new(ActKind::Identity)
    }

    pub fn apply(kind: ActKind, v: T) -> T {
        match kind {
            ActKind::Identity => v,
            ActKind::Relu => v.max(T::zero()),
            ActKind::LeakyRelu(s) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(s)
                }
            }
            ActKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }
}

impl<T: Scalar> Layer<T> for Activation<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let kind = self.kind;
        let out = x.map(|v| Self::apply(kind, v));
        // sigmoid derivative is expressed through its output
        self.cache = Some(if kind == ActKind::Sigmoid {
            out.clone()
        } else {
            x.clone()
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cached = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape("activation backward before forward".into()))?;
        let kind = self.kind;
        grad.zip_map(cached, |g, v| match kind {
            ActKind::Identity => g,
            ActKind::Relu => {
                if v > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            ActKind::LeakyRelu(s) => {
                if v > T::zero() {
                    g
                } else {
                    g * T::lit(s)
                }
            }
            ActKind::Sigmoid => g * v * (T::one() - v),
        })
    }
}

/// Nearest-neighbour 2× spatial upsampling.
#[derive(Default)]
pub struct Upsample2x;

impl<T: Scalar> Layer<T> for Upsample2x {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            let src = x.item(b);
            let dst = out.item_mut(b);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, oh, ow] = grad.shape();
        let (h, w) = (oh / 2, ow / 2);
        let mut dx = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let src = grad.item(b);
            let dst = dx.item_mut(b);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(ch * h + y / 2) * w + xx / 2] += src[(ch * oh + y) * ow + xx];
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Default)]
pub struct AvgPool2x {
    hw: Option<(usize, usize)>,
}

impl<T: Scalar> Layer<T> for AvgPool2x {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        self.hw = Some((h, w));
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            let src = x.item(b);
            let dst = out.item_mut(b);
            for ch in 0..c {
                let s = &src[ch * h * w..];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * y * w + 2 * xx;
                        dst[(ch * oh + y) * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self
            .hw
            .ok_or_else(|| Error::Shape("pool backward before forward".into()))?;
        let [n, c, oh, ow] = grad.shape();
        let quarter = T::lit(0.25);
        let mut dx = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let src = grad.item(b);
            let dst = dx.item_mut(b);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = src[(ch * oh + y) * ow + xx] * quarter;
                        let i = ch * h * w + 2 * y * w + 2 * xx;
                        dst[i] = g;
                        dst[i + 1] = g;
                        dst[i + w] = g;
                        dst[i + w + 1] = g;
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Spatial mean per channel: NCHW → NC11.
#[derive(Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        self.hw = Some((h, w));
        let plane = h * w;
        let scale = T::one() / T::lit(plane as f64);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for b in 0..n {
            let src = x.item(b);
            for (ch, o) in out.item_mut(b).iter_mut().enumerate() {
                *o = src[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * scale;
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self
            .hw
            .ok_or_else(|| Error::Shape("pool backward before forward".into()))?;
        let [n, c, _, _] = grad.shape();
        let scale = T::one() / T::lit((h * w) as f64);
        let mut dx = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let g = grad.item(b).to_vec();
            for (ch, chunk) in dx.item_mut(b).chunks_mut(h * w).enumerate() {
                chunk.iter_mut().for_each(|v| *v = g[ch] * scale);
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;

    fn input() -> Tensor<f64> {
        Tensor::from_vec(
            [2, 2, 2, 3],
            (0..24).map(|i| (i as f64 * 0.77).sin() + 0.013).collect(),
        )
        .unwrap()
    }

    #[test]
    fn activations_pass_gradient_checks() {
        for kind in [
            ActKind::Identity,
            ActKind::Relu,
            ActKind::LeakyRelu(0.2),
            ActKind::Sigmoid,
        ] {
            check_layer(&mut Activation::<f64>::new(kind), &input(), true, 1e-6);
        }
    }

    #[test]
    fn upsample_and_pool_pass_gradient_checks() {
        check_layer(&mut Upsample2x, &input(), true, 1e-6);
        check_layer(&mut GlobalAvgPool::default(), &input(), true, 1e-6);
        check_layer(&mut AvgPool2x::default(), &input(), true, 1e-6);
    }

    #[test]
    fn upsample_replicates_pixels() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        let y = Upsample2x.forward(&x, false).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
