use rand::Rng;

use super::{Layer, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution (cross-correlation) with square kernels, lowered to GEMM
/// through im2col. Only the input is cached; columns are rebuilt in backward.
pub struct Conv2d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Param<T>,
    bias: Param<T>,
    input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::he_uniform(out_channels * fan_in, fan_in, rng),
            bias: Param::new(vec![T::zero(); out_channels]),
            input_grad: true,
            cache: None,
        }
    }

    /// Skips the input-gradient computation; `backward` then returns zeros.
    pub fn without_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    pub fn with_bias(mut self, value: T) -> Self {
        self.bias.value.iter_mut().for_each(|b| *b = value);
        self
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, input: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let opl = oh * ow;
        for c in 0..self.in_channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * opl..(row + 1) * opl];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let opl = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * opl..(row + 1) * opl];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let opl = oh * ow;
        let rows = self.col_rows();
        let mut cols = vec![T::zero(); rows * opl];
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        for b in 0..n {
            self.im2col(x.item(b), h, w, oh, ow, &mut cols);
            let dst = out.item_mut(b);
            for (o, chunk) in dst.chunks_mut(opl).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            T::gemm(
                self.out_channels,
                rows,
                opl,
                T::one(),
                &self.weight.value,
                false,
                &cols,
                false,
                T::one(),
                dst,
            );
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape("conv backward before forward".into()))?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = (grad.height(), grad.width());
        let opl = oh * ow;
        let rows = self.col_rows();
        let mut cols = vec![T::zero(); rows * opl];
        let mut dcols = vec![T::zero(); rows * opl];
        let mut dx = Tensor::zeros(x.shape());
        for b in 0..n {
            let g = grad.item(b);
            for (o, chunk) in g.chunks(opl).enumerate() {
                self.bias.grad[o] += chunk.iter().copied().sum();
            }
            self.im2col(x.item(b), h, w, oh, ow, &mut cols);
            T::gemm(
                self.out_channels,
                opl,
                rows,
                T::one(),
                g,
                false,
                &cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            if self.input_grad {
                T::gemm(
                    rows,
                    self.out_channels,
                    opl,
                    T::one(),
                    &self.weight.value,
                    true,
                    g,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, oh, ow, dx.item_mut(b));
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(
        x: &Tensor<f64>,
        wt: &[f64],
        bias: &[f64],
        oc: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((o * c + ci) * k + ky) * k + kx]
                                            * x.item(b)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.item_mut(b)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (5, 1, 2), (1, 1, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, &mut rng).with_bias(0.25);
            let x = random_input([2, 2, 6, 6], 11);
            let got = conv.forward(&x, true).unwrap();
            let want = naive_conv(&x, &conv.weight.value, &conv.bias.value, 3, k, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (5, 1, 2)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, &mut rng);
            check_layer(&mut conv, &random_input([2, 2, 8, 8], 17), true, 1e-6);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f32>::new(3, 1, 3, 1, 1, &mut rng);
        assert!(conv.forward(&Tensor::zeros([1, 2, 4, 4]), false).is_err());
    }
}
