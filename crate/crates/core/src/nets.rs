//! Encoder-decoder generator and convolutional critic shared by the edge
//! regeneration and background extraction stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, GlobalAvgPool, Layer, Norm, NormKind, Param, Sequential, Upsample2x};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Nonnegative output.
    #[default]
    Relu,
    /// Output in `(0, 1)`.
    Sigmoid,
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
        })
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::Config(format!("unknown output head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of stride-2 encoder stages; the decoder mirrors them.
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub norm: NormKind,
    pub head: Head,
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize, head: Head) -> Self {
        Self {
            in_channels,
            out_channels,
            depth: 6,
            base_channels: 64,
            max_channels: 512,
            norm: NormKind::Batch,
            head,
        }
    }

    pub fn with_width(mut self, base: usize, max: usize) -> Self {
        self.base_channels = base;
        self.max_channels = max;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    /// Encoder output channels per stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i.min(30)).min(self.max_channels))
            .collect()
    }

    /// Inputs must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator needs depth and channels > 0".into()));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(format!(
                "invalid generator widths {} / {}",
                self.base_channels, self.max_channels
            )));
        }
        Ok(())
    }
}

/// U-Net: stride-2 encoder, upsampling decoder, skip concatenation between
/// mirrored stages and a final full-resolution skip from the input.
pub struct UNet<T> {
    cfg: UNetConfig,
    encoder: Vec<Sequential<T>>,
    decoder: Vec<Sequential<T>>,
    head_conv: Conv2d<T>,
    head_act: Activation<T>,
    /// Channel split at each decoder concatenation, innermost first.
    splits: Vec<[usize; 2]>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.stage_channels();
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut in_c = cfg.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            let mut s = Sequential::new();
            s.push(Conv2d::new(in_c, c, 4, 2, 1, &mut rng));
            if i != 0 && i != d - 1 {
                s.push(Norm::new(cfg.norm, c));
            }
            s.push(Activation::leaky(0.2));
            encoder.push(s);
            in_c = c;
        }
        // decoder stage i brings level i+1 up to level i
        let mut decoder = Vec::with_capacity(d);
        let mut splits = Vec::with_capacity(d);
        let mut in_c = ch[d - 1];
        for i in (0..d).rev() {
            let out_c = ch[i.saturating_sub(1)];
            let skip_c = if i == 0 { cfg.in_channels } else { ch[i - 1] };
            let mut s = Sequential::new();
            s.push(Upsample2x);
            s.push(Conv2d::new(in_c, out_c, 3, 1, 1, &mut rng));
            s.push(Norm::new(cfg.norm, out_c));
            s.push(Activation::relu());
            decoder.push(s);
            splits.push([out_c, skip_c]);
            in_c = out_c + skip_c;
        }
        let head_conv = Conv2d::new(in_c, cfg.out_channels, 3, 1, 1, &mut rng);
        let head_act = match cfg.head {
            Head::Relu => Activation::relu(),
            Head::Sigmoid => Activation::sigmoid(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head_conv,
            head_act,
            splits,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }
}

impl<T: Scalar> Layer<T> for UNet<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let m = self.cfg.size_multiple();
        if x.channels() != self.cfg.in_channels || x.height() % m != 0 || x.width() % m != 0 {
            return Err(Error::Shape(format!(
                "generator expects {} channels and sides divisible by {m}, got {:?}",
                self.cfg.in_channels,
                x.shape()
            )));
        }
        let mut skips = vec![x.clone()];
        for stage in &mut self.encoder {
            let next = stage.forward(skips.last().expect("nonempty"), train)?;
            skips.push(next);
        }
        let mut h = skips.pop().expect("encoder output");
        for stage in &mut self.decoder {
            let up = stage.forward(&h, train)?;
            let skip = skips.pop().expect("matching skip");
            h = Tensor::cat_channels(&[&up, &skip])?;
        }
        let pre = self.head_conv.forward(&h, train)?;
        self.head_act.forward(&pre, train)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.cfg.depth;
        let g_pre = self.head_act.backward(grad)?;
        let mut g = self.head_conv.backward(&g_pre)?;
        // skip_grads[k] is the gradient reaching encoder output k-1 (k=0: input)
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..=d).map(|_| None).collect();
        for (j, stage) in self.decoder.iter_mut().enumerate().rev() {
            let level = d - 1 - j;
            let mut parts = g.split_channels(&self.splits[j])?;
            let skip = parts.pop().expect("two parts");
            let up = parts.pop().expect("two parts");
            skip_grads[level] = Some(skip);
            g = stage.backward(&up)?;
        }
        // g is now the gradient at the innermost encoder output
        for (i, stage) in self.encoder.iter_mut().enumerate().rev() {
            if let Some(s) = skip_grads[i + 1].take() {
                g.add_assign(&s)?;
            }
            g = stage.backward(&g)?;
        }
        if let Some(s) = skip_grads[0].take() {
            g.add_assign(&s)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in self.encoder.iter_mut().chain(&mut self.decoder) {
            s.visit_params(f);
        }
        self.head_conv.visit_params(f);
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in self.encoder.iter().chain(&self.decoder) {
            s.visit_params_ref(f);
        }
        self.head_conv.visit_params_ref(f);
    }
}

/// Replicates the last row/column until both sides are multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for b in 0..n {
        let src = x.item(b);
        let dst = out.item_mut(b);
        for ch in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    dst[(ch * ph + y) * pw + xx] = src[(ch * h + y.min(h - 1)) * w + xx.min(w - 1)];
                }
            }
        }
    }
    out
}

/// Top-left `h`×`w` window of every item.
pub fn crop_top_left<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, xh, xw] = x.shape();
    if (xh, xw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let src = x.item(b);
        let dst = out.item_mut(b);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * xh + y) * xw;
                dst[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

/// Inference on arbitrary sizes: pads by edge replication, runs the
/// network and crops back.
pub fn forward_padded<T: Scalar>(net: &mut UNet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let padded = pad_to_multiple(x, net.config().size_multiple());
    let y = net.forward(&padded, false)?;
    Ok(crop_top_left(&y, x.height(), x.width()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Weight clip constant.
    pub clip: f64,
}

impl CriticConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            depth: 6,
            base_channels: 64,
            max_channels: 512,
            clip: 0.01,
        }
    }

    pub fn with_width(mut self, base: usize, max: usize) -> Self {
        self.base_channels = base;
        self.max_channels = max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("critic needs depth and channels > 0".into()));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip constant must be > 0, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Strided convolutional critic with an unbounded scalar score per item.
pub struct Critic<T> {
    cfg: CriticConfig,
    net: Sequential<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new(cfg: &CriticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new();
        let mut in_c = cfg.in_channels;
        for i in 0..cfg.depth {
            let c = (cfg.base_channels << i.min(30)).min(cfg.max_channels);
            net.push(Conv2d::new(in_c, c, 4, 2, 1, &mut rng));
            net.push(Activation::leaky(0.2));
            in_c = c;
        }
        net.push(GlobalAvgPool::default());
        net.push(Conv2d::new(in_c, 1, 1, 1, 0, &mut rng));
        let mut critic = Self {
            cfg: cfg.clone(),
            net,
        };
        critic.clip();
        Ok(critic)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn clip(&mut self) {
        use crate::nn::ParamSet;
        self.clip_weights(T::lit(self.cfg.clip));
    }

    /// Per-item scores.
    pub fn scores(&mut self, x: &Tensor<T>, train: bool) -> Result<Vec<T>> {
        Ok(self.forward(x, train)?.into_vec())
    }
}

impl<T: Scalar> Layer<T> for Critic<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.net.forward(x, train)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(grad)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_params(f)
    }

    fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.net.visit_params_ref(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::nn::ParamSet;
    use rand::Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny(head: Head, norm: NormKind) -> UNetConfig {
        UNetConfig {
            depth: 2,
            ..UNetConfig::new(3, 2, head)
        }
        .with_width(2, 4)
        .with_norm(norm)
    }

    #[test]
    fn unet_preserves_spatial_size() {
        let cfg = UNetConfig::new(9, 3, Head::Relu).with_width(4, 16);
        let mut net = UNet::<f32>::new(&cfg, 1).unwrap();
        let x = random([2, 9, 64, 64], 3).cast::<f32>();
        let y = net.forward(&x, true).unwrap();
        assert_eq!(y.shape(), [2, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        assert!(net.forward(&random([1, 9, 48, 48], 0).cast(), false).is_err());
        assert!(net.forward(&random([1, 8, 64, 64], 0).cast(), false).is_err());
    }

    #[test]
    fn sigmoid_head_is_bounded() {
        let cfg = UNetConfig::new(6, 3, Head::Sigmoid).with_width(2, 8);
        let mut net = UNet::<f64>::new(&cfg, 2).unwrap();
        let y = net.forward(&random([1, 6, 64, 64], 4).scale(50.0), false).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stage_channels_double_up_to_cap() {
        let cfg = UNetConfig::new(9, 3, Head::Relu);
        assert_eq!(cfg.stage_channels(), vec![64, 128, 256, 512, 512, 512]);
        assert_eq!(cfg.size_multiple(), 64);
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        for norm in [NormKind::None, NormKind::Instance] {
            let mut net = UNet::<f64>::new(&tiny(Head::Sigmoid, norm), 5).unwrap();
            check_layer(&mut net, &random([2, 3, 8, 8], 6), true, 1e-4);
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let cfg = CriticConfig {
            depth: 2,
            clip: 1.0,
            ..CriticConfig::new(3)
        }
        .with_width(3, 4);
        let mut critic = Critic::<f64>::new(&cfg, 7).unwrap();
        check_layer(&mut critic, &random([2, 3, 8, 8], 8), true, 1e-4);
    }

    #[test]
    fn critic_starts_clipped_with_scalar_output() {
        let cfg = CriticConfig::new(3).with_width(4, 16);
        let mut critic = Critic::<f32>::new(&cfg, 9).unwrap();
        assert!(critic.max_abs_param() <= 0.01);
        let s = critic.scores(&random([3, 3, 64, 64], 1).cast(), false).unwrap();
        assert_eq!(s.len(), 3);
        assert!(CriticConfig { clip: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn padding_round_trips() {
        let x = random([1, 2, 5, 7], 13);
        let p = pad_to_multiple(&x, 4);
        assert_eq!(p.shape(), [1, 2, 8, 8]);
        assert_eq!(crop_top_left(&p, 5, 7), x);
        assert_eq!(p.data()[7 * 8 + 7], x.data()[4 * 7 + 6]);
        let cfg = tiny(Head::Relu, NormKind::Instance);
        let mut net = UNet::<f64>::new(&cfg, 3).unwrap();
        let x = random([1, 3, 6, 10], 14);
        assert_eq!(forward_padded(&mut net, &x).unwrap().shape(), [1, 2, 6, 10]);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny(Head::Relu, NormKind::Batch);
        let a = UNet::<f64>::new(&cfg, 11).unwrap().snapshot();
        let b = UNet::<f64>::new(&cfg, 11).unwrap().snapshot();
        let c = UNet::<f64>::new(&cfg, 12).unwrap().snapshot();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
