//! Edge depth estimation: a plain convolutional stack mapping the stacked
//! views to a dense disparity map, trained without labels by warping the
//! reference view onto every other view and comparing gradient-weighted
//! intensities.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::edge_ops::{binarize_edges, edge_image, gradient_map};
use crate::error::{Error, Result};
use crate::history::History;
use crate::image::{GradientMap, Image, Mask};
use crate::nn::{Activation, Conv2d, Layer, Norm, NormKind, Param, ParamSet, Sequential};
use crate::optim::{Adam, AdamConfig, Optimizer};
use crate::scalar::Scalar;
use crate::synth::{MultiViewStack, BORDER, NUM_VIEWS, REFERENCE_INDEX};
use crate::tensor::Tensor;
use crate::warp::warp_with_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    pub input_channels: usize,
    /// Output channels of each convolution; the last must be 1.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub norm: NormKind,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        let mut channels = vec![256];
        channels.extend([128; 6]);
        channels.push(1);
        Self {
            input_channels: 3 * NUM_VIEWS,
            channels,
            kernel: 5,
            norm: NormKind::Batch,
        }
    }
}

impl DepthNetConfig {
    /// Same topology with narrower layers: `2·width` first, `width` in the middle.
    pub fn narrow(width: usize) -> Self {
        let mut channels = vec![2 * width];
        channels.extend([width; 6]);
        channels.push(1);
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid channel list {:?}", self.channels)));
        }
        if self.channels.last() != Some(&1) {
            return Err(Error::Config("last depth layer must have 1 channel".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel {} must be odd to preserve spatial size",
                self.kernel
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Dense disparity and the edge support on which it is meaningful.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeDepthMap<T> {
    pub values: Image<T>,
    pub valid_mask: Mask,
}

impl<T: Scalar> EdgeDepthMap<T> {
    /// Disparities on the valid support, skipping a border band.
    pub fn edge_values(&self, border: usize) -> Vec<T> {
        let mask = self.valid_mask.without_border(border);
        let (h, w) = mask.dims();
        (0..h * w)
            .filter(|&i| mask.at(i))
            .map(|i| self.values.data()[i])
            .collect()
    }
}

pub struct DepthNet<T> {
    cfg: DepthNetConfig,
    net: Sequential<T>,
}

impl<T: Scalar> DepthNet<T> {
    pub fn config(&self) -> &DepthNetConfig {
        &self.cfg
    }

    pub fn num_conv_layers(&self) -> usize {
        self.cfg.num_layers()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "depth", &self.cfg, &self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params): (DepthNetConfig, _) = checkpoint::load(path, "depth")?;
        let mut model = build_depth_net(&cfg, 0)?;
        model.net.restore(&params)?;
        Ok(model)
    }
}

impl<T: Scalar> Layer<T> for DepthNet<T> {
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

/// Builds the network with parameters drawn from `seed`.
pub fn build_depth_net<T: Scalar>(cfg: &DepthNetConfig, seed: u64) -> Result<DepthNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new();
    let mut in_c = cfg.input_channels;
    let last = cfg.channels.len() - 1;
    for (i, &out_c) in cfg.channels.iter().enumerate() {
        let conv = Conv2d::new(in_c, out_c, cfg.kernel, 1, cfg.kernel / 2, &mut rng);
        if i == 0 {
            net.push(conv.without_input_grad());
        } else {
            net.push(conv);
        }
        if i < last {
            net.push(Norm::new(cfg.norm, out_c));
            net.push(Activation::relu());
        }
        in_c = out_c;
    }
    Ok(DepthNet {
        cfg: cfg.clone(),
        net,
    })
}

/// Views stacked along channels and centred around zero.
pub fn stack_input<T: Scalar>(stack: &MultiViewStack<T>) -> Tensor<T> {
    let (h, w) = stack.dims();
    let half = T::lit(0.5);
    let mut data = Vec::with_capacity(3 * NUM_VIEWS * h * w);
    for v in stack.views() {
        data.extend(v.data().iter().map(|&x| x - half));
    }
    Tensor::from_vec([1, stack.views().len() * 3, h, w], data).expect("views share a size")
}

/// Scalar gradient magnitude of every view.
pub fn view_gradients<T: Scalar>(stack: &MultiViewStack<T>) -> Vec<GradientMap<T>> {
    stack.views().iter().map(gradient_map).collect()
}

/// Gradient-weighted warping loss, normalized by the number of contributing
/// (view, pixel) pairs with nonzero weight outside the border band.
pub fn depth_loss<T: Scalar>(
    stack: &MultiViewStack<T>,
    disparity: &[T],
    grads: &[GradientMap<T>],
) -> Result<T> {
    depth_loss_impl(stack, disparity, grads, false).map(|(l, _)| l)
}

/// Loss and its derivative with respect to every disparity value.
pub fn depth_loss_and_grad<T: Scalar>(
    stack: &MultiViewStack<T>,
    disparity: &[T],
    grads: &[GradientMap<T>],
) -> Result<(T, Vec<T>)> {
    depth_loss_impl(stack, disparity, grads, true)
}

fn depth_loss_impl<T: Scalar>(
    stack: &MultiViewStack<T>,
    disparity: &[T],
    grads: &[GradientMap<T>],
    want_grad: bool,
) -> Result<(T, Vec<T>)> {
    let (h, w) = stack.dims();
    if disparity.len() != h * w {
        return Err(Error::Shape(format!(
            "disparity has {} values for {h}x{w} views",
            disparity.len()
        )));
    }
    if grads.len() != stack.views().len() || grads.iter().any(|g| g.dims() != (h, w)) {
        return Err(Error::Shape("one gradient map per view required".into()));
    }
    let reference = stack.reference();
    let channels = reference.channels();
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut count = 0usize;
    let mut grad = vec![T::zero(); if want_grad { h * w } else { 0 }];
    for (n, view) in stack.views().iter().enumerate() {
        if n == REFERENCE_INDEX {
            continue;
        }
        let baseline = T::lit(stack.baselines()[n]);
        let (warped, dwarp) = warp_with_grad(reference, disparity, baseline, stack.axis())?;
        let a_n = grads[n].plane(0);
        for y in BORDER..h.saturating_sub(BORDER) {
            for x in BORDER..w.saturating_sub(BORDER) {
                let i = y * w + x;
                let a = a_n[i];
                if a <= T::zero() {
                    continue;
                }
                count += 1;
                for c in 0..channels {
                    let r = a * (view.get(c, y, x) - warped.get(c, y, x));
                    loss += r * r;
                    if want_grad {
                        grad[i] -= two * r * a * dwarp.get(c, y, x);
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let norm = T::lit(count as f64);
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((loss / norm, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound on optimizer steps; 0 means no bound.
    pub max_steps: usize,
    /// Square training crop; inputs smaller than this are used whole.
    pub patch: usize,
    pub seed: u64,
}

impl Default for DepthTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 10,
            max_steps: 0,
            patch: 128,
            seed: 0,
        }
    }
}

impl DepthTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.patch == 0 {
            return Err(Error::Config("batch size and patch must be positive".into()));
        }
        Ok(())
    }
}

fn random_crop<T: Scalar>(
    stack: &MultiViewStack<T>,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<MultiViewStack<T>> {
    let (h, w) = stack.dims();
    let (ph, pw) = (patch.min(h), patch.min(w));
    if (ph, pw) == (h, w) {
        return Ok(stack.clone());
    }
    let y0 = rng.random_range(0..=h - ph);
    let x0 = rng.random_range(0..=w - pw);
    let views = stack
        .views()
        .iter()
        .map(|v| v.crop(y0, x0, ph, pw))
        .collect::<Result<Vec<_>>>()?;
    MultiViewStack::new(views, stack.baselines().to_vec(), stack.axis())
}

/// Trains on unlabeled stacks; returns the per-step loss history.
pub fn train_depth_net<T: Scalar>(
    model: &mut DepthNet<T>,
    stacks: &[MultiViewStack<T>],
    cfg: &DepthTrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if stacks.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam);
    let mut history = History::new(&["loss"]);
    let mut order: Vec<usize> = (0..stacks.len()).collect();
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let batch = chunk
                .iter()
                .map(|&i| random_crop(&stacks[i], cfg.patch, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let loss = depth_step(model, &batch, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: "depth",
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            history.push(step, vec![loss]);
            step += 1;
        }
    }
    Ok(history)
}

fn depth_step<T: Scalar>(
    model: &mut DepthNet<T>,
    batch: &[MultiViewStack<T>],
    opt: &mut Adam<T>,
) -> Result<f64> {
    let input = Tensor::stack(&batch.iter().map(stack_input).collect::<Vec<_>>())?;
    let out = model.forward(&input, true)?;
    let mut grad = Tensor::zeros(out.shape());
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut total = 0.0;
    for (b, stack) in batch.iter().enumerate() {
        let grads = view_gradients(stack);
        let (loss, g) = depth_loss_and_grad(stack, out.item(b), &grads)?;
        total += loss.to_f64_lossy();
        for (dst, src) in grad.item_mut(b).iter_mut().zip(g) {
            *dst = src * scale;
        }
    }
    model.zero_grad();
    model.backward(&grad)?;
    opt.step(model);
    Ok(total / batch.len() as f64)
}

/// Dense disparity for the reference view; valid on its σ-edges.
pub fn infer_edge_depth<T: Scalar>(
    model: &mut DepthNet<T>,
    stack: &MultiViewStack<T>,
    sigma: f64,
) -> Result<EdgeDepthMap<T>> {
    let out = model.forward(&stack_input(stack), false)?;
    let values = Image::from_tensor(&out, 0);
    let valid_mask = binarize_edges(&edge_image(stack.reference()), sigma)?;
    Ok(EdgeDepthMap { values, valid_mask })
}
