//! Background extraction: an encoder-decoder mapping the reflection-masked
//! reference image and its background-edge pixels to a clean background,
//! trained with a pixel loss plus a feature-space (perceptual) loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::edge_ops::{binarize_edges, edge_image, masked_inputs, residual_mask};
use crate::error::{Error, Result};
use crate::history::History;
use crate::image::{Image, Mask};
use crate::nets::{forward_padded, Head, UNet, UNetConfig};
use crate::nn::{Activation, AvgPool2x, Conv2d, Layer, ParamSet, Sequential};
use crate::optim::{Optimizer, RmsProp, RmsPropConfig};
use crate::scalar::Scalar;
use crate::synth::MixtureSample;
use crate::tensor::Tensor;

/// VGG-16 feature stack layout: channel counts, `0` marks a 2×2 pool.
const VGG16_FEATURES: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Randomly initialized frozen convolutions with the VGG-16 layout.
    #[default]
    RandomFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub source: FeatureSource,
    /// Number of feature-stack layers kept, counting convolutions,
    /// activations and pools from 1.
    pub layer: usize,
    /// VGG channel counts are divided by this.
    pub width_divisor: usize,
    /// Subtracted from pixel values before the first convolution.
    pub input_shift: f64,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::RandomFrozen,
            layer: 14,
            width_divisor: 8,
            input_shift: 0.5,
            seed: 0x5eed_f00d,
        }
    }
}

impl PerceptualConfig {
    /// Layer kinds in order: `Some(channels)` for conv, `None` for pool;
    /// every conv is followed by an activation layer.
    fn layers(&self) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        let mut count = 0;
        for &c in &VGG16_FEATURES {
            if count >= self.layer {
                break;
            }
            if c == 0 {
                out.push(None);
                count += 1;
            } else {
                out.push(Some((c / self.width_divisor).max(1)));
                count += 2;
            }
        }
        out
    }

    pub fn downsampling(&self) -> usize {
        1 << self.layers().iter().filter(|l| l.is_none()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer == 0 || self.width_divisor == 0 {
            return Err(Error::Config("perceptual layer and width divisor must be > 0".into()));
        }
        let max = VGG16_FEATURES.iter().map(|&c| if c == 0 { 1 } else { 2 }).sum::<usize>();
        if self.layer > max {
            return Err(Error::Config(format!(
                "perceptual layer {} exceeds the {max}-layer stack",
                self.layer
            )));
        }
        Ok(())
    }
}

/// Frozen feature map `V`.
pub struct PerceptualNet<T> {
    cfg: PerceptualConfig,
    net: Sequential<T>,
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn new(cfg: &PerceptualConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Sequential::new();
        let mut in_c = in_channels;
        let layers = cfg.layers();
        let mut kept = 0;
        for l in layers {
            match l {
                Some(c) => {
                    net.push(Conv2d::new(in_c, c, 3, 1, 1, &mut rng));
                    kept += 1;
                    if kept < cfg.layer {
                        net.push(Activation::relu());
                    }
                    kept += 1;
                    in_c = c;
                }
                None => {
                    net.push(AvgPool2x::default());
                    kept += 1;
                }
            }
        }
        net.freeze();
        Ok(Self {
            cfg: cfg.clone(),
            net,
        })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.cfg
    }

    pub fn features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shift = T::lit(self.cfg.input_shift);
        self.net.forward(&x.map(|v| v - shift), false)
    }

    /// Gradient w.r.t. the input of the last `features` call.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(grad)
    }
}

/// Pixel, perceptual and combined losses (means over elements).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractionLosses {
    pub reconstruction: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn extraction_losses<T: Scalar>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    v: &mut PerceptualNet<T>,
    lambda2: f64,
) -> Result<ExtractionLosses> {
    extraction_losses_and_grad(output, target, v, lambda2).map(|(l, _)| l)
}

/// Losses plus the gradient of the total w.r.t. `output`.
pub fn extraction_losses_and_grad<T: Scalar>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    v: &mut PerceptualNet<T>,
    lambda2: f64,
) -> Result<(ExtractionLosses, Tensor<T>)> {
    output.check_same(target)?;
    let n = T::lit(output.len() as f64);
    let diff = output.sub(target)?;
    let reconstruction = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
    let mut grad = diff.scale(T::lit(2.0) / n);

    let vt = v.features(target)?;
    let vo = v.features(output)?;
    let fdiff = vo.sub(&vt)?;
    let m = T::lit(fdiff.len() as f64);
    let perceptual = fdiff.data().iter().map(|&d| d * d).sum::<T>() / m;
    if lambda2 != 0.0 {
        let g = v.backward(&fdiff.scale(T::lit(2.0 * lambda2) / m))?;
        grad.add_assign(&g)?;
    }
    let (r, p) = (reconstruction.to_f64_lossy(), perceptual.to_f64_lossy());
    Ok((
        ExtractionLosses {
            reconstruction: r,
            perceptual: p,
            total: r + lambda2 * p,
        },
        grad,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub unet: UNetConfig,
    pub perceptual: PerceptualConfig,
    /// Ablations: feed zeros instead of the respective input.
    pub zero_masked_reference: bool,
    pub zero_background_edges: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::new(6, 3, Head::Sigmoid),
            perceptual: PerceptualConfig::default(),
            zero_masked_reference: false,
            zero_background_edges: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.perceptual.validate()?;
        if self.unet.in_channels != 6 || self.unet.out_channels != 3 {
            return Err(Error::Config("extractor maps 6 channels to 3".into()));
        }
        if !matches!(self.unet.head, Head::Sigmoid) {
            return Err(Error::Config("extractor needs a bounded output head".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ExtractorMeta {
    config: ExtractorConfig,
    trained_steps: usize,
}

pub struct BackgroundExtractor<T> {
    cfg: ExtractorConfig,
    net: UNet<T>,
    trained_steps: usize,
}

impl<T: Scalar> BackgroundExtractor<T> {
    pub fn new(cfg: &ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            net: UNet::new(&cfg.unet, seed)?,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn network(&mut self) -> &mut UNet<T> {
        &mut self.net
    }

    /// `[I_MR | I_MB]` with ablated inputs zeroed, as a 1-item tensor.
    pub fn input_tensor(&self, masked_reference: &Image<T>, background_edges: &Image<T>) -> Result<Tensor<T>> {
        masked_reference.check_same(background_edges)?;
        let zero = |img: &Image<T>, off: bool| {
            if off {
                img.map(|_| T::zero())
            } else {
                img.clone()
            }
        };
        let a = zero(masked_reference, self.cfg.zero_masked_reference).to_tensor();
        let b = zero(background_edges, self.cfg.zero_background_edges).to_tensor();
        Tensor::cat_channels(&[&a, &b])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ExtractorMeta {
            config: self.cfg.clone(),
            trained_steps: self.trained_steps,
        };
        checkpoint::save(path, "extractor", &meta, &self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (ExtractorMeta, _) = checkpoint::load(path, "extractor")?;
        let mut model = Self::new(&meta.config, 0)?;
        model.net.restore(&params)?;
        model.trained_steps = meta.trained_steps;
        Ok(model)
    }
}

/// One training pair: network inputs and the clean background.
#[derive(Clone, Debug)]
pub struct ExtractionExample<T> {
    pub masked_reference: Image<T>,
    pub background_edges: Image<T>,
    pub target: Image<T>,
}

/// Builds the masked inputs from the mixture edges and a background-edge mask.
pub fn extraction_inputs<T: Scalar>(
    reference: &Image<T>,
    m_b: &Mask,
    m_e: &Mask,
) -> Result<(Image<T>, Image<T>)> {
    let m_r = residual_mask(m_e, m_b)?;
    masked_inputs(reference, m_b, &m_r)
}

/// Training pair from ground-truth background edges.
pub fn ground_truth_example<T: Scalar>(sample: &MixtureSample<T>, sigma: f64) -> Result<ExtractionExample<T>> {
    let reference = sample.reference();
    let m_e = binarize_edges(&edge_image(reference), sigma)?;
    let m_b = binarize_edges(&sample.gt_background_edges(), sigma)?;
    let (masked_reference, background_edges) = extraction_inputs(reference, &m_b, &m_e)?;
    Ok(ExtractionExample {
        masked_reference,
        background_edges,
        target: sample.gt_background.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractTrainConfig {
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many steps ran; 0 disables the cap.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for ExtractTrainConfig {
    fn default() -> Self {
        Self {
            lambda2: 1.25,
            learning_rate: 2e-4,
            batch_size: 4,
            epochs: 10,
            max_steps: 0,
            seed: 0,
        }
    }
}

impl ExtractTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("extractor needs lr >= 0 and batch size > 0".into()));
        }
        Ok(())
    }
}

/// Trains on fixed examples; history columns `l_rec,l_p,l_total`.
pub fn train_extractor<T: Scalar>(
    model: &mut BackgroundExtractor<T>,
    examples: &[ExtractionExample<T>],
    cfg: &ExtractTrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut v = PerceptualNet::new(&model.cfg.perceptual, 3)?;
    let mut opt = RmsProp::new(RmsPropConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::new(&["l_rec", "l_p", "l_total"]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let inputs = chunk
                .iter()
                .map(|&i| model.input_tensor(&examples[i].masked_reference, &examples[i].background_edges))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<_> = chunk.iter().map(|&i| examples[i].target.to_tensor()).collect();
            let x = Tensor::stack(&inputs)?;
            let target = Tensor::stack(&targets)?;
            model.net.zero_grad();
            let out = model.net.forward(&x, true)?;
            let (losses, grad) = extraction_losses_and_grad(&out, &target, &mut v, cfg.lambda2)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite {
                    stage: "extract",
                    step,
                    detail: format!("{losses:?}"),
                });
            }
            model.net.backward(&grad)?;
            opt.step(&mut model.net);
            history.push(step, vec![losses.reconstruction, losses.perceptual, losses.total]);
            step += 1;
            model.trained_steps += 1;
        }
    }
    Ok(history)
}

/// Estimated background and the residual `I_c - background`.
#[derive(Clone, Debug)]
pub struct Extraction<T> {
    pub background: Image<T>,
    pub residual: Image<T>,
    /// Residual shifted to the mean of the input and clipped, for viewing.
    pub residual_display: Image<T>,
}

pub fn extract_background<T: Scalar>(
    model: &mut BackgroundExtractor<T>,
    reference: &Image<T>,
    m_b: &Mask,
    m_e: &Mask,
) -> Result<Extraction<T>> {
    if model.trained_steps == 0 {
        return Err(Error::Untrained("extract"));
    }
    let (mr, mb) = extraction_inputs(reference, m_b, m_e)?;
    let x = model.input_tensor(&mr, &mb)?;
    let background = Image::from_tensor(&forward_padded(&mut model.net, &x)?, 0);
    let residual = reference.zip_map(&background, |a, b| a - b)?;
    let shift = reference.mean() - residual.mean();
    let residual_display = residual.map(|v| v + shift).clamp01();
    Ok(Extraction {
        background,
        residual,
        residual_display,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormKind;
    use crate::synth::{generate_sample, SynthConfig};
    use rand::Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small_v() -> PerceptualNet<f64> {
        PerceptualNet::new(&PerceptualConfig::default(), 3).unwrap()
    }

    fn toy_config() -> ExtractorConfig {
        ExtractorConfig {
            unet: UNetConfig::new(6, 3, Head::Sigmoid)
                .with_width(4, 16)
                .with_norm(NormKind::Instance),
            ..Default::default()
        }
    }

    #[test]
    fn feature_stack_layout() {
        let cfg = PerceptualConfig::default();
        assert_eq!(cfg.downsampling(), 4);
        let mut v = small_v();
        let f = v.features(&random([1, 3, 16, 16], 1)).unwrap();
        assert_eq!(f.shape(), [1, 32, 4, 4]);
        assert_eq!(v.net.num_trainable(), 0);
        assert!(PerceptualConfig { layer: 0, ..cfg.clone() }.validate().is_err());
        assert!(PerceptualConfig { layer: 32, ..cfg }.validate().is_err());
    }

    #[test]
    fn losses_vanish_on_exact_match() {
        let x = random([1, 3, 16, 16], 2);
        let l = extraction_losses(&x, &x, &mut small_v(), 1.25).unwrap();
        assert_eq!((l.reconstruction, l.perceptual, l.total), (0.0, 0.0, 0.0));
        let y = random([1, 3, 16, 16], 3);
        let l = extraction_losses(&x, &y, &mut small_v(), 0.0).unwrap();
        assert_eq!(l.total, l.reconstruction);
        assert!(l.perceptual > 0.0);
    }

    #[test]
    fn reconstruction_loss_decreases_along_a_line() {
        let (a, b) = (random([1, 3, 8, 8], 4), random([1, 3, 8, 8], 5));
        let mut v = small_v();
        let at = |t: f64, v: &mut PerceptualNet<f64>| {
            let p = a.zip_map(&b, |x, y| x + t * (y - x)).unwrap();
            extraction_losses(&p, &b, v, 1.25).unwrap().reconstruction
        };
        let (l0, l1, l2) = (at(0.0, &mut v), at(0.5, &mut v), at(0.9, &mut v));
        assert!(l0 > l1 && l1 > l2);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let x = random([1, 3, 8, 8], 6);
        let y = random([1, 3, 8, 8], 7);
        let mut v = small_v();
        let (_, g) = extraction_losses_and_grad(&x, &y, &mut v, 1.0).unwrap();
        let h = 1e-5;
        for i in (0..x.len()).step_by(11) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (extraction_losses(&xp, &y, &mut v, 1.0).unwrap().total
                - extraction_losses(&xm, &y, &mut v, 1.0).unwrap().total)
                / (2.0 * h);
            let a = g.data()[i];
            assert!((fd - a).abs() / (fd.abs() + a.abs()).max(1e-8) < 1e-2, "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn ablation_flags_zero_inputs() {
        let cfg = ExtractorConfig {
            zero_background_edges: true,
            ..toy_config()
        };
        let model = BackgroundExtractor::<f64>::new(&cfg, 1).unwrap();
        let a = Image::filled(3, 4, 4, 0.3);
        let b = Image::filled(3, 4, 4, 0.7);
        let t = model.input_tensor(&a, &b).unwrap();
        assert!(t.data()[..48].iter().all(|&v| v == 0.3));
        assert!(t.data()[48..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_is_refused() {
        let mut model = BackgroundExtractor::<f64>::new(&toy_config(), 1).unwrap();
        let img = Image::filled(3, 8, 8, 0.5);
        let m = Mask::zeros(8, 8);
        assert!(matches!(
            extract_background(&mut model, &img, &m, &m),
            Err(Error::Untrained(_))
        ));
    }

    #[test]
    fn training_reduces_loss_and_extraction_is_consistent() {
        let synth = SynthConfig::default();
        let samples: Vec<_> = (0..2).map(|i| generate_sample::<f32>(&synth, i).unwrap()).collect();
        let examples: Vec<_> = samples.iter().map(|s| ground_truth_example(s, 0.05).unwrap()).collect();
        let cfg = ExtractorConfig {
            unet: UNetConfig::new(6, 3, Head::Sigmoid).with_width(4, 16).with_norm(NormKind::Instance),
            ..Default::default()
        };
        let tcfg = ExtractTrainConfig {
            batch_size: 2,
            epochs: 60,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let mut model = BackgroundExtractor::<f32>::new(&cfg, 3).unwrap();
        let h = train_extractor(&mut model, &examples, &tcfg).unwrap();
        let (head, tail) = h.head_tail_mean("l_total", 5).unwrap();
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(model.trained_steps(), 60);

        let mut again = BackgroundExtractor::<f32>::new(&cfg, 3).unwrap();
        assert_eq!(train_extractor(&mut again, &examples, &tcfg).unwrap().to_csv(), h.to_csv());

        let s = &samples[0];
        let m_e = binarize_edges(&edge_image(s.reference()), 0.05).unwrap();
        let m_b = binarize_edges(&s.gt_background_edges(), 0.05).unwrap();
        let out = extract_background(&mut model, s.reference(), &m_b, &m_e).unwrap();
        assert_eq!(out.background.dims(), s.dims());
        assert!(out.background.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let recon = out.background.zip_map(&out.residual, |a, b| a + b).unwrap();
        for (a, b) in recon.data().iter().zip(s.reference().data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let again = extract_background(&mut model, s.reference(), &m_b, &m_e).unwrap();
        assert_eq!(again.background, out.background);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extractor.json");
        model.save(&path).unwrap();
        let mut loaded = BackgroundExtractor::<f32>::load(&path).unwrap();
        assert_eq!(loaded.trained_steps(), 60);
        let reload = extract_background(&mut loaded, s.reference(), &m_b, &m_e).unwrap();
        assert_eq!(reload.background, out.background);
    }
}
