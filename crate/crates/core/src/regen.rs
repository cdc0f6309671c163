//! Edge regeneration: a U-Net generator refines the initial background edge
//! estimate while two weight-clipped critics score generated background
//! edges and the implied reflection edges against ground truth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::classifier::InitialEdges;
use crate::edge_ops::binarize_edges;
use crate::error::{Error, Result};
use crate::history::History;
use crate::image::{EdgeImage, Image, Mask};
use crate::nets::{forward_padded, Critic, CriticConfig, Head, UNet, UNetConfig};
use crate::nn::{Layer, ParamSet};
use crate::optim::{Optimizer, RmsProp, RmsPropConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generator input `[E | E_B0 | E_R0]`, each three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegenInput<T> {
    pub edges: EdgeImage<T>,
    pub initial_background: EdgeImage<T>,
    pub initial_reflection: EdgeImage<T>,
}

impl<T: Scalar> RegenInput<T> {
    pub fn new(edges: &EdgeImage<T>, initial: &InitialEdges<T>) -> Result<Self> {
        edges.check_same(&initial.e_b0)?;
        edges.check_same(&initial.e_r0)?;
        Ok(Self {
            edges: edges.clone(),
            initial_background: initial.e_b0.clone(),
            initial_reflection: initial.e_r0.clone(),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::cat_channels(&[
            &self.edges.to_tensor(),
            &self.initial_background.to_tensor(),
            &self.initial_reflection.to_tensor(),
        ])
    }
}

/// A training tuple with ground-truth layer edges.
#[derive(Clone, Debug)]
pub struct RegenExample<T> {
    pub input: RegenInput<T>,
    pub gt_background: EdgeImage<T>,
    pub gt_reflection: EdgeImage<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenConfig {
    pub generator: UNetConfig,
    pub critic: CriticConfig,
}

impl Default for RegenConfig {
    fn default() -> Self {
        Self {
            generator: UNetConfig::new(9, 3, Head::Relu),
            critic: CriticConfig::new(3),
        }
    }
}

impl RegenConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate()?;
        if self.generator.in_channels != 9 || self.generator.out_channels != 3 {
            return Err(Error::Config("generator maps 9 channels to 3".into()));
        }
        if self.generator.head != Head::Relu {
            return Err(Error::Config("generator needs a nonnegative head".into()));
        }
        if self.critic.in_channels != 3 {
            return Err(Error::Config("critics score 3-channel edge images".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RegenMeta {
    config: RegenConfig,
    trained_steps: usize,
}

/// Generator `G_B` with critics `D_B` and `D_R`.
pub struct EdgeRegenerator<T> {
    cfg: RegenConfig,
    pub generator: UNet<T>,
    pub critic_b: Critic<T>,
    pub critic_r: Critic<T>,
    trained_steps: usize,
}

const GENERATOR_FILE: &str = "generator.json";
const CRITIC_B_FILE: &str = "critic_b.json";
const CRITIC_R_FILE: &str = "critic_r.json";

impl<T: Scalar> EdgeRegenerator<T> {
    pub fn new(cfg: &RegenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            generator: UNet::new(&cfg.generator, seed)?,
            critic_b: Critic::new(&cfg.critic, seed.wrapping_add(1))?,
            critic_r: Critic::new(&cfg.critic, seed.wrapping_add(2))?,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &RegenConfig {
        &self.cfg
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    /// Writes the three networks into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = RegenMeta {
            config: self.cfg.clone(),
            trained_steps: self.trained_steps,
        };
        checkpoint::save(&dir.join(GENERATOR_FILE), "regen-generator", &meta, &self.generator)?;
        checkpoint::save(&dir.join(CRITIC_B_FILE), "regen-critic", &meta.config.critic, &self.critic_b)?;
        checkpoint::save(&dir.join(CRITIC_R_FILE), "regen-critic", &meta.config.critic, &self.critic_r)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, params): (RegenMeta, _) = checkpoint::load(&dir.join(GENERATOR_FILE), "regen-generator")?;
        let mut model = Self::new(&meta.config, 0)?;
        model.generator.restore(&params)?;
        for (file, critic) in [(CRITIC_B_FILE, &mut model.critic_b), (CRITIC_R_FILE, &mut model.critic_r)] {
            let (_, params): (CriticConfig, Vec<Vec<T>>) = checkpoint::load(&dir.join(file), "regen-critic")?;
            critic.restore(&params)?;
        }
        model.trained_steps = meta.trained_steps;
        Ok(model)
    }
}

/// Sum of squares per item, averaged over the batch.
fn batch_sq_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let d = a.sub(b)?;
    let m = a.batch() as f64;
    let loss = d.data().iter().map(|&v| (v * v).to_f64_lossy()).sum::<f64>() / m;
    Ok((loss, d.scale(T::lit(2.0 / m))))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn scores<T: Scalar>(critic: &mut Critic<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(critic.scores(x, true)?.iter().map(|s| s.to_f64_lossy()).collect())
}

/// Generator objective on one batch:
/// `mean_i ‖G(z_i) − E_B,i‖² − λ1·(D_B(G(z_i)) + D_R(E_i − G(z_i)))`.
pub fn generator_objective<T: Scalar>(
    model: &mut EdgeRegenerator<T>,
    z: &Tensor<T>,
    edges: &Tensor<T>,
    gt_background: &Tensor<T>,
    lambda1: f64,
) -> Result<f64> {
    let g = model.generator.forward(z, false)?;
    let (data, _) = batch_sq_error(&g, gt_background)?;
    if lambda1 == 0.0 {
        return Ok(data);
    }
    let db = mean(&scores(&mut model.critic_b, &g)?);
    let dr = mean(&scores(&mut model.critic_r, &edges.sub(&g)?)?);
    Ok(data - lambda1 * (db + dr))
}

/// The two critic objectives (to be ascended):
/// `mean D_B(E_B) − mean D_B(G(z))` and `mean D_R(E_R) − mean D_R(E − G(z))`.
pub fn critic_objectives<T: Scalar>(
    model: &mut EdgeRegenerator<T>,
    z: &Tensor<T>,
    edges: &Tensor<T>,
    gt_background: &Tensor<T>,
    gt_reflection: &Tensor<T>,
) -> Result<(f64, f64)> {
    let g = model.generator.forward(z, false)?;
    let fake_r = edges.sub(&g)?;
    let ob = mean(&scores(&mut model.critic_b, gt_background)?) - mean(&scores(&mut model.critic_b, &g)?);
    let or = mean(&scores(&mut model.critic_r, gt_reflection)?) - mean(&scores(&mut model.critic_r, &fake_r)?);
    Ok((ob, or))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenTrainConfig {
    pub lambda1: f64,
    pub generator_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub critic_steps: usize,
    /// Generator updates.
    pub steps: usize,
    /// Train the generator alone with the pixel term.
    pub use_critics: bool,
    pub seed: u64,
}

impl Default for RegenTrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 2.5e-3,
            generator_lr: 2e-4,
            critic_lr: 2e-5,
            batch_size: 4,
            critic_steps: 1,
            steps: 1000,
            use_critics: true,
            seed: 0,
        }
    }
}

impl RegenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(self.generator_lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be > 0".into()));
        }
        Ok(())
    }
}

struct Batch<T> {
    z: Tensor<T>,
    edges: Tensor<T>,
    gt_b: Tensor<T>,
    gt_r: Tensor<T>,
}

fn gather<T: Scalar>(examples: &[RegenExample<T>], idx: &[usize]) -> Result<Batch<T>> {
    let z = idx
        .iter()
        .map(|&i| examples[i].input.to_tensor())
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: &dyn Fn(&RegenExample<T>) -> &Image<T>| {
        Tensor::stack(&idx.iter().map(|&i| f(&examples[i]).to_tensor()).collect::<Vec<_>>())
    };
    Ok(Batch {
        z: Tensor::stack(&z)?,
        edges: pick(&|e| &e.input.edges)?,
        gt_b: pick(&|e| &e.gt_background)?,
        gt_r: pick(&|e| &e.gt_reflection)?,
    })
}

/// Draws batches from repeatedly shuffled index orders.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, m: usize) -> Vec<usize> {
        (0..m)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// One ascent step on `mean D(real) − mean D(fake)` followed by clipping.
fn critic_step<T: Scalar>(
    critic: &mut Critic<T>,
    opt: &mut RmsProp<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<f64> {
    critic.zero_grad();
    let m_real = real.batch() as f64;
    let m_fake = fake.batch() as f64;
    let sr = scores(critic, real)?;
    critic.backward(&Tensor::full([real.batch(), 1, 1, 1], T::lit(-1.0 / m_real)))?;
    let sf = scores(critic, fake)?;
    critic.backward(&Tensor::full([fake.batch(), 1, 1, 1], T::lit(1.0 / m_fake)))?;
    opt.step(critic);
    critic.clip();
    Ok(mean(&sr) - mean(&sf))
}

/// Per-step record of the clipping invariant, for callers that audit it.
pub type ClipObserver<'a, T> = dyn FnMut(usize, &EdgeRegenerator<T>) + 'a;

/// Alternating training: `critic_steps` updates of `D_B` then `D_R` on an
/// independent batch, then one generator update. History columns
/// `gen_obj,dB_obj,dR_obj`.
pub fn train_regen<T: Scalar>(
    model: &mut EdgeRegenerator<T>,
    examples: &[RegenExample<T>],
    cfg: &RegenTrainConfig,
) -> Result<History> {
    train_regen_observed(model, examples, cfg, &mut |_, _| {})
}

/// [`train_regen`] calling `observe` after every critic update.
pub fn train_regen_observed<T: Scalar>(
    model: &mut EdgeRegenerator<T>,
    examples: &[RegenExample<T>],
    cfg: &RegenTrainConfig,
    observe: &mut ClipObserver<'_, T>,
) -> Result<History> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let lambda1 = if cfg.use_critics { cfg.lambda1 } else { 0.0 };
    let mut gen_opt = RmsProp::new(RmsPropConfig::with_lr(cfg.generator_lr));
    let mut opt_b = RmsProp::new(RmsPropConfig::with_lr(cfg.critic_lr));
    let mut opt_r = RmsProp::new(RmsPropConfig::with_lr(cfg.critic_lr));
    let mut gen_batches = Sampler::new(examples.len(), cfg.seed);
    let mut critic_batches = Sampler::new(examples.len(), cfg.seed ^ 0xC217_1C00);
    let mut history = History::new(&["gen_obj", "dB_obj", "dR_obj"]);
    let m = cfg.batch_size.min(examples.len());
    let nonfinite = |step, detail: String| Error::NonFinite {
        stage: "regen",
        step,
        detail,
    };

    for step in 0..cfg.steps {
        let (mut ob, mut or) = (0.0, 0.0);
        if cfg.use_critics {
            for _ in 0..cfg.critic_steps {
                let b = gather(examples, &critic_batches.next(m))?;
                let fake_b = model.generator.forward(&b.z, true)?;
                let fake_r = b.edges.sub(&fake_b)?;
                ob = critic_step(&mut model.critic_b, &mut opt_b, &b.gt_b, &fake_b)?;
                or = critic_step(&mut model.critic_r, &mut opt_r, &b.gt_r, &fake_r)?;
                observe(step, model);
            }
        }

        let b = gather(examples, &gen_batches.next(m))?;
        model.generator.zero_grad();
        let g = model.generator.forward(&b.z, true)?;
        let (data, mut grad) = batch_sq_error(&g, &b.gt_b)?;
        let mut gen_obj = data;
        if lambda1 > 0.0 {
            let scale = T::lit(lambda1 / m as f64);
            let sb = scores(&mut model.critic_b, &g)?;
            let gb = model.critic_b.backward(&Tensor::full([m, 1, 1, 1], -scale))?;
            grad.add_assign(&gb)?;
            let sr = scores(&mut model.critic_r, &b.edges.sub(&g)?)?;
            // d(E − G)/dG = −1 flips the sign once more
            let gr = model.critic_r.backward(&Tensor::full([m, 1, 1, 1], scale))?;
            grad.add_assign(&gr)?;
            model.critic_b.zero_grad();
            model.critic_r.zero_grad();
            gen_obj -= lambda1 * (mean(&sb) + mean(&sr));
        }
        if !(gen_obj.is_finite() && ob.is_finite() && or.is_finite()) {
            return Err(nonfinite(step, format!("gen {gen_obj}, dB {ob}, dR {or}")));
        }
        model.generator.backward(&grad)?;
        gen_opt.step(&mut model.generator);
        model.trained_steps += 1;
        history.push(step, vec![gen_obj, ob, or]);
    }
    Ok(history)
}

/// Regenerated background edges, the complementary reflection edges and
/// the binarized background support.
#[derive(Clone, Debug)]
pub struct RegeneratedEdges<T> {
    pub background: EdgeImage<T>,
    pub reflection: EdgeImage<T>,
    pub background_mask: Mask,
}

pub fn regenerate_edges<T: Scalar>(
    model: &mut EdgeRegenerator<T>,
    input: &RegenInput<T>,
    sigma: f64,
) -> Result<RegeneratedEdges<T>> {
    if model.trained_steps == 0 {
        return Err(Error::Untrained("regen"));
    }
    let out = forward_padded(&mut model.generator, &input.to_tensor()?)?;
    edges_from_generated(&input.edges, Image::from_tensor(&out, 0), sigma)
}

/// `M̃_B = binarize(Ẽ_B, σ)` and `Ẽ_R = E·(1 − M̃_B)`.
pub fn edges_from_generated<T: Scalar>(
    edges: &EdgeImage<T>,
    background: EdgeImage<T>,
    sigma: f64,
) -> Result<RegeneratedEdges<T>> {
    let background_mask = binarize_edges(&background, sigma)?;
    let reflection = crate::edge_ops::remove_masked(edges, &background_mask)?;
    Ok(RegeneratedEdges {
        background,
        reflection,
        background_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormKind;

    fn toy_config() -> RegenConfig {
        RegenConfig {
            generator: UNetConfig::new(9, 3, Head::Relu).with_width(4, 16).with_norm(NormKind::Instance),
            critic: CriticConfig::new(3).with_width(4, 16),
        }
    }

    /// Two fixed patterns: a vertical and a horizontal bar of edges.
    fn two_pattern_examples() -> Vec<RegenExample<f32>> {
        (0..2)
            .map(|k| {
                let bar = Image::from_fn(3, 64, 64, |_, y, x| {
                    let on = if k == 0 { x == 20 || x == 21 } else { y == 40 || y == 41 };
                    if on { 0.5 } else { 0.0 }
                });
                let refl = Image::from_fn(3, 64, 64, |_, y, x| if (y + x) % 16 == 0 { 0.2 } else { 0.0 });
                let edges = bar.zip_map(&refl, |a, b| a + b).unwrap();
                let zero = Image::filled(3, 64, 64, 0.0);
                RegenExample {
                    input: RegenInput {
                        edges,
                        initial_background: zero.clone(),
                        initial_reflection: refl.clone(),
                    },
                    gt_background: bar,
                    gt_reflection: refl,
                }
            })
            .collect()
    }

    #[test]
    fn zero_generated_edges_leave_everything_to_reflection() {
        let e = Image::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f64 * 0.05);
        let out = edges_from_generated(&e, Image::filled(3, 4, 4, 0.0), 0.05).unwrap();
        assert_eq!(out.background_mask.count(), 0);
        assert_eq!(out.reflection, e);

        let gen = Image::from_fn(3, 4, 4, |_, y, _| if y < 2 { 0.3 } else { 0.01 });
        let out = edges_from_generated(&e, gen, 0.05).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                if out.background_mask.get(y, x) {
                    assert!((0..3).all(|c| out.reflection.get(c, y, x) == 0.0));
                }
            }
        }
    }

    #[test]
    fn objectives_reduce_to_their_parts() {
        let ex = two_pattern_examples();
        let mut model = EdgeRegenerator::<f32>::new(&toy_config(), 1).unwrap();
        let b = gather(&ex, &[0, 1]).unwrap();
        let pure = generator_objective(&mut model, &b.z, &b.edges, &b.gt_b, 0.0).unwrap();
        let g = model.generator.forward(&b.z, false).unwrap();
        let (expected, _) = batch_sq_error(&g, &b.gt_b).unwrap();
        assert!((pure - expected).abs() < 1e-6 * expected.max(1.0));
        let with = generator_objective(&mut model, &b.z, &b.edges, &b.gt_b, 2.5e-3).unwrap();
        assert!((with - pure).abs() < 1e-3);

        // identical real and fake batches give a zero critic objective
        let same = gather(&ex, &[0, 0]).unwrap();
        let sb = model.critic_b.scores(&same.gt_b, false).unwrap();
        assert_eq!(sb[0], sb[1]);
    }

    #[test]
    fn training_keeps_critics_clipped_and_separates_patterns() {
        let ex = two_pattern_examples();
        let mut model = EdgeRegenerator::<f32>::new(&toy_config(), 2).unwrap();
        let cfg = RegenTrainConfig {
            steps: 40,
            batch_size: 2,
            generator_lr: 1e-3,
            critic_lr: 1e-3,
            ..Default::default()
        };
        let mut worst = 0.0f32;
        let h = train_regen_observed(&mut model, &ex, &cfg, &mut |_, m| {
            worst = worst.max(m.critic_b.max_abs_param()).max(m.critic_r.max_abs_param());
        })
        .unwrap();
        assert!(worst <= 0.01);
        assert!(h.all_finite());
        assert_eq!(h.len(), 40);
        let (head, tail) = h.head_tail_mean("gen_obj", 5).unwrap();
        assert!(tail < head);
    }

    #[test]
    fn zero_learning_rates_keep_parameters() {
        let ex = two_pattern_examples();
        let mut model = EdgeRegenerator::<f32>::new(&toy_config(), 3).unwrap();
        let trainable = |m: &EdgeRegenerator<f32>| {
            let mut v = Vec::new();
            for s in [&m.generator as &dyn ParamSet<f32>, &m.critic_b, &m.critic_r] {
                s.for_each_param_ref(&mut |p| {
                    if p.trainable {
                        v.push(p.value.clone())
                    }
                });
            }
            v
        };
        let before = trainable(&model);
        let cfg = RegenTrainConfig {
            steps: 3,
            generator_lr: 0.0,
            critic_lr: 0.0,
            ..Default::default()
        };
        train_regen(&mut model, &ex, &cfg).unwrap();
        assert_eq!(trainable(&model), before);
    }

    #[test]
    fn checkpoints_round_trip_and_untrained_is_refused() {
        let ex = two_pattern_examples();
        let mut model = EdgeRegenerator::<f32>::new(&toy_config(), 4).unwrap();
        assert!(matches!(
            regenerate_edges(&mut model, &ex[0].input, 0.05),
            Err(Error::Untrained(_))
        ));
        let cfg = RegenTrainConfig {
            steps: 2,
            ..Default::default()
        };
        train_regen(&mut model, &ex, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let mut loaded = EdgeRegenerator::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded.trained_steps(), 2);
        let a = regenerate_edges(&mut model, &ex[0].input, 0.05).unwrap();
        let b = regenerate_edges(&mut loaded, &ex[0].input, 0.05).unwrap();
        assert_eq!(a.background, b.background);
        assert_eq!(model.critic_b.snapshot(), loaded.critic_b.snapshot());
        assert!(a.background.data().iter().all(|&v| v >= 0.0));
    }
}
