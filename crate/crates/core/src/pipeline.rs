//! Stage orchestration: configuration, seeds, training helpers, inference
//! with ablation switches, evaluation and timing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::classifier::{classify_two_clusters, initial_edge_estimates, split_edges, EdgeLabel, EdgeLayerLabels};
use crate::depth::{build_depth_net, infer_edge_depth, train_depth_net, DepthNet, DepthNetConfig, DepthTrainConfig, EdgeDepthMap};
use crate::edge_ops::{binarize_edges, edge_image, keep_masked};
use crate::error::{Error, Result};
use crate::eval::{psnr_mean_normalized, HistogramReport};
use crate::extractor::{
    extract_background, ground_truth_example, train_extractor, BackgroundExtractor, ExtractTrainConfig,
    ExtractionExample, ExtractorConfig,
};
use crate::history::History;
use crate::image::{EdgeImage, Image, Mask};
use crate::kv::{join, KvDoc};
use crate::nets::{CriticConfig, UNetConfig};
use crate::regen::{
    regenerate_edges, train_regen, EdgeRegenerator, RegenConfig, RegenExample, RegenInput, RegenTrainConfig,
};
use crate::scalar::Scalar;
use crate::synth::{derive_seed, MixtureSample, MultiViewStack, SynthConfig, BORDER};

/// Ablation switches; each variant is trained separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Two-cluster k-means replaces edge regeneration.
    pub no_regen: bool,
    /// Generator trained with the pixel term only.
    pub no_discriminators: bool,
    /// Extractor sees zeros instead of the reflection-masked image.
    pub no_i_mr: bool,
    /// Extractor sees zeros instead of the background-edge pixels.
    pub no_i_mb: bool,
}

impl Ablation {
    pub fn tag(&self) -> String {
        let flags = [
            (self.no_regen, "no-regen"),
            (self.no_discriminators, "no-discriminators"),
            (self.no_i_mr, "no-i-mr"),
            (self.no_i_mb, "no-i-mb"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    /// The single-flag variants in reporting order.
    pub fn table() -> Vec<Self> {
        let none = Self::default();
        vec![
            none,
            Self { no_regen: true, ..none },
            Self { no_discriminators: true, ..none },
            Self { no_i_mr: true, ..none },
            Self { no_i_mb: true, ..none },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub sigma: f64,
    /// Background edges take the smaller-disparity cluster.
    pub bg_is_far: bool,
    /// Trailing samples of the dataset held out for evaluation.
    pub holdout: usize,
    pub ablation: Ablation,
    pub synth: SynthConfig,
    pub depth: DepthNetConfig,
    pub depth_train: DepthTrainConfig,
    pub regen: RegenConfig,
    pub regen_train: RegenTrainConfig,
    pub extractor: ExtractorConfig,
    pub extract_train: ExtractTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
            seed: 0,
            sigma: crate::edge_ops::DEFAULT_SIGMA,
            bg_is_far: true,
            holdout: 10,
            ablation: Ablation::default(),
            synth: SynthConfig::default(),
            depth: DepthNetConfig::default(),
            depth_train: DepthTrainConfig::default(),
            regen: RegenConfig::default(),
            regen_train: RegenTrainConfig::default(),
            extractor: ExtractorConfig::default(),
            extract_train: ExtractTrainConfig::default(),
        }
    }
}

/// Seed roles; every random stream is `derive_seed(global, role)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedRole {
    Synth = 0,
    DepthInit = 101,
    DepthTrain = 102,
    RegenInit = 201,
    RegenTrain = 202,
    ExtractInit = 301,
    ExtractTrain = 302,
}

fn write_unet(doc: &mut KvDoc, p: &str, u: &UNetConfig) {
    doc.set(format!("{p}depth"), u.depth);
    doc.set(format!("{p}base_channels"), u.base_channels);
    doc.set(format!("{p}max_channels"), u.max_channels);
    doc.set(format!("{p}norm"), u.norm);
    doc.set(format!("{p}head"), u.head);
}

fn read_unet(doc: &KvDoc, p: &str, u: &mut UNetConfig) -> Result<()> {
    doc.update(&format!("{p}depth"), &mut u.depth)?;
    doc.update(&format!("{p}base_channels"), &mut u.base_channels)?;
    doc.update(&format!("{p}max_channels"), &mut u.max_channels)?;
    doc.update(&format!("{p}norm"), &mut u.norm)?;
    doc.update(&format!("{p}head"), &mut u.head)
}

fn write_critic(doc: &mut KvDoc, p: &str, c: &CriticConfig) {
    doc.set(format!("{p}depth"), c.depth);
    doc.set(format!("{p}base_channels"), c.base_channels);
    doc.set(format!("{p}max_channels"), c.max_channels);
    doc.set(format!("{p}clip"), c.clip);
}

fn read_critic(doc: &KvDoc, p: &str, c: &mut CriticConfig) -> Result<()> {
    doc.update(&format!("{p}depth"), &mut c.depth)?;
    doc.update(&format!("{p}base_channels"), &mut c.base_channels)?;
    doc.update(&format!("{p}max_channels"), &mut c.max_channels)?;
    doc.update(&format!("{p}clip"), &mut c.clip)
}

impl PipelineConfig {
    pub fn seed_for(&self, role: SeedRole) -> u64 {
        derive_seed(self.seed, role as u64)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("dataset_dir", self.dataset_dir.display());
        d.set("checkpoint_dir", self.checkpoint_dir.display());
        d.set("output_dir", self.output_dir.display());
        d.set("seed", self.seed);
        d.set("sigma", self.sigma);
        d.set("bg_is_far", self.bg_is_far);
        d.set("holdout", self.holdout);
        d.set("ablation.no_regen", self.ablation.no_regen);
        d.set("ablation.no_discriminators", self.ablation.no_discriminators);
        d.set("ablation.no_i_mr", self.ablation.no_i_mr);
        d.set("ablation.no_i_mb", self.ablation.no_i_mb);
        self.synth.write_kv(&mut d, "synth.");

        d.set("depth.input_channels", self.depth.input_channels);
        d.set("depth.channels", join(&self.depth.channels));
        d.set("depth.kernel", self.depth.kernel);
        d.set("depth.norm", self.depth.norm);
        let t = &self.depth_train;
        d.set("depth_train.learning_rate", t.adam.learning_rate);
        d.set("depth_train.beta1", t.adam.beta1);
        d.set("depth_train.beta2", t.adam.beta2);
        d.set("depth_train.eps", t.adam.eps);
        d.set("depth_train.batch_size", t.batch_size);
        d.set("depth_train.epochs", t.epochs);
        d.set("depth_train.max_steps", t.max_steps);
        d.set("depth_train.patch", t.patch);

        write_unet(&mut d, "regen.generator.", &self.regen.generator);
        write_critic(&mut d, "regen.critic.", &self.regen.critic);
        let r = &self.regen_train;
        d.set("regen_train.lambda1", r.lambda1);
        d.set("regen_train.generator_lr", r.generator_lr);
        d.set("regen_train.critic_lr", r.critic_lr);
        d.set("regen_train.batch_size", r.batch_size);
        d.set("regen_train.critic_steps", r.critic_steps);
        d.set("regen_train.steps", r.steps);

        write_unet(&mut d, "extract.unet.", &self.extractor.unet);
        let p = &self.extractor.perceptual;
        d.set("extract.perceptual.layer", p.layer);
        d.set("extract.perceptual.width_divisor", p.width_divisor);
        d.set("extract.perceptual.input_shift", p.input_shift);
        d.set("extract.perceptual.seed", p.seed);
        let e = &self.extract_train;
        d.set("extract_train.lambda2", e.lambda2);
        d.set("extract_train.learning_rate", e.learning_rate);
        d.set("extract_train.batch_size", e.batch_size);
        d.set("extract_train.epochs", e.epochs);
        d.set("extract_train.max_steps", e.max_steps);
        d
    }

    /// Reads a config; absent keys keep their defaults, unknown keys fail.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut c = Self::default();
        let known = c.to_kv();
        for key in doc.keys() {
            if !known.contains(key) && key != "synth.texture.source_dir" {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        if let Some(v) = doc.get_str("dataset_dir") {
            c.dataset_dir = v.into();
        }
        if let Some(v) = doc.get_str("checkpoint_dir") {
            c.checkpoint_dir = v.into();
        }
        if let Some(v) = doc.get_str("output_dir") {
            c.output_dir = v.into();
        }
        doc.update("seed", &mut c.seed)?;
        doc.update("sigma", &mut c.sigma)?;
        doc.update("bg_is_far", &mut c.bg_is_far)?;
        doc.update("holdout", &mut c.holdout)?;
        doc.update("ablation.no_regen", &mut c.ablation.no_regen)?;
        doc.update("ablation.no_discriminators", &mut c.ablation.no_discriminators)?;
        doc.update("ablation.no_i_mr", &mut c.ablation.no_i_mr)?;
        doc.update("ablation.no_i_mb", &mut c.ablation.no_i_mb)?;
        c.synth = SynthConfig::read_kv(doc, "synth.")?;

        doc.update("depth.input_channels", &mut c.depth.input_channels)?;
        if let Some(ch) = doc.get_list("depth.channels")? {
            c.depth.channels = ch;
        }
        doc.update("depth.kernel", &mut c.depth.kernel)?;
        doc.update("depth.norm", &mut c.depth.norm)?;
        let t = &mut c.depth_train;
        doc.update("depth_train.learning_rate", &mut t.adam.learning_rate)?;
        doc.update("depth_train.beta1", &mut t.adam.beta1)?;
        doc.update("depth_train.beta2", &mut t.adam.beta2)?;
        doc.update("depth_train.eps", &mut t.adam.eps)?;
        doc.update("depth_train.batch_size", &mut t.batch_size)?;
        doc.update("depth_train.epochs", &mut t.epochs)?;
        doc.update("depth_train.max_steps", &mut t.max_steps)?;
        doc.update("depth_train.patch", &mut t.patch)?;

        read_unet(doc, "regen.generator.", &mut c.regen.generator)?;
        read_critic(doc, "regen.critic.", &mut c.regen.critic)?;
        let r = &mut c.regen_train;
        doc.update("regen_train.lambda1", &mut r.lambda1)?;
        doc.update("regen_train.generator_lr", &mut r.generator_lr)?;
        doc.update("regen_train.critic_lr", &mut r.critic_lr)?;
        doc.update("regen_train.batch_size", &mut r.batch_size)?;
        doc.update("regen_train.critic_steps", &mut r.critic_steps)?;
        doc.update("regen_train.steps", &mut r.steps)?;

        read_unet(doc, "extract.unet.", &mut c.extractor.unet)?;
        let p = &mut c.extractor.perceptual;
        doc.update("extract.perceptual.layer", &mut p.layer)?;
        doc.update("extract.perceptual.width_divisor", &mut p.width_divisor)?;
        doc.update("extract.perceptual.input_shift", &mut p.input_shift)?;
        doc.update("extract.perceptual.seed", &mut p.seed)?;
        let e = &mut c.extract_train;
        doc.update("extract_train.lambda2", &mut e.lambda2)?;
        doc.update("extract_train.learning_rate", &mut e.learning_rate)?;
        doc.update("extract_train.batch_size", &mut e.batch_size)?;
        doc.update("extract_train.epochs", &mut e.epochs)?;
        doc.update("extract_train.max_steps", &mut e.max_steps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        self.synth.validate()?;
        self.depth.validate()?;
        self.depth_train.validate()?;
        self.regen.validate()?;
        self.regen_train.validate()?;
        self.extractor.validate()?;
        self.extract_train.validate()
    }

    /// FNV-1a hash of the canonical config text.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_kv().to_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Extractor config with this variant's input ablations applied.
    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            zero_masked_reference: self.ablation.no_i_mr,
            zero_background_edges: self.ablation.no_i_mb,
            ..self.extractor.clone()
        }
    }

    pub fn depth_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("depth.json")
    }

    pub fn regen_checkpoint(&self) -> PathBuf {
        let name = if self.ablation.no_discriminators {
            "regen-no-discriminators"
        } else {
            "regen"
        };
        self.checkpoint_dir.join(name)
    }

    pub fn extractor_checkpoint(&self) -> PathBuf {
        let mut name = String::from("extractor");
        if self.ablation.no_i_mr {
            name.push_str("-no-i-mr");
        }
        if self.ablation.no_i_mb {
            name.push_str("-no-i-mb");
        }
        self.checkpoint_dir.join(format!("{name}.json"))
    }

    /// Splits samples into training and held-out parts.
    pub fn split<'a, S>(&self, samples: &'a [S]) -> Result<(&'a [S], &'a [S])> {
        if samples.len() <= self.holdout {
            return Err(Error::Config(format!(
                "{} samples cannot hold out {}",
                samples.len(),
                self.holdout
            )));
        }
        Ok(samples.split_at(samples.len() - self.holdout))
    }
}

pub fn train_depth_stage<T: Scalar>(
    cfg: &PipelineConfig,
    samples: &[MixtureSample<T>],
) -> Result<(DepthNet<T>, History)> {
    let mut model = build_depth_net(&cfg.depth, cfg.seed_for(SeedRole::DepthInit))?;
    let stacks: Vec<MultiViewStack<T>> = samples.iter().map(|s| s.stack.clone()).collect();
    let train = DepthTrainConfig {
        seed: cfg.seed_for(SeedRole::DepthTrain),
        ..cfg.depth_train.clone()
    };
    let history = train_depth_net(&mut model, &stacks, &train)?;
    Ok((model, history))
}

/// Generator input for one reference image from the depth network.
pub fn regen_input<T: Scalar>(
    cfg: &PipelineConfig,
    depth: &EdgeDepthMap<T>,
    edges: &EdgeImage<T>,
) -> Result<(RegenInput<T>, EdgeLayerLabels)> {
    let split = split_edges(edges, depth, cfg.bg_is_far, BORDER)?;
    Ok((RegenInput::new(edges, &split.initial)?, split.labels))
}

pub fn regen_examples<T: Scalar>(
    cfg: &PipelineConfig,
    depth: &mut DepthNet<T>,
    samples: &[MixtureSample<T>],
) -> Result<Vec<RegenExample<T>>> {
    samples
        .iter()
        .map(|s| {
            let d = infer_edge_depth(depth, &s.stack, cfg.sigma)?;
            let (input, _) = regen_input(cfg, &d, &edge_image(s.reference()))?;
            Ok(RegenExample {
                input,
                gt_background: s.gt_background_edges(),
                gt_reflection: s.gt_reflection_edges(),
            })
        })
        .collect()
}

pub fn train_regen_stage<T: Scalar>(
    cfg: &PipelineConfig,
    examples: &[RegenExample<T>],
) -> Result<(EdgeRegenerator<T>, History)> {
    let mut model = EdgeRegenerator::new(&cfg.regen, cfg.seed_for(SeedRole::RegenInit))?;
    let train = RegenTrainConfig {
        use_critics: !cfg.ablation.no_discriminators,
        seed: cfg.seed_for(SeedRole::RegenTrain),
        ..cfg.regen_train.clone()
    };
    let history = train_regen(&mut model, examples, &train)?;
    Ok((model, history))
}

pub fn extract_examples<T: Scalar>(
    cfg: &PipelineConfig,
    samples: &[MixtureSample<T>],
) -> Result<Vec<ExtractionExample<T>>> {
    samples.iter().map(|s| ground_truth_example(s, cfg.sigma)).collect()
}

pub fn train_extract_stage<T: Scalar>(
    cfg: &PipelineConfig,
    examples: &[ExtractionExample<T>],
) -> Result<(BackgroundExtractor<T>, History)> {
    let mut model = BackgroundExtractor::new(&cfg.extractor_config(), cfg.seed_for(SeedRole::ExtractInit))?;
    let train = ExtractTrainConfig {
        seed: cfg.seed_for(SeedRole::ExtractTrain),
        ..cfg.extract_train.clone()
    };
    let history = train_extractor(&mut model, examples, &train)?;
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Depth,
    Classify,
    Regen,
    Extract,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Depth, Stage::Classify, Stage::Regen, Stage::Extract];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Depth => "depth",
            Stage::Classify => "classify",
            Stage::Regen => "regen",
            Stage::Extract => "extract",
        }
    }
}

/// Everything produced for one input stack.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub background: Image<T>,
    pub residual: Image<T>,
    pub residual_display: Image<T>,
    pub depth: EdgeDepthMap<T>,
    pub labels: EdgeLayerLabels,
    pub mixture_edges: Mask,
    pub background_edges: EdgeImage<T>,
    pub background_mask: Mask,
    /// Wall-clock seconds per executed stage, in order.
    pub timings: Vec<(Stage, f64)>,
}

pub struct Pipeline<T> {
    cfg: PipelineConfig,
    depth: DepthNet<T>,
    regen: Option<EdgeRegenerator<T>>,
    extractor: BackgroundExtractor<T>,
    log: Vec<Stage>,
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingCheckpoint { stage, path })
    }
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(
        cfg: PipelineConfig,
        depth: DepthNet<T>,
        regen: Option<EdgeRegenerator<T>>,
        extractor: BackgroundExtractor<T>,
    ) -> Result<Self> {
        if regen.is_none() && !cfg.ablation.no_regen {
            return Err(Error::Untrained("regen"));
        }
        Ok(Self {
            cfg,
            depth,
            regen,
            extractor,
            log: Vec::new(),
        })
    }

    /// Loads the checkpoints this variant needs from `checkpoint_dir`.
    pub fn load(cfg: PipelineConfig) -> Result<Self> {
        let depth = DepthNet::load(&require("depth", cfg.depth_checkpoint())?)?;
        let regen = if cfg.ablation.no_regen {
            None
        } else {
            Some(EdgeRegenerator::load(&require("regen", cfg.regen_checkpoint())?)?)
        };
        let extractor = BackgroundExtractor::load(&require("extract", cfg.extractor_checkpoint())?)?;
        Self::new(cfg, depth, regen, extractor)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Stages executed since construction, in order.
    pub fn log(&self) -> &[Stage] {
        &self.log
    }

    pub fn run(&mut self, stack: &MultiViewStack<T>) -> Result<PipelineOutput<T>> {
        let mut timings = Vec::with_capacity(4);
        let sigma = self.cfg.sigma;
        let reference = stack.reference();

        let t = Instant::now();
        let depth = infer_edge_depth(&mut self.depth, stack, sigma)?;
        self.log.push(Stage::Depth);
        timings.push((Stage::Depth, t.elapsed().as_secs_f64()));

        let t = Instant::now();
        let edges = edge_image(reference);
        let mixture_edges = depth.valid_mask.clone();
        let (labels, input) = if self.cfg.ablation.no_regen {
            (classify_two_clusters_or_shared(&depth, self.cfg.bg_is_far)?, None)
        } else {
            let (input, labels) = regen_input(&self.cfg, &depth, &edges)?;
            (labels, Some(input))
        };
        self.log.push(Stage::Classify);
        timings.push((Stage::Classify, t.elapsed().as_secs_f64()));

        let (background_edges, background_mask) = match (input, self.regen.as_mut()) {
            (Some(input), Some(regen)) => {
                let t = Instant::now();
                let r = regenerate_edges(regen, &input, sigma)?;
                self.log.push(Stage::Regen);
                timings.push((Stage::Regen, t.elapsed().as_secs_f64()));
                (r.background, r.background_mask)
            }
            _ => {
                let init = initial_edge_estimates(&edges, &labels)?;
                (init.e_b0, init.m_b0)
            }
        };

        let t = Instant::now();
        let out = extract_background(&mut self.extractor, reference, &background_mask, &mixture_edges)?;
        self.log.push(Stage::Extract);
        timings.push((Stage::Extract, t.elapsed().as_secs_f64()));

        Ok(PipelineOutput {
            background: out.background,
            residual: out.residual,
            residual_display: out.residual_display,
            depth,
            labels,
            mixture_edges,
            background_edges,
            background_mask,
            timings,
        })
    }
}

fn classify_two_clusters_or_shared<T: Scalar>(depth: &EdgeDepthMap<T>, bg_is_far: bool) -> Result<EdgeLayerLabels> {
    match classify_two_clusters(depth, bg_is_far, BORDER) {
        Err(Error::DegenerateDepths { .. }) => {
            let (h, w) = depth.valid_mask.dims();
            Ok(EdgeLayerLabels::from_fn(h, w, |y, x| {
                if depth.valid_mask.get(y, x) {
                    EdgeLabel::Shared
                } else {
                    EdgeLabel::None
                }
            }))
        }
        other => other,
    }
}

impl<T: Scalar> PipelineOutput<T> {
    /// Writes images and intermediates into `dir`.
    pub fn save(&self, dir: &Path, intermediates: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.background.save_png(&dir.join("background.png"))?;
        self.residual_display.save_png(&dir.join("residual.png"))?;
        write_pfm(&self.residual, &dir.join("residual_raw.pfm"))?;
        if intermediates {
            let d = &self.depth;
            let vals = d.edge_values(0);
            let hi = vals.iter().fold(T::zero(), |m, &v| m.max(v)).max(T::lit(1e-6));
            let depth_img = d.values.map(|v| (v / hi).max(T::zero()).min(T::one()));
            keep_masked(&depth_img, &d.valid_mask)?.save_png(&dir.join("depth.png"))?;
            self.labels.save_png(&dir.join("labels.png"))?;
            self.background_edges.clamp01().save_png(&dir.join("background_edges.png"))?;
            self.background_mask.save_png(&dir.join("background_mask.png"))?;
        }
        Ok(())
    }
}

/// Portable float map (little-endian, bottom-to-top rows).
pub fn write_pfm<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let color = image.channels() == 3;
    let mut bytes = format!("{}\n{w} {h}\n-1.0\n", if color { "PF" } else { "Pf" }).into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..if color { 3 } else { 1 } {
                bytes.extend_from_slice(&(image.get(c, y, x).to_f64_lossy() as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub name: String,
    pub input_psnr: f64,
    pub output_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub variant: String,
    pub fingerprint: String,
    pub samples: Vec<SampleScore>,
    pub mean_input_psnr: f64,
    pub mean_output_psnr: f64,
    /// Mean seconds per stage over the evaluated samples.
    pub stage_seconds: Vec<(Stage, f64)>,
    pub histogram: Option<HistogramReport>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores `samples` (named by index offset `first_index`).
pub fn evaluate<T: Scalar>(
    pipeline: &mut Pipeline<T>,
    samples: &[MixtureSample<T>],
    first_index: usize,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); Stage::ALL.len()];
    for (i, s) in samples.iter().enumerate() {
        let out = pipeline.run(&s.stack)?;
        for (stage, secs) in &out.timings {
            per_stage[*stage as usize].push(*secs);
        }
        scores.push(SampleScore {
            name: crate::synth::sample_dir_name(first_index + i),
            input_psnr: psnr_mean_normalized(s.reference(), &s.gt_background)?,
            output_psnr: psnr_mean_normalized(&out.background, &s.gt_background)?,
        });
    }
    let stage_seconds = Stage::ALL
        .iter()
        .zip(&per_stage)
        .filter(|(_, v)| !v.is_empty())
        .map(|(s, v)| (*s, mean(v.iter().copied())))
        .collect();
    Ok(EvalReport {
        variant: pipeline.cfg.ablation.tag(),
        fingerprint: pipeline.cfg.fingerprint(),
        mean_input_psnr: mean(scores.iter().map(|s| s.input_psnr)),
        mean_output_psnr: mean(scores.iter().map(|s| s.output_psnr)),
        samples: scores,
        stage_seconds,
        histogram: None,
    })
}

impl EvalReport {
    /// `sample,input_psnr_db,output_psnr_db` plus a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,input_psnr_db,output_psnr_db\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{:.4},{:.4}", r.name, r.input_psnr, r.output_psnr);
        }
        let _ = writeln!(s, "mean,{:.4},{:.4}", self.mean_input_psnr, self.mean_output_psnr);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant      {}", self.variant);
        let _ = writeln!(s, "config       {}", self.fingerprint);
        let _ = writeln!(s, "samples      {}", self.samples.len());
        let _ = writeln!(s, "input PSNR   {:.3} dB", self.mean_input_psnr);
        let _ = writeln!(s, "output PSNR  {:.3} dB", self.mean_output_psnr);
        let _ = writeln!(s, "gain         {:+.3} dB", self.mean_output_psnr - self.mean_input_psnr);
        for (stage, secs) in &self.stage_seconds {
            let _ = writeln!(s, "{:<12} {:.4} s/sample", stage.name(), secs);
        }
        if let Some(h) = &self.histogram {
            s.push_str("edge intensities\n");
            s.push_str(&h.summary());
        }
        s
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))
    }
}

#[derive(Clone, Debug)]
pub struct TimingReport {
    /// Mean seconds per stage.
    pub stages: Vec<(Stage, f64)>,
    pub mean_total: f64,
    /// Coefficient of variation of the per-run totals.
    pub total_cv: f64,
    pub runs: usize,
    pub image_size: (usize, usize),
    pub hardware: String,
}

/// Times `repeats` passes over `stacks`.
pub fn timing_report<T: Scalar>(
    pipeline: &mut Pipeline<T>,
    stacks: &[MultiViewStack<T>],
    repeats: usize,
) -> Result<TimingReport> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Config("timing needs at least one input".into()))?;
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); Stage::ALL.len()];
    let mut totals = Vec::new();
    for _ in 0..repeats.max(1) {
        for stack in stacks {
            let out = pipeline.run(stack)?;
            let mut total = 0.0;
            for (stage, secs) in &out.timings {
                per_stage[*stage as usize].push(*secs);
                total += secs;
            }
            totals.push(total);
        }
    }
    let m = mean(totals.iter().copied());
    let var = mean(totals.iter().map(|t| (t - m).powi(2)));
    Ok(TimingReport {
        stages: Stage::ALL
            .iter()
            .zip(&per_stage)
            .filter(|(_, v)| !v.is_empty())
            .map(|(s, v)| (*s, mean(v.iter().copied())))
            .collect(),
        mean_total: m,
        total_cv: if m > 0.0 { var.sqrt() / m } else { 0.0 },
        runs: totals.len(),
        image_size: first.dims(),
        hardware: hardware_description(),
    })
}

/// CPU model and logical core count, best effort.
pub fn hardware_description() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model}, {cores} logical cores")
}

impl TimingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_seconds\n");
        for (stage, secs) in &self.stages {
            let _ = writeln!(s, "{},{:.6}", stage.name(), secs);
        }
        let _ = writeln!(s, "total,{:.6}", self.mean_total);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.image_size;
        let _ = writeln!(s, "hardware  {}", self.hardware);
        let _ = writeln!(s, "input     {w}x{h}, {} runs", self.runs);
        for (stage, secs) in &self.stages {
            let _ = writeln!(s, "{:<9} {:.4} s", stage.name(), secs);
        }
        let _ = writeln!(s, "total     {:.4} s (cv {:.3})", self.mean_total, self.total_cv);
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("timing.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("timing.txt");
        std::fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))
    }
}

/// Regeneration quality on held-out data: background-edge recall and the
/// W1 distance of support values to ground truth, before and after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegenQuality {
    pub initial_recall: f64,
    pub regenerated_recall: f64,
    pub initial_wasserstein: f64,
    pub regenerated_wasserstein: f64,
}

pub fn regen_quality<T: Scalar>(
    cfg: &PipelineConfig,
    regen: &mut EdgeRegenerator<T>,
    examples: &[RegenExample<T>],
) -> Result<RegenQuality> {
    use crate::eval::{mask_values, wasserstein_1d};
    let (mut init_hit, mut regen_hit, mut gt_total) = (0usize, 0usize, 0usize);
    let (mut gt_vals, mut init_vals, mut regen_vals) = (Vec::new(), Vec::new(), Vec::new());
    for ex in examples {
        let gt_mask = binarize_edges(&ex.gt_background, cfg.sigma)?;
        let init_mask = binarize_edges(&ex.input.initial_background, cfg.sigma)?;
        let out = regenerate_edges(regen, &ex.input, cfg.sigma)?;
        gt_total += gt_mask.count();
        init_hit += init_mask.and(&gt_mask)?.count();
        regen_hit += out.background_mask.and(&gt_mask)?.count();
        gt_vals.extend(mask_values(&ex.gt_background, &gt_mask));
        init_vals.extend(mask_values(&ex.input.initial_background, &init_mask));
        regen_vals.extend(mask_values(&out.background, &out.background_mask));
    }
    let frac = |hit: usize| if gt_total == 0 { 1.0 } else { hit as f64 / gt_total as f64 };
    let w = |v: &[f64]| if v.is_empty() { Ok(f64::INFINITY) } else { wasserstein_1d(v, &gt_vals) };
    Ok(RegenQuality {
        initial_recall: frac(init_hit),
        regenerated_recall: frac(regen_hit),
        initial_wasserstein: w(&init_vals)?,
        regenerated_wasserstein: w(&regen_vals)?,
    })
}
