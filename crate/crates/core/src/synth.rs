//! Synthetic multi-view reflection mixtures with ground truth.
//!
//! Each scene is two fronto-parallel textured planes (background and
//! reflection) with their own disparity fields, added with fixed weights.
//! Views are rendered by displacing each layer by `baseline · disparity`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edge_ops::edge_image;
use crate::error::{Error, Result};
use crate::image::{EdgeImage, Image};
use crate::kv::{join, KvDoc};
use crate::scalar::Scalar;
use crate::warp::{warp, Axis};

pub const NUM_VIEWS: usize = 5;
pub const REFERENCE_INDEX: usize = 2;
pub const DEFAULT_BASELINES: [f64; NUM_VIEWS] = [-2.0, -1.0, 0.0, 1.0, 2.0];
/// Pixels excluded from every loss and metric along each image border.
pub const BORDER: usize = 4;

/// Layer weights of the additive mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixWeights {
    pub background: f64,
    pub reflection: f64,
}

impl Default for MixWeights {
    fn default() -> Self {
        Self {
            background: 0.6,
            reflection: 0.4,
        }
    }
}

/// Planar disparity field `d(y, x) = base + grad_x·x + grad_y·y` (pixels per
/// unit baseline).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DisparityPlane {
    pub base: f64,
    pub grad_x: f64,
    pub grad_y: f64,
}

impl DisparityPlane {
    pub fn constant(d: f64) -> Self {
        Self {
            base: d,
            ..Self::default()
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.base + self.grad_x * x as f64 + self.grad_y * y as f64
    }

    pub fn render<T: Scalar>(&self, h: usize, w: usize) -> Image<T> {
        Image::from_fn(1, h, w, |_, y, x| T::lit(self.at(y, x)))
    }

    /// `(min, max)` over an `h×w` grid.
    pub fn range(&self, h: usize, w: usize) -> (f64, f64) {
        let corners = [
            self.at(0, 0),
            self.at(0, w.saturating_sub(1)),
            self.at(h.saturating_sub(1), 0),
            self.at(h.saturating_sub(1), w.saturating_sub(1)),
        ];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Intersection of two closed intervals, `None` when they are disjoint.
pub fn shared_range(a: (f64, f64), b: (f64, f64)) -> Option<(f64, f64)> {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo <= hi).then_some((lo, hi))
}

/// The two unmixed layers of a scene.
#[derive(Clone, Debug)]
pub struct LayerScene<T> {
    pub background: Image<T>,
    pub reflection: Image<T>,
    pub bg_disparity: Image<T>,
    pub refl_disparity: Image<T>,
    pub weights: MixWeights,
}

impl<T: Scalar> LayerScene<T> {
    pub fn new(
        background: Image<T>,
        reflection: Image<T>,
        bg_disparity: Image<T>,
        refl_disparity: Image<T>,
        weights: MixWeights,
    ) -> Result<Self> {
        background.check_same(&reflection)?;
        let (h, w) = background.dims();
        for d in [&bg_disparity, &refl_disparity] {
            if d.channels() != 1 || d.dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "disparity {}x{}x{} for {h}x{w} layers",
                    d.channels(),
                    d.height(),
                    d.width()
                )));
            }
            if !d.data().iter().all(|v| v.is_finite()) {
                return Err(Error::Config("disparity must be finite".into()));
            }
        }
        let in_unit = |img: &Image<T>| {
            img.data()
                .iter()
                .all(|&v| v >= T::zero() && v <= T::one())
        };
        if !in_unit(&background) || !in_unit(&reflection) {
            return Err(Error::Config("layer values must lie in [0, 1]".into()));
        }
        if !(weights.background > 0.0 && weights.background <= 1.0)
            || !(weights.reflection >= 0.0 && weights.reflection <= 1.0)
        {
            return Err(Error::Config(format!("invalid mix weights {weights:?}")));
        }
        Ok(Self {
            background,
            reflection,
            bg_disparity,
            refl_disparity,
            weights,
        })
    }

    pub fn bg_range(&self) -> (f64, f64) {
        value_range(&self.bg_disparity)
    }

    pub fn refl_range(&self) -> (f64, f64) {
        value_range(&self.refl_disparity)
    }
}

fn value_range<T: Scalar>(img: &Image<T>) -> (f64, f64) {
    img.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let v = v.to_f64_lossy();
        (lo.min(v), hi.max(v))
    })
}

/// Five co-registered views and their baselines relative to the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewStack<T> {
    views: Vec<Image<T>>,
    baselines: Vec<f64>,
    axis: Axis,
}

impl<T: Scalar> MultiViewStack<T> {
    pub fn new(views: Vec<Image<T>>, baselines: Vec<f64>, axis: Axis) -> Result<Self> {
        if views.len() != NUM_VIEWS || baselines.len() != NUM_VIEWS {
            return Err(Error::Shape(format!(
                "expected {NUM_VIEWS} views and baselines, got {} and {}",
                views.len(),
                baselines.len()
            )));
        }
        for v in &views[1..] {
            views[0].check_same(v)?;
        }
        if baselines[REFERENCE_INDEX] != 0.0 {
            return Err(Error::Config(format!(
                "reference baseline must be 0, got {}",
                baselines[REFERENCE_INDEX]
            )));
        }
        Ok(Self {
            views,
            baselines,
            axis,
        })
    }

    pub fn views(&self) -> &[Image<T>] {
        &self.views
    }

    pub fn baselines(&self) -> &[f64] {
        &self.baselines
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn reference_index(&self) -> usize {
        REFERENCE_INDEX
    }

    pub fn reference(&self) -> &Image<T> {
        &self.views[REFERENCE_INDEX]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.views[0].dims()
    }

    fn map_views(&self, f: impl Fn(&Image<T>) -> Image<T>) -> Vec<Image<T>> {
        self.views.iter().map(f).collect()
    }
}

/// Output of [`mix_images`].
#[derive(Clone, Debug)]
pub struct Mixed<T> {
    pub image: Image<T>,
    /// Fraction of values that fell outside `[0, 1]` before clipping.
    pub clipped_fraction: f64,
}

/// `w_b·bg + w_r·refl` without clipping.
pub fn mix_linear<T: Scalar>(bg: &Image<T>, refl: &Image<T>, w_b: f64, w_r: f64) -> Result<Image<T>> {
    let (wb, wr) = (T::lit(w_b), T::lit(w_r));
    bg.zip_map(refl, |b, r| wb * b + wr * r)
}

/// Additive mixture clipped to `[0, 1]`.
pub fn mix_images<T: Scalar>(bg: &Image<T>, refl: &Image<T>, w_b: f64, w_r: f64) -> Result<Mixed<T>> {
    if !(w_b >= 0.0 && w_r >= 0.0) {
        return Err(Error::Config(format!("mix weights must be nonnegative: {w_b}, {w_r}")));
    }
    let raw = mix_linear(bg, refl, w_b, w_r)?;
    Ok(clip_mixture(raw))
}

fn clip_mixture<T: Scalar>(raw: Image<T>) -> Mixed<T> {
    let total = raw.data().len().max(1);
    let clipped = raw
        .data()
        .iter()
        .filter(|&&v| v < T::zero() || v > T::one())
        .count();
    Mixed {
        image: raw.clamp01(),
        clipped_fraction: clipped as f64 / total as f64,
    }
}

/// Renders the 5 mixture views. Returns the stack and the worst clipping
/// fraction over the views.
pub fn render_views<T: Scalar>(
    scene: &LayerScene<T>,
    baselines: &[f64],
    axis: Axis,
) -> Result<(MultiViewStack<T>, f64)> {
    if baselines.len() != NUM_VIEWS {
        return Err(Error::Shape(format!(
            "expected {NUM_VIEWS} baselines, got {}",
            baselines.len()
        )));
    }
    let (h, w) = scene.background.dims();
    let extent = match axis {
        Axis::Horizontal => w,
        Axis::Vertical => h,
    } as f64;
    let max_d = [scene.bg_range(), scene.refl_range()]
        .iter()
        .map(|(lo, hi)| lo.abs().max(hi.abs()))
        .fold(0.0, f64::max);
    let max_b = baselines.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    if max_b * max_d > extent {
        return Err(Error::Config(format!(
            "displacement {} exceeds image extent {extent}",
            max_b * max_d
        )));
    }
    let mut views = Vec::with_capacity(NUM_VIEWS);
    let mut worst = 0.0f64;
    for &b in baselines {
        let bg = warp(&scene.background, scene.bg_disparity.data(), T::lit(b), axis)?;
        let refl = warp(&scene.reflection, scene.refl_disparity.data(), T::lit(b), axis)?;
        let mixed = mix_images(&bg, &refl, scene.weights.background, scene.weights.reflection)?;
        worst = worst.max(mixed.clipped_fraction);
        views.push(mixed.image);
    }
    Ok((MultiViewStack::new(views, baselines.to_vec(), axis)?, worst))
}

/// Generation parameters of one sample, as recorded in its manifest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub weights: MixWeights,
    pub bg_plane: DisparityPlane,
    pub refl_plane: DisparityPlane,
    pub clipped_fraction: f64,
}

/// A synthesized mixture with its ground truth.
#[derive(Clone, Debug)]
pub struct MixtureSample<T> {
    pub stack: MultiViewStack<T>,
    pub gt_background: Image<T>,
    pub gt_reflection: Image<T>,
    pub gt_bg_disparity: Image<T>,
    pub gt_refl_disparity: Image<T>,
    /// Parameters in the frame of the originally generated sample; augmented
    /// crops keep their parent's values.
    pub meta: SampleMeta,
}

impl<T: Scalar> MixtureSample<T> {
    pub fn from_scene(
        scene: &LayerScene<T>,
        baselines: &[f64],
        axis: Axis,
        meta: SampleMeta,
    ) -> Result<Self> {
        let (stack, clipped) = render_views(scene, baselines, axis)?;
        Ok(Self {
            stack,
            gt_background: scene.background.clone(),
            gt_reflection: scene.reflection.clone(),
            gt_bg_disparity: scene.bg_disparity.clone(),
            gt_refl_disparity: scene.refl_disparity.clone(),
            meta: SampleMeta {
                clipped_fraction: clipped,
                ..meta
            },
        })
    }

    pub fn reference(&self) -> &Image<T> {
        self.stack.reference()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.stack.dims()
    }

    /// Background contribution to the mixture, `w_b · I_B`.
    pub fn weighted_background(&self) -> Image<T> {
        let w = T::lit(self.meta.weights.background);
        self.gt_background.map(|v| v * w)
    }

    pub fn weighted_reflection(&self) -> Image<T> {
        let w = T::lit(self.meta.weights.reflection);
        self.gt_reflection.map(|v| v * w)
    }

    /// Ground-truth background edges, taken on the weighted layer so their
    /// magnitudes match the mixture edges.
    pub fn gt_background_edges(&self) -> EdgeImage<T> {
        edge_image(&self.weighted_background())
    }

    pub fn gt_reflection_edges(&self) -> EdgeImage<T> {
        edge_image(&self.weighted_reflection())
    }

    /// Applies an optional horizontal mirror then `quarter_turns` CCW
    /// rotations to every image, keeping the baselines consistent.
    pub fn transformed(&self, flip: bool, quarter_turns: usize) -> Self {
        let tf = |img: &Image<T>| {
            let img = if flip { img.flip_horizontal() } else { img.clone() };
            img.rotate90(quarter_turns)
        };
        let mut baselines = self.stack.baselines.clone();
        let mut axis = self.stack.axis;
        if flip && axis == Axis::Horizontal {
            baselines.iter_mut().for_each(|b| *b = -*b);
        }
        for _ in 0..quarter_turns % 4 {
            // CCW turn: +x becomes -y, +y becomes +x
            if axis == Axis::Horizontal {
                baselines.iter_mut().for_each(|b| *b = -*b);
                axis = Axis::Vertical;
            } else {
                axis = Axis::Horizontal;
            }
        }
        Self {
            stack: MultiViewStack {
                views: self.stack.map_views(tf),
                baselines,
                axis,
            },
            gt_background: tf(&self.gt_background),
            gt_reflection: tf(&self.gt_reflection),
            gt_bg_disparity: tf(&self.gt_bg_disparity),
            gt_refl_disparity: tf(&self.gt_refl_disparity),
            meta: self.meta,
        }
    }

    pub fn cropped(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let crop = |img: &Image<T>| img.crop(y0, x0, h, w);
        Ok(Self {
            stack: MultiViewStack {
                views: self
                    .stack
                    .views
                    .iter()
                    .map(crop)
                    .collect::<Result<Vec<_>>>()?,
                baselines: self.stack.baselines.clone(),
                axis: self.stack.axis,
            },
            gt_background: crop(&self.gt_background)?,
            gt_reflection: crop(&self.gt_reflection)?,
            gt_bg_disparity: crop(&self.gt_bg_disparity)?,
            gt_refl_disparity: crop(&self.gt_refl_disparity)?,
            meta: self.meta,
        })
    }
}

/// Which dihedral transforms [`augment`] emits per crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientations {
    Identity,
    /// Four rotations, each with and without a mirror.
    Dihedral,
}

impl Orientations {
    pub fn transforms(self) -> Vec<(bool, usize)> {
        match self {
            Orientations::Identity => vec![(false, 0)],
            Orientations::Dihedral => (0..2)
                .flat_map(|f| (0..4).map(move |r| (f == 1, r)))
                .collect(),
        }
    }

    pub fn count(self) -> usize {
        self.transforms().len()
    }
}

/// Crop positions per axis for a sliding window.
pub fn crop_positions(size: usize, crop: usize, stride: usize) -> Vec<usize> {
    if crop > size || stride == 0 {
        return Vec::new();
    }
    (0..=(size - crop) / stride).map(|i| i * stride).collect()
}

/// Every aligned `crop×crop` window at the given stride, under each requested
/// orientation.
pub fn augment<T: Scalar>(
    sample: &MixtureSample<T>,
    crop: usize,
    stride: usize,
    orientations: Orientations,
) -> Result<Vec<MixtureSample<T>>> {
    let (h, w) = sample.dims();
    if crop == 0 || crop > h || crop > w {
        return Err(Error::Config(format!("crop {crop} does not fit {h}x{w}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    for y0 in crop_positions(h, crop, stride) {
        for x0 in crop_positions(w, crop, stride) {
            let patch = sample.cropped(y0, x0, crop, crop)?;
            for (flip, turns) in orientations.transforms() {
                out.push(patch.transformed(flip, turns));
            }
        }
    }
    Ok(out)
}

/// Procedural texture parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureConfig {
    /// Hard-edged discs and rectangles.
    pub shapes: usize,
    /// Smooth Gaussian intensity bumps.
    pub blobs: usize,
    /// Width in pixels of the anti-aliased shape boundary.
    pub softness: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            shapes: 6,
            blobs: 3,
            softness: 1.5,
        }
    }
}

/// Gradient background plus random blobs and shapes, values in `[0, 1]`.
pub fn procedural_texture<T: Scalar>(
    h: usize,
    w: usize,
    cfg: &TextureConfig,
    rng: &mut impl Rng,
) -> Image<T> {
    let mut img = vec![0.0f64; 3 * h * w];
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| [0; 3].map(|_| rng.random_range(0.15..0.85)))
        .collect();
    let (hf, wf) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (v, u) = (y as f64 / hf, x as f64 / wf);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bot = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                img[(c * h + y) * w + x] = top * (1.0 - v) + bot * v;
            }
        }
    }
    let scale = h.min(w) as f64;
    for _ in 0..cfg.blobs {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let s = rng.random_range(scale / 8.0..scale / 4.0);
        let amp = [0; 3].map(|_| rng.random_range(-0.25..0.25));
        for y in 0..h {
            for x in 0..w {
                let r2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s);
                let g = (-r2).exp();
                for c in 0..3 {
                    img[(c * h + y) * w + x] += amp[c] * g;
                }
            }
        }
    }
    let soft = cfg.softness.max(1e-3);
    for _ in 0..cfg.shapes {
        let color = [0; 3].map(|_| rng.random_range(0.0..1.0));
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let disc = rng.random_bool(0.5);
        let (ry, rx) = (
            rng.random_range(scale / 10.0..scale / 3.5),
            rng.random_range(scale / 10.0..scale / 3.5),
        );
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // signed distance, negative inside
                let sd = if disc {
                    (dy * dy + dx * dx).sqrt() - ry
                } else {
                    (dy.abs() - ry).max(dx.abs() - rx)
                };
                let cover = (0.5 - sd / soft).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        let p = &mut img[(c * h + y) * w + x];
                        *p = *p * (1.0 - cover) + color[c] * cover;
                    }
                }
            }
        }
    }
    Image::from_vec(3, h, w, img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect())
        .expect("texture size")
}

/// Where layer textures come from.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum TextureSource {
    #[default]
    Procedural,
    /// Directory of PNG photographs; random crops are taken.
    Directory(PathBuf),
}

/// Dataset generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bg_disparity: (f64, f64),
    pub refl_disparity: (f64, f64),
    /// Largest disparity change per pixel within a layer plane.
    pub max_slope: f64,
    pub weights: MixWeights,
    pub baselines: Vec<f64>,
    pub axis: Axis,
    /// Samples clipping more than this fraction of values are redrawn.
    pub max_clip_fraction: f64,
    pub texture: TextureConfig,
    /// Gaussian defocus (std. dev. in pixels) applied to reflection textures.
    pub reflection_blur: f64,
    /// Scales reflection texture deviations from its per-channel mean.
    pub reflection_contrast: f64,
    pub source: TextureSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            height: 64,
            width: 64,
            bg_disparity: (1.0, 2.5),
            refl_disparity: (2.0, 5.0),
            max_slope: 0.0,
            weights: MixWeights::default(),
            baselines: DEFAULT_BASELINES.to_vec(),
            axis: Axis::Horizontal,
            max_clip_fraction: 0.05,
            texture: TextureConfig::default(),
            reflection_blur: 0.0,
            reflection_contrast: 1.0,
            source: TextureSource::Procedural,
        }
    }
}

impl SynthConfig {
    pub fn shared_range(&self) -> Option<(f64, f64)> {
        shared_range(self.bg_disparity, self.refl_disparity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        for (name, (lo, hi)) in [("bg", self.bg_disparity), ("refl", self.refl_disparity)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} disparity range [{lo}, {hi}] is invalid"));
            }
        }
        if self.baselines.len() != NUM_VIEWS || self.baselines[REFERENCE_INDEX] != 0.0 {
            return bad(format!(
                "need {NUM_VIEWS} baselines with 0 at index {REFERENCE_INDEX}"
            ));
        }
        if !(self.max_slope >= 0.0) {
            return bad("max_slope must be >= 0".into());
        }
        if !(self.reflection_blur >= 0.0 && self.reflection_blur.is_finite()) {
            return bad("reflection_blur must be >= 0".into());
        }
        if !(self.reflection_contrast >= 0.0 && self.reflection_contrast <= 1.0) {
            return bad("reflection_contrast must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Writes every field under `prefix`.
    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        doc.set(k("count"), self.count);
        doc.set(k("height"), self.height);
        doc.set(k("width"), self.width);
        doc.set(k("bg_disparity"), join(&[self.bg_disparity.0, self.bg_disparity.1]));
        doc.set(k("refl_disparity"), join(&[self.refl_disparity.0, self.refl_disparity.1]));
        doc.set(k("max_slope"), self.max_slope);
        doc.set(k("weights"), join(&[self.weights.background, self.weights.reflection]));
        doc.set(k("baselines"), join(&self.baselines));
        doc.set(k("axis"), self.axis);
        doc.set(k("max_clip_fraction"), self.max_clip_fraction);
        doc.set(k("texture.shapes"), self.texture.shapes);
        doc.set(k("texture.blobs"), self.texture.blobs);
        doc.set(k("texture.softness"), self.texture.softness);
        doc.set(k("reflection_blur"), self.reflection_blur);
        doc.set(k("reflection_contrast"), self.reflection_contrast);
        if let TextureSource::Directory(dir) = &self.source {
            doc.set(k("texture.source_dir"), dir.display());
        }
    }

    /// Reads any fields present under `prefix`, keeping defaults otherwise.
    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let mut cfg = Self::default();
        doc.update(&k("count"), &mut cfg.count)?;
        doc.update(&k("height"), &mut cfg.height)?;
        doc.update(&k("width"), &mut cfg.width)?;
        if let Some(r) = pair(doc, &k("bg_disparity"))? {
            cfg.bg_disparity = r;
        }
        if let Some(r) = pair(doc, &k("refl_disparity"))? {
            cfg.refl_disparity = r;
        }
        doc.update(&k("max_slope"), &mut cfg.max_slope)?;
        if let Some((b, r)) = pair(doc, &k("weights"))? {
            cfg.weights = MixWeights {
                background: b,
                reflection: r,
            };
        }
        if let Some(b) = doc.get_list(&k("baselines"))? {
            cfg.baselines = b;
        }
        doc.update(&k("axis"), &mut cfg.axis)?;
        doc.update(&k("max_clip_fraction"), &mut cfg.max_clip_fraction)?;
        doc.update(&k("texture.shapes"), &mut cfg.texture.shapes)?;
        doc.update(&k("texture.blobs"), &mut cfg.texture.blobs)?;
        doc.update(&k("texture.softness"), &mut cfg.texture.softness)?;
        doc.update(&k("reflection_blur"), &mut cfg.reflection_blur)?;
        doc.update(&k("reflection_contrast"), &mut cfg.reflection_contrast)?;
        if let Some(dir) = doc.get_str(&k("texture.source_dir")) {
            cfg.source = TextureSource::Directory(PathBuf::from(dir));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pair(doc: &KvDoc, key: &str) -> Result<Option<(f64, f64)>> {
    match doc.get_list::<f64>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
        Some(v) => Err(Error::Config(format!("`{key}` needs 2 values, got {}", v.len()))),
    }
}

/// Independent per-sample seed, so parallel and serial generation agree.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_plane(range: (f64, f64), max_slope: f64, h: usize, w: usize, rng: &mut impl Rng) -> DisparityPlane {
    let (lo, hi) = range;
    let span = hi - lo;
    let (mut gx, mut gy) = if max_slope > 0.0 {
        (
            rng.random_range(-max_slope..=max_slope),
            rng.random_range(-max_slope..=max_slope),
        )
    } else {
        (0.0, 0.0)
    };
    let extent = gx.abs() * (w.max(1) - 1) as f64 + gy.abs() * (h.max(1) - 1) as f64;
    if extent > span && extent > 0.0 {
        let shrink = span / extent;
        gx *= shrink;
        gy *= shrink;
    }
    let plane = DisparityPlane {
        base: 0.0,
        grad_x: gx,
        grad_y: gy,
    };
    let (pmin, pmax) = plane.range(h, w);
    let room = (span - (pmax - pmin)).max(0.0);
    let offset = if room > 0.0 { rng.random_range(0.0..=room) } else { 0.0 };
    DisparityPlane {
        base: lo + offset - pmin,
        ..plane
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    Ok(files)
}

fn photo_texture<T: Scalar>(files: &[PathBuf], h: usize, w: usize, rng: &mut impl Rng) -> Result<Image<T>> {
    let path = &files[rng.random_range(0..files.len())];
    let mut img: Image<T> = Image::load_png(path)?;
    if img.height() < h || img.width() < w {
        let scale = (h as f64 / img.height() as f64).max(w as f64 / img.width() as f64);
        let (nh, nw) = (
            ((img.height() as f64 * scale).ceil() as usize).max(h),
            ((img.width() as f64 * scale).ceil() as usize).max(w),
        );
        img = resize_bilinear(&img, nh, nw);
    }
    let y0 = rng.random_range(0..=img.height() - h);
    let x0 = rng.random_range(0..=img.width() - w);
    img.crop(y0, x0, h, w)
}

fn resize_bilinear<T: Scalar>(img: &Image<T>, h: usize, w: usize) -> Image<T> {
    let sy = img.height() as f64 / h as f64;
    let sx = img.width() as f64 / w as f64;
    Image::from_fn(img.channels(), h, w, |c, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height() - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width() - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
        let (ty, tx) = (T::lit(fy - y0 as f64), T::lit(fx - x0 as f64));
        let top = img.get(c, y0, x0) + tx * (img.get(c, y0, x1) - img.get(c, y0, x0));
        let bot = img.get(c, y1, x0) + tx * (img.get(c, y1, x1) - img.get(c, y1, x0));
        top + ty * (bot - top)
    })
}

/// Separable Gaussian blur with clamp-to-edge borders; `sigma = 0` is a no-op.
pub fn gaussian_blur<T: Scalar>(img: &Image<T>, sigma: f64) -> Image<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = img.dims();
    let tap = |n: usize, i: usize, o: isize| (i as isize + o).clamp(0, n as isize - 1) as usize;
    let rows = Image::from_fn(img.channels(), h, w, |c, y, x| {
        let v: f64 = (-r..=r)
            .map(|o| k[(o + r) as usize] * img.get(c, y, tap(w, x, o)).to_f64_lossy())
            .sum();
        T::lit(v)
    });
    Image::from_fn(img.channels(), h, w, |c, y, x| {
        let v: f64 = (-r..=r)
            .map(|o| k[(o + r) as usize] * rows.get(c, tap(h, y, o), x).to_f64_lossy())
            .sum();
        T::lit(v)
    })
}

/// Pulls every channel toward its mean by `factor` (1 keeps the image).
pub fn reduce_contrast<T: Scalar>(img: &Image<T>, factor: f64) -> Image<T> {
    if factor == 1.0 {
        return img.clone();
    }
    let means: Vec<T> = (0..img.channels())
        .map(|c| {
            let p = img.plane(c);
            p.iter().copied().sum::<T>() / T::lit(p.len() as f64)
        })
        .collect();
    let f = T::lit(factor);
    let (h, w) = img.dims();
    Image::from_fn(img.channels(), h, w, |c, y, x| means[c] + f * (img.get(c, y, x) - means[c]))
}

const MAX_ATTEMPTS: u64 = 64;

/// Generates the sample for `seed`, redrawing when clipping exceeds the limit.
pub fn generate_sample<T: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<MixtureSample<T>> {
    cfg.validate()?;
    let files = match &cfg.source {
        TextureSource::Procedural => None,
        TextureSource::Directory(dir) => Some(list_images(dir)?),
    };
    let (h, w) = (cfg.height, cfg.width);
    let mut last_clip = 0.0;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        let (background, reflection) = match &files {
            None => (
                procedural_texture(h, w, &cfg.texture, &mut rng),
                procedural_texture(h, w, &cfg.texture, &mut rng),
            ),
            Some(files) => (
                photo_texture(files, h, w, &mut rng)?,
                photo_texture(files, h, w, &mut rng)?,
            ),
        };
        let reflection = reduce_contrast(&gaussian_blur(&reflection, cfg.reflection_blur), cfg.reflection_contrast);
        let bg_plane = draw_plane(cfg.bg_disparity, cfg.max_slope, h, w, &mut rng);
        let refl_plane = draw_plane(cfg.refl_disparity, cfg.max_slope, h, w, &mut rng);
        let scene = LayerScene::new(
            background,
            reflection,
            bg_plane.render(h, w),
            refl_plane.render(h, w),
            cfg.weights,
        )?;
        let meta = SampleMeta {
            seed,
            weights: cfg.weights,
            bg_plane,
            refl_plane,
            clipped_fraction: 0.0,
        };
        let sample = MixtureSample::from_scene(&scene, &cfg.baselines, cfg.axis, meta)?;
        if sample.meta.clipped_fraction <= cfg.max_clip_fraction {
            return Ok(sample);
        }
        last_clip = sample.meta.clipped_fraction;
    }
    Err(Error::Config(format!(
        "no sample under the clipping limit {} after {MAX_ATTEMPTS} attempts (last {last_clip})",
        cfg.max_clip_fraction
    )))
}

/// In-memory dataset; sample `i` uses `derive_seed(seed, i)`.
pub fn generate_dataset<T: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<Vec<MixtureSample<T>>> {
    (0..cfg.count as u64)
        .map(|i| generate_sample(cfg, derive_seed(seed, i)))
        .collect()
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

fn write_meta<T: Scalar>(sample: &MixtureSample<T>, path: &Path) -> Result<()> {
    let mut doc = KvDoc::new();
    let m = &sample.meta;
    let (h, w) = sample.dims();
    doc.set("seed", m.seed);
    doc.set("height", h);
    doc.set("width", w);
    doc.set("weights", join(&[m.weights.background, m.weights.reflection]));
    for (name, p) in [("bg_disparity", m.bg_plane), ("refl_disparity", m.refl_plane)] {
        doc.set(format!("{name}.base"), p.base);
        doc.set(format!("{name}.grad_x"), p.grad_x);
        doc.set(format!("{name}.grad_y"), p.grad_y);
        let (lo, hi) = p.range(h, w);
        doc.set(format!("{name}.range"), join(&[lo, hi]));
    }
    doc.set("baselines", join(sample.stack.baselines()));
    doc.set("axis", sample.stack.axis());
    doc.set("reference_index", REFERENCE_INDEX);
    doc.set("clipped_fraction", m.clipped_fraction);
    doc.save(path)
}

/// Writes one sample directory: `view_0.png … view_4.png`,
/// `gt_background.png`, `gt_reflection.png` and `meta.txt`.
pub fn write_sample<T: Scalar>(sample: &MixtureSample<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, v) in sample.stack.views().iter().enumerate() {
        v.save_png(&dir.join(format!("view_{i}.png")))?;
    }
    sample.gt_background.save_png(&dir.join("gt_background.png"))?;
    sample.gt_reflection.save_png(&dir.join("gt_reflection.png"))?;
    write_meta(sample, &dir.join("meta.txt"))
}

/// Reads a sample directory written by [`write_sample`]. Disparity maps are
/// rebuilt from the recorded planes.
pub fn read_sample<T: Scalar>(dir: &Path) -> Result<MixtureSample<T>> {
    let doc = KvDoc::load(&dir.join("meta.txt"))?;
    let stack = read_stack(dir)?;
    let (h, w) = stack.dims();
    let plane = |name: &str| -> Result<DisparityPlane> {
        Ok(DisparityPlane {
            base: doc.require(&format!("{name}.base"))?,
            grad_x: doc.require(&format!("{name}.grad_x"))?,
            grad_y: doc.require(&format!("{name}.grad_y"))?,
        })
    };
    let (bg_plane, refl_plane) = (plane("bg_disparity")?, plane("refl_disparity")?);
    let (wb, wr) = pair(&doc, "weights")?.unwrap_or((0.6, 0.4));
    Ok(MixtureSample {
        stack,
        gt_background: Image::load_png(&dir.join("gt_background.png"))?,
        gt_reflection: Image::load_png(&dir.join("gt_reflection.png"))?,
        gt_bg_disparity: bg_plane.render(h, w),
        gt_refl_disparity: refl_plane.render(h, w),
        meta: SampleMeta {
            seed: doc.require("seed")?,
            weights: MixWeights {
                background: wb,
                reflection: wr,
            },
            bg_plane,
            refl_plane,
            clipped_fraction: doc.get("clipped_fraction")?.unwrap_or(0.0),
        },
    })
}

/// Reads `view_0.png … view_4.png`; baselines and axis come from `meta.txt`
/// when present and default otherwise.
pub fn read_stack<T: Scalar>(dir: &Path) -> Result<MultiViewStack<T>> {
    let views = (0..NUM_VIEWS)
        .map(|i| Image::load_png(&dir.join(format!("view_{i}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let meta = dir.join("meta.txt");
    let (baselines, axis) = if meta.exists() {
        let doc = KvDoc::load(&meta)?;
        let baselines: Vec<f64> = doc
            .get_list("baselines")?
            .ok_or_else(|| Error::Config("meta.txt: missing baselines".into()))?;
        (baselines, doc.get("axis")?.unwrap_or_default())
    } else {
        (DEFAULT_BASELINES.to_vec(), Axis::default())
    };
    MultiViewStack::new(views, baselines, axis)
}

/// Generates `cfg.count` samples under `out_dir` plus a `manifest.txt` with
/// the configuration, the shared disparity range and per-sample parameters.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<KvDoc> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = KvDoc::new();
    cfg.write_kv(&mut manifest, "config.");
    manifest.set("seed", seed);
    match cfg.shared_range() {
        Some((lo, hi)) => manifest.set("shared_disparity", join(&[lo, hi])),
        None => manifest.set("shared_disparity", "none"),
    }
    for i in 0..cfg.count {
        let sample: MixtureSample<f32> = generate_sample(cfg, derive_seed(seed, i as u64))?;
        let name = sample_dir_name(i);
        write_sample(&sample, &out_dir.join(&name))?;
        let m = &sample.meta;
        manifest.set(format!("{name}.seed"), m.seed);
        manifest.set(
            format!("{name}.bg_disparity"),
            join(&[m.bg_plane.base, m.bg_plane.grad_x, m.bg_plane.grad_y]),
        );
        manifest.set(
            format!("{name}.refl_disparity"),
            join(&[m.refl_plane.base, m.refl_plane.grad_x, m.refl_plane.grad_y]),
        );
        manifest.set(format!("{name}.clipped_fraction"), m.clipped_fraction);
    }
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Loads every sample listed by a dataset manifest, in index order.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Vec<MixtureSample<T>>> {
    let manifest = KvDoc::load(&dir.join("manifest.txt"))?;
    let count: usize = manifest.require("config.count")?;
    (0..count)
        .map(|i| read_sample(&dir.join(sample_dir_name(i))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tex(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        procedural_texture(h, w, &TextureConfig::default(), &mut rng)
    }

    fn scene(d_b: f64, d_r: f64, w_r: f64) -> LayerScene<f64> {
        let (h, w) = (24, 40);
        LayerScene::new(
            tex(1, h, w),
            tex(2, h, w),
            DisparityPlane::constant(d_b).render(h, w),
            DisparityPlane::constant(d_r).render(h, w),
            MixWeights {
                background: 0.6,
                reflection: w_r,
            },
        )
        .unwrap()
    }

    #[test]
    fn mix_examples() {
        let (bg, refl) = (tex(3, 8, 8), tex(4, 8, 8));
        let m = mix_images(&bg, &refl, 0.6, 0.4).unwrap();
        for ((&o, &b), &r) in m.image.data().iter().zip(bg.data()).zip(refl.data()) {
            assert!((o - (0.6 * b + 0.4 * r)).abs() < 1e-12);
        }
        assert_eq!(m.clipped_fraction, 0.0);
        assert_eq!(mix_images(&bg, &refl, 1.0, 0.0).unwrap().image, bg);
        let half = Image::filled(3, 4, 4, 0.5f64);
        let m = mix_images(&half, &half, 0.6, 0.4).unwrap();
        assert!(m.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(mix_images(&bg, &tex(4, 8, 9), 0.6, 0.4).is_err());
    }

    #[test]
    fn clipping_is_reported() {
        let ones = Image::filled(3, 2, 2, 1.0f64);
        let m = mix_images(&ones, &ones, 0.6, 0.6).unwrap();
        assert_eq!(m.clipped_fraction, 1.0);
        assert!(m.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_baselines_replicate_the_reference() {
        let (stack, _) = render_views(&scene(2.0, 4.0, 0.4), &[0.0; 5], Axis::Horizontal).unwrap();
        for v in stack.views() {
            assert_eq!(v, stack.reference());
        }
    }

    #[test]
    fn single_layer_view_is_an_integer_shift() {
        let s = scene(2.0, 0.0, 0.0);
        let (stack, _) = render_views(&s, &DEFAULT_BASELINES, Axis::Horizontal).unwrap();
        let bg = s.background.map(|v| 0.6 * v);
        let view = &stack.views()[3]; // baseline 1
        for c in 0..3 {
            for y in 0..24 {
                for x in 0..36 {
                    assert!((view.get(c, y, x) - bg.get(c, y, x + 2)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_layer_views_offset_each_layer_separately() {
        let s = scene(1.0, 3.0, 0.4);
        let (stack, _) = render_views(&s, &DEFAULT_BASELINES, Axis::Horizontal).unwrap();
        // view 0 has baseline -2: background moves by -2, reflection by -6
        let view = &stack.views()[0];
        for c in 0..3 {
            for y in 0..24 {
                for x in 6..40 {
                    let want = 0.6 * s.background.get(c, y, x - 2) + 0.4 * s.reflection.get(c, y, x - 6);
                    assert!((view.get(c, y, x) - want.clamp(0.0, 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oversized_displacement_is_rejected() {
        let s = scene(30.0, 0.0, 0.4);
        assert!(render_views(&s, &DEFAULT_BASELINES, Axis::Horizontal).is_err());
    }

    #[test]
    fn augment_counts_and_top_left_crop() {
        let cfg = SynthConfig {
            count: 1,
            height: 64,
            width: 64,
            ..Default::default()
        };
        let s: MixtureSample<f64> = generate_sample(&cfg, 5).unwrap();
        let out = augment(&s, 32, 8, Orientations::Identity).unwrap();
        assert_eq!(out.len(), 5 * 5);
        assert_eq!(out[0].gt_background, s.gt_background.crop(0, 0, 32, 32).unwrap());
        let out = augment(&s, 64, 3, Orientations::Dihedral).unwrap();
        assert_eq!(out.len(), 8);
        assert!(augment(&s, 65, 1, Orientations::Identity).is_err());
        assert_eq!(crop_positions(256, 128, 16).len(), 9);
    }

    #[test]
    fn transformed_stacks_stay_consistent_with_their_baselines() {
        let s = scene(2.0, 0.0, 0.0);
        let (stack, _) = render_views(&s, &DEFAULT_BASELINES, Axis::Horizontal).unwrap();
        let sample = MixtureSample {
            stack,
            gt_background: s.background.clone(),
            gt_reflection: s.reflection.clone(),
            gt_bg_disparity: s.bg_disparity.clone(),
            gt_refl_disparity: s.refl_disparity.clone(),
            meta: SampleMeta {
                seed: 0,
                weights: s.weights,
                bg_plane: DisparityPlane::constant(2.0),
                refl_plane: DisparityPlane::constant(0.0),
                clipped_fraction: 0.0,
            },
        };
        for (flip, turns) in Orientations::Dihedral.transforms() {
            let t = sample.transformed(flip, turns);
            let (h, w) = t.dims();
            for (view, &b) in t.stack.views().iter().zip(t.stack.baselines()) {
                let pred = warp(t.reference(), t.gt_bg_disparity.data(), b, t.stack.axis()).unwrap();
                for y in 5..h - 5 {
                    for x in 5..w - 5 {
                        assert!(
                            (pred.get(0, y, x) - view.get(0, y, x)).abs() < 1e-9,
                            "flip {flip} turns {turns} baseline {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shared_range_bookkeeping() {
        assert_eq!(shared_range((4.0, 8.0), (0.0, 4.0)), Some((4.0, 4.0)));
        assert_eq!(shared_range((4.5, 8.0), (0.0, 4.0)), None);
        assert_eq!(shared_range((2.0, 8.0), (0.0, 4.0)), Some((2.0, 4.0)));
    }

    #[test]
    fn planes_stay_inside_their_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = draw_plane((1.0, 3.0), 0.05, 32, 48, &mut rng);
            let (lo, hi) = p.range(32, 48);
            assert!(lo >= 1.0 - 1e-9 && hi <= 3.0 + 1e-9, "{lo} {hi}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_respects_clipping() {
        let cfg = SynthConfig::default();
        let a: Vec<MixtureSample<f32>> = generate_dataset(&cfg, 7).unwrap();
        let b: Vec<MixtureSample<f32>> = generate_dataset(&cfg, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.stack, y.stack);
            assert!(x.meta.clipped_fraction <= cfg.max_clip_fraction);
        }
        let r = a[0].reference();
        let want = mix_images(&a[0].gt_background, &a[0].gt_reflection, 0.6, 0.4).unwrap();
        assert_eq!(r, &want.image);
    }
}
