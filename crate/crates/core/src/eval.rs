//! Evaluation metrics: mean-normalized PSNR, edge-intensity histograms,
//! 1-D Wasserstein distance and mask recall.

use std::fmt::Write as _;
use std::path::Path;

use crate::edge_ops::{binarize_edges, edge_image};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scalar::Scalar;

/// Returned for a zero mean squared error.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR (peak 1) after shifting `result` to the mean of `gt` and clipping.
pub fn psnr_mean_normalized<T: Scalar>(result: &Image<T>, gt: &Image<T>) -> Result<f64> {
    result.check_same(gt)?;
    let shift = gt.mean().to_f64_lossy() - result.mean().to_f64_lossy();
    let n = result.data().len();
    let mse = result
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&r, &g)| ((r.to_f64_lossy() + shift).clamp(0.0, 1.0) - g.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n.max(1) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Config(format!("invalid histogram {bins} bins over [{lo}, {hi}]")));
        }
        let mut counts = vec![0u64; bins];
        for &v in values {
            let t = ((v - lo) / (hi - lo) * bins as f64).floor();
            counts[(t.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// Population skewness; 0 for constant samples.
    pub skewness: f64,
}

pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(Error::Config("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    Ok(Moments {
        count: values.len(),
        mean,
        std: m2.sqrt(),
        skewness,
    })
}

/// Luminance of `image` at its own edge pixels (threshold `sigma`).
pub fn edge_intensities<T: Scalar>(image: &Image<T>, sigma: f64) -> Result<Vec<f64>> {
    let mask = binarize_edges(&edge_image(image), sigma)?;
    let lum = image.luminance();
    Ok(mask_values(&lum, &mask))
}

/// All channel values of `image` at pixels set in `mask`.
pub fn mask_values<T: Scalar>(image: &Image<T>, mask: &Mask) -> Vec<f64> {
    let (h, w) = image.dims();
    let mut out = Vec::new();
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    out.push(image.get(c, y, x).to_f64_lossy());
                }
            }
        }
    }
    out
}

/// Edge-intensity distributions of images with reflection against their
/// reflection-free counterparts.
#[derive(Clone, Debug)]
pub struct HistogramReport {
    pub mixture: Histogram,
    pub background: Histogram,
    pub mixture_moments: Moments,
    pub background_moments: Moments,
}

pub fn edge_histogram_report<T: Scalar>(
    images: &[Image<T>],
    backgrounds: &[Image<T>],
    sigma: f64,
    bins: usize,
) -> Result<HistogramReport> {
    if images.len() != backgrounds.len() {
        return Err(Error::Shape(format!(
            "{} images vs {} backgrounds",
            images.len(),
            backgrounds.len()
        )));
    }
    let collect = |set: &[Image<T>]| -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for img in set {
            all.extend(edge_intensities(img, sigma)?);
        }
        if all.is_empty() {
            return Err(Error::Config("no edge pixels in the image set".into()));
        }
        Ok(all)
    };
    let (m, b) = (collect(images)?, collect(backgrounds)?);
    Ok(HistogramReport {
        mixture: Histogram::new(&m, bins, 0.0, 1.0)?,
        background: Histogram::new(&b, bins, 0.0, 1.0)?,
        mixture_moments: moments(&m)?,
        background_moments: moments(&b)?,
    })
}

impl HistogramReport {
    /// `bin_lo,bin_hi,mixture,background`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,mixture,background\n");
        let e = self.mixture.bin_edges();
        for i in 0..self.mixture.counts.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e[i], e[i + 1], self.mixture.counts[i], self.background.counts[i]
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, m: &Moments| {
            format!(
                "{name:<11} n={:<8} mean={:.4} std={:.4} skewness={:.4}\n",
                m.count, m.mean, m.std, m.skewness
            )
        };
        line("mixture", &self.mixture_moments) + &line("background", &self.background_moments)
    }

    /// Normalized histograms as a line plot: blue for mixtures, green for
    /// backgrounds.
    pub fn render(&self, width: usize, height: usize) -> Image<f32> {
        let mut img = Image::filled(3, height, width, 1.0f32);
        let (ml, mr, mt, mb) = (24usize, 8usize, 8usize, 20usize);
        let (pw, ph) = (width.saturating_sub(ml + mr).max(2), height.saturating_sub(mt + mb).max(2));
        for x in ml..ml + pw {
            for c in 0..3 {
                img.set(c, mt + ph, x, 0.0);
            }
        }
        for y in mt..=mt + ph {
            for c in 0..3 {
                img.set(c, y, ml, 0.0);
            }
        }
        let dens = |h: &Histogram| {
            let t = h.total().max(1) as f64;
            h.counts.iter().map(|&c| c as f64 / t).collect::<Vec<_>>()
        };
        let (dm, db) = (dens(&self.mixture), dens(&self.background));
        let peak = dm.iter().chain(&db).copied().fold(1e-12, f64::max);
        let bins = dm.len();
        for (d, color) in [(&db, [0.1f32, 0.6, 0.1]), (&dm, [0.1, 0.2, 0.9])] {
            let point = |i: usize| {
                let x = ml + ((i as f64 + 0.5) / bins as f64 * pw as f64) as usize;
                let y = mt + ph - ((d[i] / peak) * ph as f64).round() as usize;
                (x.min(width - 1), y)
            };
            for i in 0..bins {
                let (x0, y0) = point(i);
                let (x1, y1) = if i + 1 < bins { point(i + 1) } else { (x0, y0) };
                let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as usize;
                    let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as usize;
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
        img
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        self.render(320, 200).save_png(&dir.join(format!("{stem}.png")))
    }
}

/// W1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("Wasserstein distance of an empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    // integrate |F_a - F_b| over the merged support
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(dist)
}

/// Fraction of `gt` pixels also set in `pred`; 1 for an empty `gt`.
pub fn recall(pred: &Mask, gt: &Mask) -> Result<f64> {
    let hit = pred.and(gt)?.count();
    let total = gt.count();
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}
