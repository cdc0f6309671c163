//! Differentiable 1-D bilinear resampling along the camera baseline axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Direction along which views are displaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[default]
    Horizontal,
    Vertical,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Horizontal => "horizontal",
            Axis::Vertical => "vertical",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(Axis::Horizontal),
            "vertical" => Ok(Axis::Vertical),
            other => Err(Error::Config(format!("unknown baseline axis `{other}`"))),
        }
    }
}

/// Sample position split into the two taps and the interpolation weight.
/// `live` is false when the position was clamped, where the derivative is 0.
#[inline]
fn taps<T: Scalar>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::lit((len - 1) as f64);
    let live = pos > T::zero() && pos < max;
    let p = pos.max(T::zero()).min(max);
    let i0 = p.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - T::lit(i0 as f64), live)
}

/// Resamples `image` at `x + baseline · disparity(x)` along `axis`, linear
/// interpolation with clamp-to-edge.
///
/// `disparity` holds one value per pixel (row-major H×W).
pub fn warp<T: Scalar>(image: &Image<T>, disparity: &[T], baseline: T, axis: Axis) -> Result<Image<T>> {
    warp_impl(image, disparity, baseline, axis, false).map(|(img, _)| img)
}

/// Like [`warp`] but also returns `∂ output / ∂ disparity` per channel and
/// pixel (same layout as the image).
pub fn warp_with_grad<T: Scalar>(
    image: &Image<T>,
    disparity: &[T],
    baseline: T,
    axis: Axis,
) -> Result<(Image<T>, Image<T>)> {
    warp_impl(image, disparity, baseline, axis, true)
        .map(|(img, grad)| (img, grad.expect("gradient requested")))
}

fn warp_impl<T: Scalar>(
    image: &Image<T>,
    disparity: &[T],
    baseline: T,
    axis: Axis,
    want_grad: bool,
) -> Result<(Image<T>, Option<Image<T>>)> {
    let (h, w) = image.dims();
    if disparity.len() != h * w {
        return Err(Error::Shape(format!(
            "disparity has {} values for a {h}x{w} image",
            disparity.len()
        )));
    }
    let channels = image.channels();
    let mut out = Image::new(channels, h, w);
    let mut grad = want_grad.then(|| Image::new(channels, h, w));
    for y in 0..h {
        for x in 0..w {
            let shift = baseline * disparity[y * w + x];
            let (pos, len) = match axis {
                Axis::Horizontal => (T::lit(x as f64) + shift, w),
                Axis::Vertical => (T::lit(y as f64) + shift, h),
            };
            let (i0, i1, frac, live) = taps(pos, len);
            for c in 0..channels {
                let (a, b) = match axis {
                    Axis::Horizontal => (image.get(c, y, i0), image.get(c, y, i1)),
                    Axis::Vertical => (image.get(c, i0, x), image.get(c, i1, x)),
                };
                out.set(c, y, x, a + frac * (b - a));
                if let Some(g) = grad.as_mut() {
                    let d = if live { baseline * (b - a) } else { T::zero() };
                    g.set(c, y, x, d);
                }
            }
        }
    }
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize) -> Image<f64> {
        Image::from_fn(3, h, w, |c, y, x| {
            ((x as f64 * 0.7 + c as f64).sin() + (y as f64 * 0.3).cos()) * 0.25 + 0.5
        })
    }

    #[test]
    fn zero_baseline_is_identity() {
        let img = texture(6, 9);
        let d = vec![2.7; 54];
        assert_eq!(warp(&img, &d, 0.0, Axis::Horizontal).unwrap(), img);
    }

    #[test]
    fn integer_shift_matches_array_shift_in_interior() {
        let img = texture(5, 12);
        let d = vec![3.0; 60];
        let out = warp(&img, &d, 1.0, Axis::Horizontal).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..9 {
                    assert!((out.get(c, y, x) - img.get(c, y, x + 3)).abs() < 1e-12);
                }
            }
        }
        let out = warp(&img, &d, -1.0, Axis::Vertical).unwrap();
        for y in 3..5 {
            assert_eq!(out.get(0, y, 4), img.get(0, y - 3, 4));
        }
    }

    #[test]
    fn fractional_shift_is_exact_on_ramps() {
        let ramp = Image::from_fn(1, 3, 10, |_, _, x| 0.1 + 0.05 * x as f64);
        let out = warp(&ramp, &[0.5; 30], 1.0, Axis::Horizontal).unwrap();
        for x in 0..9 {
            assert!((out.get(0, 1, x) - (0.1 + 0.05 * (x as f64 + 0.5))).abs() < 1e-12);
        }
    }

    #[test]
    fn border_clamps() {
        let img = texture(2, 4);
        let out = warp(&img, &[100.0; 8], 1.0, Axis::Horizontal).unwrap();
        assert_eq!(out.get(1, 1, 0), img.get(1, 1, 3));
        let (_, g) = warp_with_grad(&img, &[100.0; 8], 1.0, Axis::Horizontal).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let img = texture(4, 16);
        let d: Vec<f64> = (0..64).map(|i| 1.3 + 0.37 * ((i * 5) % 7) as f64 / 7.0).collect();
        for axis in [Axis::Horizontal, Axis::Vertical] {
            let img = if axis == Axis::Vertical { img.rotate90(1) } else { img.clone() };
            let (_, g) = warp_with_grad(&img, &d, 1.5, axis).unwrap();
            let h = 1e-6;
            for i in 0..64 {
                let mut dp = d.clone();
                dp[i] += h;
                let mut dm = d.clone();
                dm[i] -= h;
                let p = warp(&img, &dp, 1.5, axis).unwrap();
                let m = warp(&img, &dm, 1.5, axis).unwrap();
                for c in 0..3 {
                    let k = c * 64 + i;
                    let fd = (p.data()[k] - m.data()[k]) / (2.0 * h);
                    assert!((fd - g.data()[k]).abs() < 1e-6, "{axis}: {fd} vs {}", g.data()[k]);
                }
            }
        }
    }
}
