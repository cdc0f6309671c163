//! Planar floating point images and binary masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar (C×H×W) image. Values are nominally in `[0, 1]`; edge images
/// store nonnegative gradient magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-channel gradient magnitudes of an image.
pub type EdgeImage<T> = Image<T>;

/// Single-channel gradient magnitude map.
pub type GradientMap<T> = Image<T>;

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "image {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B`; single-channel images pass through.
    pub fn luminance(&self) -> Self {
        if self.channels != 3 {
            return Self::from_vec(1, self.height, self.width, self.plane(0).to_vec())
                .expect("plane has image size");
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        let data = (0..self.height * self.width)
            .map(|i| wr * r[i] + wg * g[i] + wb * b[i])
            .collect();
        Self::from_vec(1, self.height, self.width, data).expect("luminance size")
    }

    /// Replicates a single-channel image into `channels` channels.
    pub fn replicate(&self, channels: usize) -> Self {
        let mut data = Vec::with_capacity(channels * self.height * self.width);
        for _ in 0..channels {
            data.extend_from_slice(self.plane(0));
        }
        Self::from_vec(channels, self.height, self.width, data).expect("replicate size")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.channels, self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Rotates by 90° counter-clockwise `quarter_turns` times.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let mut cur = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = (cur.height, cur.width);
            cur = Self::from_fn(cur.channels, w, h, |c, y, x| cur.get(c, x, w - 1 - y));
        }
        cur
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image and tensor sizes agree")
    }

    /// Copies batch item `n` of a tensor into an image.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Self {
        Self::from_vec(t.channels(), t.height(), t.width(), t.item(n).to_vec())
            .expect("tensor item has image size")
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Quantizes to 8 bits per channel (values clamped to `[0, 1]`).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c };
                    out.push(quantize(self.get(src, y, x)));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer sized for image");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        Ok(Self::from_fn(3, h, w, |c, y, x| {
            T::lit(raw[(y * w + x) * 3 + c] as f64 / 255.0)
        }))
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// H×W binary mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: bits.iter().map(|&b| b as u8).collect(),
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    #[inline]
    pub fn at(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |a, b| a | b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    fn combine(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Clears a band of `border` pixels around the edge.
    pub fn without_border(&self, border: usize) -> Mask {
        let (h, w) = self.dims();
        Mask::from_fn(h, w, |y, x| {
            self.get(y, x) && y >= border && x >= border && y + border < h && x + border < w
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v * 255).collect(),
        )
        .expect("buffer sized for mask");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
