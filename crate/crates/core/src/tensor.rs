use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 4-D activation tensor in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "tensor {shape:?} needs {want} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one spatial plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements in one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "tensor shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        if let Some(bad) = parts
            .iter()
            .find(|t| t.batch() != n || t.height() != h || t.width() != w)
        {
            return Err(Error::Shape(format!(
                "channel concat mismatch: {:?} vs {:?}",
                first.shape, bad.shape
            )));
        }
        let c: usize = parts.iter().map(|t| t.channels()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for t in parts {
                data.extend_from_slice(t.item(b));
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Splits along the channel axis into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if widths.iter().sum::<usize>() != self.channels() {
            return Err(Error::Shape(format!(
                "split widths {widths:?} do not cover {} channels",
                self.channels()
            )));
        }
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut out: Vec<Self> = widths.iter().map(|&c| Self::zeros([n, c, h, w])).collect();
        for b in 0..n {
            let src = self.item(b);
            let mut offset = 0;
            for (piece, &c) in out.iter_mut().zip(widths) {
                piece
                    .item_mut(b)
                    .copy_from_slice(&src[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        Ok(out)
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "stack mismatch: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
            n += t.batch();
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Extracts batch item `n` as a single-item tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_then_split_restores_parts() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let joined = Tensor::cat_channels(&[&a, &b]).unwrap();
        assert_eq!(joined.shape(), [2, 3, 1, 2]);
        assert_eq!(&joined.item(1)[..2], &[3.0, 4.0]);
        let parts = joined.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn stack_and_select_round_trip() {
        let a = Tensor::full([1, 2, 2, 2], 1.0f64);
        let b = Tensor::full([1, 2, 2, 2], 2.0f64);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.batch(), 2);
        assert_eq!(s.select(1), b);
        assert!(Tensor::cat_channels(&[&a, &Tensor::zeros([1, 1, 3, 2])]).is_err());
    }
}
