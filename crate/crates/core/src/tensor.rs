//! Dense row-major tensors.
//!
//! Network activations and parameters use the layout `[channels, spatial...]`
//! with 2 or 3 spatial axes; label maps and masks drop the channel axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Copy + Default> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::default(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Widen to `f64`, mostly for metrics and reporting.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    /// Narrow/widen from `f64`.
    pub fn from_f64_tensor(src: &Tensor<f64>) -> Tensor<T> {
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

/// Concatenate along axis 0 (the channel axis for activations).
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let spatial = &first.shape()[1..];
    let mut channels = 0usize;
    for p in parts {
        if &p.shape()[1..] != spatial {
            return Err(Error::Shape(format!(
                "concat: spatial dims {:?} vs {:?}",
                &p.shape()[1..],
                spatial
            )));
        }
        channels += p.shape()[0];
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(spatial);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor { shape, data })
}

/// Split a channel-axis gradient back into per-part gradients with the given
/// channel counts; inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channel_counts: &[usize]) -> Vec<Tensor<T>> {
    let spatial: usize = grad.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(channel_counts.len());
    let mut offset = 0usize;
    for &c in channel_counts {
        let mut shape = vec![c];
        shape.extend_from_slice(&grad.shape()[1..]);
        let take = c * spatial;
        out.push(Tensor {
            shape,
            data: grad.data()[offset..offset + take].to_vec(),
        });
        offset += take;
    }
    debug_assert_eq!(offset, grad.len());
    out
}
