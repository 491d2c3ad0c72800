//! Dense row-major tensors.
//!
//! Activations use the layout `[batch, channel, h, w]` and convolution
//! weights `[out, in, kh, kw]`, so keeping the first `c` channels of either
//! axis is a prefix slice.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Copies rows `idx` of the leading axis into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Borrowed view of the leading `out` entries of axis 0, each truncated to
    /// the leading `inp` entries of axis 1. For 1-D tensors `inp` is ignored.
    pub fn prefix_view(&self, out: usize, inp: usize) -> Result<PrefixView<'_, T>> {
        let full_out = self.shape[0];
        let full_in = if self.shape.len() > 1 { self.shape[1] } else { inp };
        if out == 0 || inp == 0 || out > full_out || inp > full_in {
            return Err(Error::SliceOutOfRange {
                c_in: inp,
                c_out: out,
                full_in,
                full_out,
            });
        }
        Ok(PrefixView {
            base: self,
            out,
            inp: if self.shape.len() > 1 { inp } else { 1 },
        })
    }

    /// Owned copy of [`Tensor::prefix_view`].
    pub fn prefix_slice(&self, out: usize, inp: usize) -> Result<Self> {
        Ok(self.prefix_view(out, inp)?.to_tensor())
    }

    /// Adds `part` (shaped like a prefix slice of `self`) into the matching
    /// prefix region of `self`.
    pub fn scatter_add_prefix(&mut self, part: &Self) {
        let out = part.shape[0];
        if self.shape.len() == 1 {
            for (a, &b) in self.data[..out].iter_mut().zip(&part.data) {
                *a = *a + b;
            }
            return;
        }
        let inp = part.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let full_row = self.shape[1] * inner;
        let part_row = inp * inner;
        for o in 0..out {
            let dst = &mut self.data[o * full_row..o * full_row + part_row];
            let src = &part.data[o * part_row..(o + 1) * part_row];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
    }
}

/// A prefix region of a shared parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct PrefixView<'a, T> {
    base: &'a Tensor<T>,
    out: usize,
    inp: usize,
}

impl<T: Real> PrefixView<'_, T> {
    pub fn shape(&self) -> Vec<usize> {
        let mut shape = self.base.shape.clone();
        shape[0] = self.out;
        if shape.len() > 1 {
            shape[1] = self.inp;
        }
        shape
    }

    /// Reads the element at a multi-index relative to the view.
    pub fn get(&self, index: &[usize]) -> T {
        let shape = &self.base.shape;
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            flat = flat * shape[d] + i;
        }
        self.base.data[flat]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let shape = self.shape();
        if self.base.shape.len() == 1 {
            return Tensor {
                shape,
                data: self.base.data[..self.out].to_vec(),
            };
        }
        let inner: usize = self.base.shape[2..].iter().product();
        let full_row = self.base.shape[1] * inner;
        let part_row = self.inp * inner;
        let mut data = Vec::with_capacity(self.out * part_row);
        for o in 0..self.out {
            data.extend_from_slice(&self.base.data[o * full_row..o * full_row + part_row]);
        }
        Tensor { shape, data }
    }
}
