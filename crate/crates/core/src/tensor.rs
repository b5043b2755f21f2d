//! Dense N-dimensional array, the currency of every module.
//!
//! Canonical image layout is `[N, C, H, W]`, row-major contiguous. A
//! `Tensor` is a plain value type; gradient tracking lives on the
//! [`Tape`](crate::tape::Tape), not here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build from shape and flat row-major data; length must match.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::ZERO; numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::ONE)
    }

    /// 1-element tensor (the shape scalar reductions produce).
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Fill from a seeded RNG, uniform in `[lo, hi)`. Sampling happens at
    /// f64 and is rounded once, so the draw sequence is identical across
    /// element types.
    pub fn from_rng_uniform<R: Rng>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| S::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss { numel: self.data.len() });
        }
        Ok(self.data[0])
    }

    /// Interpret as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected rank-4 [N,C,H,W] tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Swap the H and W axes of a `[N, C, H, W]` tensor.
    pub fn transpose_hw(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4("transpose_hw")?;
        let mut out = Tensor::zeros([n, c, w, h]);
        for in_ in 0..n {
            for ic in 0..c {
                let src = &self.data[(in_ * c + ic) * h * w..(in_ * c + ic + 1) * h * w];
                let dst = &mut out.data[(in_ * c + ic) * h * w..(in_ * c + ic + 1) * h * w];
                for ih in 0..h {
                    for iw in 0..w {
                        dst[iw * h + ih] = src[ih * w + iw];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Convert element type; used to move f32 checkpoints into f64 mode.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element, as f64.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }
}
