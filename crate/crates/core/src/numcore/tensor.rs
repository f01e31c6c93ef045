use super::Real;
use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("dims {dims:?} need {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor<S>, alpha: S) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |a, &b| a + b)
    }

    pub fn dot(&self, other: &Tensor<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |a, (&x, &y)| a + x * y)
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Contiguous slab of the leading index (e.g. one channel of `C×...`).
    pub fn slab(&self, i: usize) -> &[S] {
        let n = self.data.len() / self.dims[0];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.data.len() / self.dims[0];
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Concatenate along the leading axis.
    pub fn concat0(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat0", "no inputs"))?;
        let tail = &first.dims[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::shape(
                    "concat0",
                    format!("{:?} vs {:?}", first.dims, p.dims),
                ));
            }
            lead += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(tail);
        Tensor::from_vec(&dims, data)
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn narrow0(&self, start: usize, end: usize) -> Self {
        let n = self.data.len() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Tensor {
            dims,
            data: self.data[start * n..end * n].to_vec(),
        }
    }
}
