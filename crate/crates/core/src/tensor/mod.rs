//! Dense real and complex n-d arrays.
//!
//! Images and feature maps use batch x channel x height x width order.

mod fft;
pub mod io;

pub use fft::{
    fft1_centered, fft2_centered, fft_centered, fft_centered_adjoint, ifft1_centered,
    ifft2_centered, ifft2_centered_with_residual, ifft_centered, ifft_centered_real_adjoint,
};

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense real-valued tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose outputs are sized by
    /// construction.
    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )))
        }
    }

    /// Contiguous slice for one leading index of an N x ... tensor.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    /// Gathers the given leading indices into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let lead = self.shape[0];
        let per = self.data.len() / lead;
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= lead {
                return Err(Error::Input(format!("index {i} out of range {lead}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        check_shape(&shape)?;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.expect_shape(first.shape())?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Dense complex tensor produced by the centered transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
    centered: bool,
    dims: Vec<usize>,
}

impl<T: Real> Spectrum<T> {
    /// Builds a spectrum; `dims` lists the transformed dimensions (sorted,
    /// deduplicated) and must be non-empty when `centered` is set.
    pub fn new(
        shape: Vec<usize>,
        re: Vec<T>,
        im: Vec<T>,
        centered: bool,
        mut dims: Vec<usize>,
    ) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got re {} / im {}",
                re.len(),
                im.len()
            )));
        }
        dims.sort_unstable();
        dims.dedup();
        if let Some(&d) = dims.iter().find(|&&d| d >= shape.len()) {
            return Err(Error::Dimension(format!(
                "dimension {d} out of range for rank {}",
                shape.len()
            )));
        }
        if centered && dims.is_empty() {
            return Err(Error::Layout(
                "centered spectrum must name its transformed dimensions".into(),
            ));
        }
        Ok(Spectrum {
            shape,
            re,
            im,
            centered,
            dims,
        })
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        re: Vec<T>,
        im: Vec<T>,
        centered: bool,
        dims: Vec<usize>,
    ) -> Self {
        debug_assert_eq!(re.len(), im.len());
        Spectrum {
            shape,
            re,
            im,
            centered,
            dims,
        }
    }

    /// Real tensor promoted to a complex one with zero imaginary part.
    pub fn from_real(t: &Tensor<T>) -> Self {
        Spectrum {
            shape: t.shape.clone(),
            re: t.data.clone(),
            im: vec![T::zero(); t.data.len()],
            centered: false,
            dims: Vec::new(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Spectrum {
            shape: self.shape.clone(),
            re: vec![T::zero(); self.re.len()],
            im: vec![T::zero(); self.im.len()],
            centered: self.centered,
            dims: self.dims.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    pub fn real_part(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape.clone(), self.re.clone())
    }

    pub fn imag_part(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape.clone(), self.im.clone())
    }

    pub fn magnitude(&self) -> Tensor<T> {
        Tensor::from_vec(
            self.shape.clone(),
            self.re
                .iter()
                .zip(&self.im)
                .map(|(&a, &b)| a.hypot(b))
                .collect(),
        )
    }

    pub fn sum_sq_magnitude(&self) -> T {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| a * a + b * b)
            .sum()
    }

    /// Real inner product: sum of re*re' + im*im'.
    pub fn inner(&self, other: &Self) -> T {
        let a: T = self.re.iter().zip(&other.re).map(|(&x, &y)| x * y).sum();
        let b: T = self.im.iter().zip(&other.im).map(|(&x, &y)| x * y).sum();
        a + b
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let d = |a: &[T], b: &[T]| {
            a.iter()
                .zip(b)
                .fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()))
        };
        d(&self.re, &other.re).max(d(&self.im, &other.im))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.shape == other.shape && self.centered == other.centered && self.dims == other.dims
    }

    pub(crate) fn into_parts(self) -> (Vec<T>, Vec<T>) {
        (self.re, self.im)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}
