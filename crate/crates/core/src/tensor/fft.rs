//! Centered discrete Fourier transforms along selected dimensions.
//!
//! Forward transforms are unnormalized; inverse transforms carry 1/N. After a
//! forward transform the zero-frequency bin of a length-`n` dimension sits at
//! index `n / 2`.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use super::{Spectrum, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Transforms every lane of `dim` in place, optionally un-shifting before
/// (inverse) or shifting after (forward) the transform.
fn transform_dim<T: Real>(
    re: &mut [T],
    im: &mut [T],
    shape: &[usize],
    dim: usize,
    direction: FftDirection,
) {
    let n = shape[dim];
    let inner: usize = shape[dim + 1..].iter().product();
    let outer: usize = shape[..dim].iter().product();
    let half = n / 2;
    if n == 1 {
        return;
    }
    let inverse = direction == FftDirection::Inverse;

    let mut buf = vec![Complex::new(T::zero(), T::zero()); outer * inner * n];
    for o in 0..outer {
        for i in 0..inner {
            let lane = &mut buf[(o * inner + i) * n..(o * inner + i + 1) * n];
            let base = o * n * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                // inverse: frequency k lives at centered index (k + n/2) % n
                let src = if inverse { (k + half) % n } else { k };
                let idx = base + src * inner;
                *slot = Complex::new(re[idx], im[idx]);
            }
        }
    }

    let fft = FftPlanner::<T>::new().plan_fft(n, direction);
    fft.process(&mut buf);

    let norm = if inverse {
        T::one() / T::of(n as f64)
    } else {
        T::one()
    };
    for o in 0..outer {
        for i in 0..inner {
            let lane = &buf[(o * inner + i) * n..(o * inner + i + 1) * n];
            let base = o * n * inner + i;
            for (k, v) in lane.iter().enumerate() {
                let dst = if inverse { k } else { (k + half) % n };
                let idx = base + dst * inner;
                re[idx] = v.re * norm;
                im[idx] = v.im * norm;
            }
        }
    }
}

fn normalize_dims(rank: usize, dims: &[usize]) -> Result<Vec<usize>> {
    if dims.is_empty() {
        return Err(Error::Dimension("no dimensions to transform".into()));
    }
    let mut d = dims.to_vec();
    d.sort_unstable();
    d.dedup();
    if let Some(&bad) = d.iter().find(|&&x| x >= rank) {
        return Err(Error::Dimension(format!(
            "dimension {bad} out of range for rank {rank}"
        )));
    }
    Ok(d)
}

fn last_two(rank: usize) -> Result<Vec<usize>> {
    if rank < 2 {
        return Err(Error::Dimension(format!(
            "2-D transform needs at least 2 dimensions, got {rank}"
        )));
    }
    Ok(vec![rank - 2, rank - 1])
}

impl<T: Real> Spectrum<T> {
    /// Forward centered transform of an arbitrary complex array.
    pub fn forward_centered(self, dims: &[usize]) -> Result<Spectrum<T>> {
        if self.centered {
            return Err(Error::Layout("spectrum is already centered".into()));
        }
        let dims = normalize_dims(self.shape.len(), dims)?;
        let shape = self.shape;
        let (mut re, mut im) = (self.re, self.im);
        for &d in &dims {
            transform_dim(&mut re, &mut im, &shape, d, FftDirection::Forward);
        }
        Ok(Spectrum::from_parts(shape, re, im, true, dims))
    }

    /// Inverse centered transform, keeping the complex result.
    pub fn inverse_centered(self, dims: &[usize]) -> Result<Spectrum<T>> {
        let dims = normalize_dims(self.shape.len(), dims)?;
        if !self.centered || self.dims != dims {
            return Err(Error::Layout(format!(
                "inverse over {dims:?} needs a spectrum centered over the same dimensions \
                 (centered={}, dims={:?})",
                self.centered, self.dims
            )));
        }
        let shape = self.shape;
        let (mut re, mut im) = (self.re, self.im);
        for &d in &dims {
            transform_dim(&mut re, &mut im, &shape, d, FftDirection::Inverse);
        }
        Ok(Spectrum::from_parts(shape, re, im, false, Vec::new()))
    }
}

/// Centered forward transform of a real tensor over `dims`.
pub fn fft_centered<T: Real>(t: &Tensor<T>, dims: &[usize]) -> Result<Spectrum<T>> {
    Spectrum::from_real(t).forward_centered(dims)
}

/// Centered inverse transform over `dims`; returns the real part and the
/// largest discarded imaginary magnitude.
pub fn ifft_centered<T: Real>(s: &Spectrum<T>, dims: &[usize]) -> Result<(Tensor<T>, T)> {
    let out = s.clone().inverse_centered(dims)?;
    let residual = out.im().iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let shape = out.shape().to_vec();
    let (re, _) = out.into_parts();
    Ok((Tensor::from_vec(shape, re), residual))
}

/// 2-D transform over the last two dimensions with the zero frequency moved
/// to `(H / 2, W / 2)`.
pub fn fft2_centered<T: Real>(t: &Tensor<T>) -> Result<Spectrum<T>> {
    let dims = last_two(t.rank())?;
    fft_centered(t, &dims)
}

pub fn ifft2_centered<T: Real>(s: &Spectrum<T>) -> Result<Tensor<T>> {
    ifft2_centered_with_residual(s).map(|(t, _)| t)
}

/// Like [`ifft2_centered`], also reporting the maximum absolute imaginary
/// residual that was dropped.
pub fn ifft2_centered_with_residual<T: Real>(s: &Spectrum<T>) -> Result<(Tensor<T>, T)> {
    let dims = last_two(s.shape().len())?;
    ifft_centered(s, &dims)
}

pub fn fft1_centered<T: Real>(t: &Tensor<T>, dim: usize) -> Result<Spectrum<T>> {
    fft_centered(t, &[dim])
}

pub fn ifft1_centered<T: Real>(s: &Spectrum<T>, dim: usize) -> Result<Tensor<T>> {
    ifft_centered(s, &[dim]).map(|(t, _)| t)
}

/// Adjoint of [`fft_centered`] restricted to real inputs:
/// `<fft(x), y> = <x, fft_centered_adjoint(y)>`.
pub fn fft_centered_adjoint<T: Real>(g: &Spectrum<T>, dims: &[usize]) -> Result<Tensor<T>> {
    let dims = normalize_dims(g.shape().len(), dims)?;
    let n: usize = dims.iter().map(|&d| g.shape()[d]).product();
    let (t, _) = ifft_centered(g, &dims)?;
    Ok(t.scale(T::of(n as f64)))
}

/// Adjoint of "inverse transform then keep the real part": the real
/// gradient enters the real channel only.
pub fn ifft_centered_real_adjoint<T: Real>(g: &Tensor<T>, dims: &[usize]) -> Result<Spectrum<T>> {
    let dims = normalize_dims(g.rank(), dims)?;
    let n: usize = dims.iter().map(|&d| g.shape()[d]).product();
    let mut s = fft_centered(g, &dims)?;
    let inv = T::one() / T::of(n as f64);
    s.re_mut().iter_mut().for_each(|v| *v = *v * inv);
    s.im_mut().iter_mut().for_each(|v| *v = *v * inv);
    Ok(s)
}
