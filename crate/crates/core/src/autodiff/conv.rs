//! Batched im2col convolution kernels.

use rayon::prelude::*;

use crate::real::{matmul, MatRef, Real};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose kernel tap `kj` lands inside a row of
/// width `w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if g.w + g.pad <= kj { 0 } else { ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.wo) };
    (lo, hi.max(lo))
}

/// Input row read by output row `oy` at kernel tap `ki`, if inside.
fn src_row(g: &ConvGeom, oy: usize, ki: usize) -> Option<usize> {
    let iy = (oy * g.stride + ki).checked_sub(g.pad)?;
    (iy < g.h).then_some(iy)
}

/// Column matrix of shape `[cin*kh*kw, n*ho*wo]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![T::zero(); g.k() * np];
    cols.par_chunks_mut(np).enumerate().for_each(|(r, row)| {
        let c = r / (g.kh * g.kw);
        let ki = (r / g.kw) % g.kh;
        let kj = r % g.kw;
        let (lo, hi) = valid_cols(g, kj);
        for n in 0..g.n {
            let plane = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
            let out = &mut row[n * p..(n + 1) * p];
            for oy in 0..g.ho {
                let Some(iy) = src_row(g, oy, ki) else { continue };
                let src = &plane[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if g.stride == 1 {
                    dst[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                } else {
                    for ox in lo..hi {
                        dst[ox] = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    });
    cols
}

/// Scatter-adds a column-gradient matrix back onto an input-shaped buffer.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    dx.par_chunks_mut(g.h * g.w)
        .enumerate()
        .for_each(|(plane_idx, plane)| {
            let n = plane_idx / g.cin;
            let c = plane_idx % g.cin;
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[r * np + n * p..r * np + (n + 1) * p];
                    let (lo, hi) = valid_cols(g, kj);
                    for oy in 0..g.ho {
                        let Some(iy) = src_row(g, oy, ki) else { continue };
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        let s = &src[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let off = kj as isize - g.pad as isize;
                            for ox in lo..hi {
                                let d = &mut dst[(ox as isize + off) as usize];
                                *d = *d + s[ox];
                            }
                        } else {
                            for ox in lo..hi {
                                let d = &mut dst[ox * g.stride + kj - g.pad];
                                *d = *d + s[ox];
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let cols = im2col(x, g);
    let mut y = vec![T::zero(); g.cout * np];
    matmul(
        MatRef::new(w, g.cout, g.k()),
        MatRef::new(&cols, g.k(), np),
        &mut y,
        false,
    );
    let mut out = vec![T::zero(); g.n * g.cout * p];
    out.par_chunks_mut(p).enumerate().for_each(|(idx, dst)| {
        let n = idx / g.cout;
        let co = idx % g.cout;
        let src = &y[co * np + n * p..co * np + (n + 1) * p];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s + b[co];
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let (p, np) = (g.p(), g.n * g.p());
    // gy is n x cout x p; rearrange to cout x (n p)
    let mut gmat = vec![T::zero(); g.cout * np];
    gmat.par_chunks_mut(np).enumerate().for_each(|(co, row)| {
        for n in 0..g.n {
            row[n * p..(n + 1) * p].copy_from_slice(&gy[(n * g.cout + co) * p..(n * g.cout + co + 1) * p]);
        }
    });
    let db = gmat.chunks(np).map(|row| row.iter().copied().sum()).collect();
    let cols = im2col(x, g);
    let mut dw = vec![T::zero(); g.cout * g.k()];
    matmul(
        MatRef::new(&gmat, g.cout, np),
        MatRef::new(&cols, g.k(), np).t(),
        &mut dw,
        false,
    );
    let dx = need_dx.then(|| {
        let mut dcols = cols;
        matmul(
            MatRef::new(w, g.cout, g.k()).t(),
            MatRef::new(&gmat, g.cout, np),
            &mut dcols,
            false,
        );
        col2im(&dcols, g)
    });
    ConvGrads { dx, dw, db }
}
