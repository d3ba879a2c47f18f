//! High-frequency extraction for images and feature maps, and the
//! frequency convolutional layer.
//!
//! Masks zero the central low-frequency block of a centered spectrum: bin
//! `(i, j)` is dropped iff `|i - h/2| < h * cut` and `|j - w/2| < w * cut`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{project, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which axes a high-pass filter acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDims {
    /// Height and width of each channel plane.
    Spatial,
    /// The channel axis at every pixel.
    Channel,
}

/// Geometry of the high-pass mask. The cut fraction is kept as an exact
/// rational so the mask predicate is evaluated in integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSpec {
    num: u32,
    den: u32,
    pub dims: FilterDims,
}

impl FilterSpec {
    pub fn new(num: u32, den: u32, dims: FilterDims) -> Result<Self> {
        if num == 0 || den == 0 || 2 * num as u64 >= den as u64 {
            return Err(Error::Config(format!(
                "cut fraction {num}/{den} must lie strictly between 0 and 1/2"
            )));
        }
        Ok(FilterSpec { num, den, dims })
    }

    /// The default quarter cut over the spatial axes.
    pub fn spatial() -> Self {
        FilterSpec { num: 1, den: 4, dims: FilterDims::Spatial }
    }

    pub fn channel() -> Self {
        FilterSpec { num: 1, den: 4, dims: FilterDims::Channel }
    }

    pub fn with_dims(self, dims: FilterDims) -> Self {
        FilterSpec { dims, ..self }
    }

    pub fn cut(&self) -> (u32, u32) {
        (self.num, self.den)
    }

    pub fn fraction(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Whether the bin at centered index `i` of a length-`extent` axis lies
    /// inside the cut band.
    pub fn in_band(&self, i: usize, extent: usize) -> bool {
        let offset = (i as i64 - (extent / 2) as i64).unsigned_abs();
        offset * (self.den as u64) < extent as u64 * self.num as u64
    }
}

/// Parses `a/b` or a decimal fraction with an exact binary-free form such as
/// `0.25`.
impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (num, den) = if let Some((a, b)) = s.split_once('/') {
            let parse = |v: &str| {
                v.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Config(format!("bad cut fraction {s:?}")))
            };
            (parse(a)?, parse(b)?)
        } else {
            let (int, frac) = s.split_once('.').unwrap_or((s, ""));
            if int != "0" || frac.is_empty() || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(Error::Config(format!("bad cut fraction {s:?}")));
            }
            let num: u32 = frac.parse().map_err(|_| Error::Config(format!("bad cut fraction {s:?}")))?;
            (num, 10u32.pow(frac.len() as u32))
        };
        FilterSpec::new(num, den, FilterDims::Spatial)
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// `h x w` mask of ones with the central low-frequency block zeroed.
pub fn highpass_mask<T: Real>(h: usize, w: usize, spec: &FilterSpec) -> Tensor<T> {
    Tensor::from_fn(&[h.max(1), w.max(1)], |idx| {
        let (i, j) = (idx / w.max(1), idx % w.max(1));
        if spec.in_band(i, h) && spec.in_band(j, w) {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// Length-`c` mask over channel frequencies.
pub fn channel_highpass_mask<T: Real>(c: usize, spec: &FilterSpec) -> Tensor<T> {
    Tensor::from_fn(&[c.max(1)], |i| if spec.in_band(i, c) { T::zero() } else { T::one() })
}

/// High-frequency residual of an image batch (N x C x H x W): centered 2-D
/// transform per plane, high-pass mask, inverse transform, real part.
pub fn hfri<T: Real>(x: &Tensor<T>, spec: &FilterSpec) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("hfri needs N x C x H x W, got {:?}", x.shape())));
    }
    let mask = highpass_mask::<T>(x.shape()[2], x.shape()[3], spec);
    project(x, &[2, 3], &mask)
}

/// Differentiable spatial high-pass of a feature map (N x C x H x W).
pub fn hfrf_spatial<T: Real>(tape: &mut Tape<T>, m: Var, spec: &FilterSpec) -> Result<Var> {
    let shape = tape.tensor(m)?.shape().to_vec();
    if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
        return Err(Error::Shape(format!(
            "spatial high-pass needs N x C x H x W with H, W >= 2, got {shape:?}"
        )));
    }
    let mask = highpass_mask::<T>(shape[2], shape[3], spec);
    tape.spectral_projection(m, &[2, 3], &mask)
}

/// Differentiable channel-axis high-pass of a feature map (N x C x H x W).
pub fn hfrf_channel<T: Real>(tape: &mut Tape<T>, m: Var, spec: &FilterSpec) -> Result<Var> {
    let shape = tape.tensor(m)?.shape().to_vec();
    if shape.len() != 4 || shape[1] < 2 {
        return Err(Error::Shape(format!(
            "channel high-pass needs N x C x H x W with C >= 2, got {shape:?}"
        )));
    }
    let mask = channel_highpass_mask::<T>(shape[1], spec);
    tape.spectral_projection(m, &[1], &mask)
}

/// How a spectrum is split into the two components the layer convolves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FclMode {
    /// Real and imaginary parts, recombined as `a + b i`.
    #[default]
    Cartesian,
    /// Magnitude and phase, recombined as `a exp(b i)`.
    Polar,
}

impl FromStr for FclMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cartesian" => Ok(FclMode::Cartesian),
            "polar" => Ok(FclMode::Polar),
            other => Err(Error::Config(format!("unknown fcl mode {other:?}"))),
        }
    }
}

impl fmt::Display for FclMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FclMode::Cartesian => "cartesian",
            FclMode::Polar => "polar",
        })
    }
}

/// 1x1 convolutions (C x C x 1 x 1 weights, C biases) applied to the two
/// spectrum components. Tied layers pass the same vars for both.
#[derive(Clone, Copy, Debug)]
pub struct FclParams {
    pub w_am: Var,
    pub b_am: Var,
    pub w_ph: Var,
    pub b_ph: Var,
}

/// Frequency convolutional layer: transform the feature map over H x W,
/// convolve both spectrum components, recombine, inverse transform and keep
/// the real part.
pub fn fcl<T: Real>(tape: &mut Tape<T>, m: Var, p: &FclParams, mode: FclMode) -> Result<Var> {
    let shape = tape.tensor(m)?.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("fcl needs N x C x H x W, got {shape:?}")));
    }
    let c = shape[1];
    for w in [p.w_am, p.w_ph] {
        let ws = tape.tensor(w)?.shape();
        if ws != [c, c, 1, 1] {
            return Err(Error::Shape(format!(
                "fcl weight {ws:?} does not match {c} feature channels"
            )));
        }
    }
    let f = tape.fft(m, &[2, 3])?;
    let (a, b) = match mode {
        FclMode::Cartesian => (tape.real_part(f)?, tape.imag_part(f)?),
        FclMode::Polar => (tape.abs(f)?, tape.angle(f)?),
    };
    let a2 = tape.conv2d(a, p.w_am, p.b_am, 1, 0)?;
    let b2 = tape.conv2d(b, p.w_ph, p.b_ph, 1, 0)?;
    let g = match mode {
        FclMode::Cartesian => tape.cartesian(a2, b2, f)?,
        FclMode::Polar => tape.polar(a2, b2, f)?,
    };
    tape.ifft_real(g, &[2, 3])
}
