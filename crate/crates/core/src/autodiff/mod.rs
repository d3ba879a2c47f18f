//! Tape-based reverse-mode differentiation over tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is a
//! valid topological order by construction. [`Tape::backward`] walks the
//! tape in reverse and returns a [`Gradients`] store. Complex-valued nodes
//! (spectra) carry their gradient as a complex array whose real and
//! imaginary parts are the partial derivatives with respect to the real and
//! imaginary components.

mod conv;

use crate::error::{Error, Result};
use crate::real::{matmul, MatRef, Real};
use crate::tensor::{fft_centered, fft_centered_adjoint, ifft_centered, ifft_centered_real_adjoint};
use crate::tensor::{Spectrum, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(Spectrum<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: conv::ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Fft { x: Var, dims: Vec<usize> },
    IfftReal { s: Var, dims: Vec<usize> },
    Mask { s: Var, mask: Vec<T> },
    Projection { x: Var, dims: Vec<usize>, mask: Tensor<T> },
    RealPart { s: Var },
    ImagPart { s: Var },
    Abs { s: Var },
    Angle { s: Var },
    Cartesian { re: Var, im: Var },
    Polar { am: Var, ph: Var },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Real(t), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Real(t), Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Value<T> {
        &self.nodes[v.0].value
    }

    /// Real value of a node; errors on spectra.
    pub fn tensor(&self, v: Var) -> Result<&Tensor<T>> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => Err(Error::Contract(format!("node {} is complex", v.0))),
        }
    }

    pub fn spectrum(&self, v: Var) -> Result<&Spectrum<T>> {
        match &self.nodes[v.0].value {
            Value::Complex(s) => Ok(s),
            Value::Real(_) => Err(Error::Contract(format!("node {} is real", v.0))),
        }
    }

    /// Cross-correlation with zero padding. `x` is N x Cin x H x W, `w` is
    /// Cout x Cin x kh x kw and `b` has Cout entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.tensor(x)?, self.tensor(w)?, self.tensor(b)?);
        let (xs, ws) = (xt.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(format!("conv2d needs 4-d input and kernel, got {xs:?} and {ws:?}")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive"));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if bt.numel() != ws[0] {
            return Err(shape_err(format!("conv2d bias has {} entries for {} outputs", bt.numel(), ws[0])));
        }
        let out_extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k {
                return Err(shape_err(format!(
                    "conv2d output extent is not positive (input {len}, pad {pad}, kernel {k})"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = conv::ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: out_extent(xs[2], ws[2])?,
            wo: out_extent(xs[3], ws[3])?,
        };
        let y = conv::forward(xt.data(), wt.data(), bt.data(), &geom);
        let out = Tensor::from_vec(vec![geom.n, geom.cout, geom.ho, geom.wo], y);
        let rg = self.grad_of(&[x, w, b]);
        Ok(self.push(Value::Real(out), Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel batch normalization over N, H, W. In train mode the batch
    /// statistics normalize the input and `stats` is updated with momentum
    /// 0.1 (unbiased variance); in eval mode `stats` is used as is.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (xt, gt, bt) = (self.tensor(x)?, self.tensor(gamma)?, self.tensor(beta)?);
        let s = xt.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("batchnorm2d needs N x C x H x W, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if gt.numel() != c || bt.numel() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err(format!("batchnorm2d parameters do not match {c} channels")));
        }
        let eps = T::of(BN_EPS);
        let m = n * hw;
        let data = xt.data();
        let channel = |ch: usize| (0..n).flat_map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut means = Vec::with_capacity(c);
                let mut invs = Vec::with_capacity(c);
                let mf = T::of(m as f64);
                for ch in 0..c {
                    let slices = || (0..n).map(|i| &data[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
                    let mu = slices().map(|p| p.iter().copied().sum::<T>()).sum::<T>() / mf;
                    let var = slices().map(|p| p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>()).sum::<T>() / mf;
                    let unbiased = if m > 1 { var * mf / T::of((m - 1) as f64) } else { var };
                    let mom = T::of(BN_MOMENTUM);
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mu;
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                    means.push(mu);
                    invs.push(T::one() / (var + eps).sqrt());
                }
                (means, invs)
            }
            Mode::Eval => (
                stats.mean.clone(),
                stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        };
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ch in 0..c {
            let (g, b) = (gt.data()[ch], bt.data()[ch]);
            for i in channel(ch) {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
        let value = Tensor::from_vec(s.to_vec(), out);
        let rg = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            Value::Real(value),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.tensor(x)?.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Real(y), Op::Relu { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.tensor(a)?.zip_map(self.tensor(b)?, |p, q| p + q)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Value::Real(y), Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.tensor(a)?.zip_map(self.tensor(b)?, |p, q| p * q)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Value::Real(y), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.tensor(x)?.scale(s);
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Real(y), Op::Scale { x, s }, rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.tensor(x)?.sum());
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Real(y), Op::Sum { x }, rg))
    }

    /// Mean over H x W; N x C x H x W becomes N x C x 1 x 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.tensor(x)?;
        let s = xt.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("global_avg_pool needs N x C x H x W, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data = xt.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let y = Tensor::from_vec(vec![s[0], s[1], 1, 1], data);
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Real(y), Op::GlobalAvgPool { x }, rg))
    }

    /// `x w^T + b` with `x` flattened to N x F, `w` of shape O x F.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.tensor(x)?, self.tensor(w)?, self.tensor(b)?);
        let n = xt.shape()[0];
        let f = xt.numel() / n;
        if wt.rank() != 2 || wt.shape()[1] != f || bt.numel() != wt.shape()[0] {
            return Err(shape_err(format!(
                "linear: input features {f}, weight {:?}, bias {:?}",
                wt.shape(),
                bt.shape()
            )));
        }
        let o = wt.shape()[0];
        let mut y = vec![T::zero(); n * o];
        matmul(MatRef::new(xt.data(), n, f), MatRef::new(wt.data(), o, f).t(), &mut y, false);
        for row in y.chunks_mut(o) {
            for (v, &bias) in row.iter_mut().zip(bt.data()) {
                *v = *v + bias;
            }
        }
        let rg = self.grad_of(&[x, w, b]);
        Ok(self.push(Value::Real(Tensor::from_vec(vec![n, o], y)), Op::Linear { x, w, b }, rg))
    }

    /// Mean negative log-likelihood of `labels` under the row softmax of
    /// `logits` (N x K).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.tensor(logits)?;
        if lt.rank() != 2 || lt.shape()[0] != labels.len() {
            return Err(shape_err(format!(
                "cross entropy: logits {:?} for {} labels",
                lt.shape(),
                labels.len()
            )));
        }
        let k = lt.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(lt.numel());
        let mut loss = T::zero();
        for (row, &label) in lt.data().chunks(k).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            loss = loss + (log_z - row[label]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = loss / T::of(labels.len() as f64);
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Value::Real(Tensor::scalar(loss)),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Centered forward transform of a real node over `dims`.
    pub fn fft(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let s = fft_centered(self.tensor(x)?, dims)?;
        let dims = s.dims().to_vec();
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Complex(s), Op::Fft { x, dims }, rg))
    }

    /// Centered inverse transform keeping the real part.
    pub fn ifft_real(&mut self, s: Var, dims: &[usize]) -> Result<Var> {
        let (t, _) = ifft_centered(self.spectrum(s)?, dims)?;
        let dims = self.spectrum(s)?.dims().to_vec();
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Real(t), Op::IfftReal { s, dims }, rg))
    }

    /// Multiplies a centered spectrum by a real mask defined over its
    /// transformed dimensions and broadcast over the rest.
    pub fn mask(&mut self, s: Var, mask: &Tensor<T>) -> Result<Var> {
        let spec = self.spectrum(s)?;
        let full = expand_mask(spec, mask)?;
        let mut out = spec.clone();
        for (i, &m) in full.iter().enumerate() {
            out.re_mut()[i] = out.re()[i] * m;
            out.im_mut()[i] = out.im()[i] * m;
        }
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Complex(out), Op::Mask { s, mask: full }, rg))
    }

    /// `Re(ifft(mask * fft(x)))` over `dims` as one node. The mask must be
    /// unchanged by the reflection `k -> -k` of every transformed axis; the
    /// map is then an orthogonal projection and is its own adjoint.
    pub fn spectral_projection(&mut self, x: Var, dims: &[usize], mask: &Tensor<T>) -> Result<Var> {
        if !reflection_symmetric(mask) {
            return Err(Error::Contract("spectral projection needs a reflection-symmetric mask".into()));
        }
        let y = project(self.tensor(x)?, dims, mask)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Value::Real(y), Op::Projection { x, dims: dims.to_vec(), mask: mask.clone() }, rg))
    }

    pub fn real_part(&mut self, s: Var) -> Result<Var> {
        let t = self.spectrum(s)?.real_part();
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Real(t), Op::RealPart { s }, rg))
    }

    pub fn imag_part(&mut self, s: Var) -> Result<Var> {
        let t = self.spectrum(s)?.imag_part();
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Real(t), Op::ImagPart { s }, rg))
    }

    pub fn abs(&mut self, s: Var) -> Result<Var> {
        let t = self.spectrum(s)?.magnitude();
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Real(t), Op::Abs { s }, rg))
    }

    /// Phase angle `atan2(im, re)`; zero at the origin.
    pub fn angle(&mut self, s: Var) -> Result<Var> {
        let spec = self.spectrum(s)?;
        let data = spec
            .re()
            .iter()
            .zip(spec.im())
            .map(|(&a, &b)| if a == T::zero() && b == T::zero() { T::zero() } else { b.atan2(a) })
            .collect();
        let t = Tensor::from_vec(spec.shape().to_vec(), data);
        let rg = self.grad_of(&[s]);
        Ok(self.push(Value::Real(t), Op::Angle { s }, rg))
    }

    /// `re + im i`, taking the spectral layout from `like`.
    pub fn cartesian(&mut self, re: Var, im: Var, like: Var) -> Result<Var> {
        let (a, b) = (self.tensor(re)?, self.tensor(im)?);
        a.expect_shape(b.shape())?;
        let template = self.spectrum(like)?;
        let out = Spectrum::new(
            a.shape().to_vec(),
            a.data().to_vec(),
            b.data().to_vec(),
            template.is_centered(),
            template.dims().to_vec(),
        )?;
        let rg = self.grad_of(&[re, im]);
        Ok(self.push(Value::Complex(out), Op::Cartesian { re, im }, rg))
    }

    /// `am * exp(i ph)`, taking the spectral layout from `like`.
    pub fn polar(&mut self, am: Var, ph: Var, like: Var) -> Result<Var> {
        let (a, p) = (self.tensor(am)?, self.tensor(ph)?);
        a.expect_shape(p.shape())?;
        let template = self.spectrum(like)?;
        let (re, im) = a
            .data()
            .iter()
            .zip(p.data())
            .map(|(&r, &t)| (r * t.cos(), r * t.sin()))
            .unzip();
        let out = Spectrum::new(
            a.shape().to_vec(),
            re,
            im,
            template.is_centered(),
            template.dims().to_vec(),
        )?;
        let rg = self.grad_of(&[am, ph]);
        Ok(self.push(Value::Complex(out), Op::Polar { am, ph }, rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.tensor(loss)?;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Real(Tensor::full(lt.shape(), T::one())));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Value<T>, grads: &mut [Option<Value<T>>]) -> Result<()> {
        let real = |g: &Value<T>| -> Result<Tensor<T>> {
            match g {
                Value::Real(t) => Ok(t.clone()),
                Value::Complex(_) => Err(Error::Contract("complex gradient on real node".into())),
            }
        };
        let cplx = |g: &Value<T>| -> Result<Spectrum<T>> {
            match g {
                Value::Complex(s) => Ok(s.clone()),
                Value::Real(_) => Err(Error::Contract("real gradient on complex node".into())),
            }
        };
        let mut acc = |v: Var, delta: Value<T>| self.accumulate(grads, v, delta);

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let gy = real(g)?;
                let need_dx = self.requires_grad(*x);
                let cg = conv::backward(self.tensor(*x)?.data(), self.tensor(*w)?.data(), gy.data(), geom, need_dx);
                if let Some(dx) = cg.dx {
                    acc(*x, Value::Real(Tensor::from_vec(self.tensor(*x)?.shape().to_vec(), dx)))?;
                }
                acc(*w, Value::Real(Tensor::from_vec(self.tensor(*w)?.shape().to_vec(), cg.dw)))?;
                acc(*b, Value::Real(Tensor::from_vec(self.tensor(*b)?.shape().to_vec(), cg.db)))?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let gy = real(g)?;
                let s = gy.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = T::of((n * hw) as f64);
                let gam = self.tensor(*gamma)?.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gy.numel()];
                let gd = gy.data();
                for ch in 0..c {
                    let idx = (0..n).flat_map(|i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for i in 0..n {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        sg = sg + gd[r.clone()].iter().copied().sum::<T>();
                        sgx = sgx + gd[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                    let k = gam[ch] * inv_std[ch];
                    for i in idx {
                        dx[i] = if *batch_stats {
                            k / m * (m * gd[i] - sg - xhat[i] * sgx)
                        } else {
                            k * gd[i]
                        };
                    }
                }
                acc(*x, Value::Real(Tensor::from_vec(s.to_vec(), dx)))?;
                acc(*gamma, Value::Real(Tensor::from_vec(vec![c], dgamma)))?;
                acc(*beta, Value::Real(Tensor::from_vec(vec![c], dbeta)))?;
            }
            Op::Relu { x } => {
                let gy = real(g)?;
                let dx = gy.zip_map(self.tensor(*x)?, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                acc(*x, Value::Real(dx))?;
            }
            Op::Add { a, b } => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul { a, b } => {
                let gy = real(g)?;
                acc(*a, Value::Real(gy.zip_map(self.tensor(*b)?, |p, q| p * q)?))?;
                acc(*b, Value::Real(gy.zip_map(self.tensor(*a)?, |p, q| p * q)?))?;
            }
            Op::Scale { x, s } => {
                acc(*x, Value::Real(real(g)?.scale(*s)))?;
            }
            Op::Sum { x } => {
                let gv = real(g)?.data()[0];
                acc(*x, Value::Real(Tensor::full(self.tensor(*x)?.shape(), gv)))?;
            }
            Op::GlobalAvgPool { x } => {
                let gy = real(g)?;
                let xs = self.tensor(*x)?.shape().to_vec();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::of(hw as f64);
                let dx = gy.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                acc(*x, Value::Real(Tensor::from_vec(xs, dx)))?;
            }
            Op::Linear { x, w, b } => {
                let gy = real(g)?;
                let (xt, wt) = (self.tensor(*x)?, self.tensor(*w)?);
                let (o, f) = (wt.shape()[0], wt.shape()[1]);
                let n = xt.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    matmul(MatRef::new(gy.data(), n, o), MatRef::new(wt.data(), o, f), &mut dx, false);
                    acc(*x, Value::Real(Tensor::from_vec(xt.shape().to_vec(), dx)))?;
                }
                let mut dw = vec![T::zero(); o * f];
                matmul(MatRef::new(gy.data(), n, o).t(), MatRef::new(xt.data(), n, f), &mut dw, false);
                acc(*w, Value::Real(Tensor::from_vec(vec![o, f], dw)))?;
                let mut db = vec![T::zero(); o];
                for row in gy.data().chunks(o) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                acc(*b, Value::Real(Tensor::from_vec(vec![o], db)))?;
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let gv = real(g)?.data()[0];
                let shape = self.tensor(*logits)?.shape().to_vec();
                let k = shape[1];
                let scale = gv / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * scale);
                acc(*logits, Value::Real(Tensor::from_vec(shape, d)))?;
            }
            Op::Fft { x, dims } => {
                acc(*x, Value::Real(fft_centered_adjoint(&cplx(g)?, dims)?))?;
            }
            Op::IfftReal { s, dims } => {
                acc(*s, Value::Complex(ifft_centered_real_adjoint(&real(g)?, dims)?))?;
            }
            Op::Mask { s, mask } => {
                let mut gs = cplx(g)?;
                for (i, &m) in mask.iter().enumerate() {
                    gs.re_mut()[i] = gs.re()[i] * m;
                    gs.im_mut()[i] = gs.im()[i] * m;
                }
                acc(*s, Value::Complex(gs))?;
            }
            Op::Projection { x, dims, mask } => {
                acc(*x, Value::Real(project(&real(g)?, dims, mask)?))?;
            }
            Op::RealPart { s } | Op::ImagPart { s } => {
                let gy = real(g)?;
                let mut gs = self.spectrum(*s)?.zeros_like();
                let dst = if matches!(node.op, Op::RealPart { .. }) { gs.re_mut() } else { gs.im_mut() };
                dst.copy_from_slice(gy.data());
                acc(*s, Value::Complex(gs))?;
            }
            Op::Abs { s } | Op::Angle { s } => {
                let gy = real(g)?;
                let spec = self.spectrum(*s)?;
                let mut gs = spec.zeros_like();
                let is_abs = matches!(node.op, Op::Abs { .. });
                for i in 0..spec.numel() {
                    let (a, b) = (spec.re()[i], spec.im()[i]);
                    let r2 = a * a + b * b;
                    if r2 == T::zero() {
                        continue;
                    }
                    let (dre, dim) = if is_abs {
                        let r = r2.sqrt();
                        (a / r, b / r)
                    } else {
                        (-b / r2, a / r2)
                    };
                    gs.re_mut()[i] = gy.data()[i] * dre;
                    gs.im_mut()[i] = gy.data()[i] * dim;
                }
                acc(*s, Value::Complex(gs))?;
            }
            Op::Cartesian { re, im } => {
                let gs = cplx(g)?;
                acc(*re, Value::Real(gs.real_part()))?;
                acc(*im, Value::Real(gs.imag_part()))?;
            }
            Op::Polar { am, ph } => {
                let gs = cplx(g)?;
                let (a, p) = (self.tensor(*am)?, self.tensor(*ph)?);
                let mut da = Vec::with_capacity(a.numel());
                let mut dp = Vec::with_capacity(a.numel());
                for i in 0..a.numel() {
                    let (c, s) = (p.data()[i].cos(), p.data()[i].sin());
                    let (gr, gi) = (gs.re()[i], gs.im()[i]);
                    da.push(gr * c + gi * s);
                    dp.push(a.data()[i] * (gi * c - gr * s));
                }
                acc(*am, Value::Real(Tensor::from_vec(a.shape().to_vec(), da)))?;
                acc(*ph, Value::Real(Tensor::from_vec(a.shape().to_vec(), dp)))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Value<T>>], v: Var, delta: Value<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        match (slot.as_mut(), delta) {
            (None, d) => *slot = Some(d),
            (Some(Value::Real(t)), Value::Real(d)) => {
                t.data_mut().iter_mut().zip(d.data()).for_each(|(a, &b)| *a = *a + b);
            }
            (Some(Value::Complex(s)), Value::Complex(d)) => {
                s.re_mut().iter_mut().zip(d.re()).for_each(|(a, &b)| *a = *a + b);
                s.im_mut().iter_mut().zip(d.im()).for_each(|(a, &b)| *a = *a + b);
            }
            _ => return Err(Error::Contract("gradient kind mismatch".into())),
        }
        Ok(())
    }
}

/// Whether `mask[i] == mask[reflect(i)]`, where a centered index `i` of an
/// axis of length `n` reflects to `(2 * (n / 2) - i) mod n`.
fn reflection_symmetric<T: Real>(mask: &Tensor<T>) -> bool {
    let shape = mask.shape();
    let rank = shape.len();
    (0..mask.numel()).all(|flat| {
        let mut rest = flat;
        let mut partner = 0;
        let mut stride = 1;
        for d in (0..rank).rev() {
            let n = shape[d];
            let i = rest % n;
            rest /= n;
            partner += ((2 * (n / 2) + n - i) % n) * stride;
            stride *= n;
        }
        mask.data()[flat] == mask.data()[partner]
    })
}

/// `Re(ifft(mask * fft(t)))` over `dims`.
pub(crate) fn project<T: Real>(t: &Tensor<T>, dims: &[usize], mask: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = fft_centered(t, dims)?;
    let full = expand_mask(&s, mask)?;
    for (v, &m) in s.re_mut().iter_mut().zip(&full) {
        *v = *v * m;
    }
    for (v, &m) in s.im_mut().iter_mut().zip(&full) {
        *v = *v * m;
    }
    ifft_centered(&s, dims).map(|(t, _)| t)
}

fn expand_mask<T: Real>(spec: &Spectrum<T>, mask: &Tensor<T>) -> Result<Vec<T>> {
    let shape = spec.shape();
    let dims = spec.dims();
    let want: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    if !spec.is_centered() || mask.shape() != want.as_slice() {
        return Err(shape_err(format!(
            "mask of shape {:?} does not fit a spectrum transformed over extents {want:?}",
            mask.shape()
        )));
    }
    let md = mask.data();
    let contiguous = dims.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous {
        let inner: usize = shape[dims[dims.len() - 1] + 1..].iter().product();
        let mut out = Vec::with_capacity(spec.numel());
        while out.len() < spec.numel() {
            for &m in md {
                out.extend(std::iter::repeat_n(m, inner));
            }
        }
        return Ok(out);
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut mstrides = vec![0usize; rank];
    let mut acc = 1;
    for &d in dims.iter().rev() {
        mstrides[d] = acc;
        acc *= shape[d];
    }
    Ok((0..spec.numel())
        .map(|flat| {
            let idx: usize = (0..rank).map(|d| (flat / strides[d]) % shape[d] * mstrides[d]).sum();
            md[idx]
        })
        .collect())
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Value<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Value<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Real gradient of `v`; `None` when `v` received no gradient.
    pub fn real(&self, v: Var) -> Option<&Tensor<T>> {
        match self.get(v) {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    pub fn complex(&self, v: Var) -> Option<&Spectrum<T>> {
        match self.get(v) {
            Some(Value::Complex(s)) => Some(s),
            _ => None,
        }
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn real_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.real(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
