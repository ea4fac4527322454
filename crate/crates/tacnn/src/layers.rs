//! Neural-network layer primitives: grouped 2-D convolution, batch
//! normalization, squeeze-and-excitation channel attention, pooling,
//! dropout and the linear head.
//!
//! Convolution runs as im2col + a small GEMM per (batch item, group);
//! the direct nested-loop formulation lives in the test suites as the
//! independent oracle.

use std::sync::RwLock;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tape::{Ctx, Tape, Var};
use crate::tensor::{Element, Tensor4};

/// Declarative description of a grouped 2-D convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub groups: usize,
    pub stride: usize,
    pub padding: (usize, usize),
    pub bias: bool,
}

impl Conv2dSpec {
    /// Stride-1 convolution with explicit padding; the common case here.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize), groups: usize, padding: (usize, usize)) -> Self {
        Conv2dSpec { in_channels, out_channels, kernel, groups, stride: 1, padding, bias: true }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1), 1, (0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("conv spec has zero extent: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "channels not divisible by groups: in {} out {} groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::config(format!("conv kernel/stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn out_dims(&self, in_dims: [usize; 4]) -> Result<[usize; 4]> {
        self.validate()?;
        if in_dims[1] != self.in_channels {
            return Err(Error::shape(format!(
                "conv input has {} channels, spec expects {}",
                in_dims[1], self.in_channels
            )));
        }
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        let h = in_dims[2] + 2 * ph;
        let w = in_dims[3] + 2 * pw;
        if h < kh || w < kw {
            return Err(Error::shape(format!(
                "conv kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let oh = (h - kh) / self.stride + 1;
        let ow = (w - kw) / self.stride + 1;
        Ok([in_dims[0], self.out_channels, oh, ow])
    }

    /// Trainable scalar count: `out * (in/groups) * kh * kw (+ out if bias)`.
    pub fn param_count(&self) -> u64 {
        let w = self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        let b = if self.bias { self.out_channels } else { 0 };
        (w + b) as u64
    }

    /// Multiply-accumulates for a given output shape:
    /// `out_numel * (in/groups) * kh * kw`. Bias adds are not counted.
    pub fn macs(&self, out_dims: [usize; 4]) -> u64 {
        let per_pos = (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        (out_dims.iter().product::<usize>() * per_pos) as u64
    }
}

// ---- raw kernels --------------------------------------------------------

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
fn gemm_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out[m x n2] += a[m x k] * b[n2 x k]^T`.
fn gemm_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n2: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n2 {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n2 + j] = out[i * n2 + j] + acc;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
fn gemm_tn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

struct ConvGeom {
    icg: usize,
    ocg: usize,
    oh: usize,
    ow: usize,
    kdim: usize,
    positions: usize,
}

fn conv_geom(spec: &Conv2dSpec, out_dims: [usize; 4]) -> ConvGeom {
    let icg = spec.in_channels / spec.groups;
    ConvGeom {
        icg,
        ocg: spec.out_channels / spec.groups,
        oh: out_dims[2],
        ow: out_dims[3],
        kdim: icg * spec.kernel.0 * spec.kernel.1,
        positions: out_dims[2] * out_dims[3],
    }
}

/// Gathers one (batch item, group) patch matrix: `col[kdim x positions]`.
fn im2col<E: Element>(
    x: &Tensor4<E>,
    n: usize,
    ch_base: usize,
    spec: &Conv2dSpec,
    geom: &ConvGeom,
    col: &mut [E],
) {
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding;
    let d = x.dims();
    let (hh, ww) = (d[2], d[3]);
    let xs = x.strides();
    let data = x.data();
    for v in col.iter_mut() {
        *v = E::zero();
    }
    for icl in 0..geom.icg {
        let c = ch_base + icl;
        let x_off = n * xs[0] + c * xs[1];
        for p in 0..kh {
            for q in 0..kw {
                let krow = (icl * kh * kw + p * kw + q) * geom.positions;
                for oh_i in 0..geom.oh {
                    let ih = oh_i * spec.stride + p;
                    if ih < ph || ih - ph >= hh {
                        continue;
                    }
                    let row_off = x_off + (ih - ph) * xs[2];
                    for ow_i in 0..geom.ow {
                        let iw = ow_i * spec.stride + q;
                        if iw < pw || iw - pw >= ww {
                            continue;
                        }
                        col[krow + oh_i * geom.ow + ow_i] = data[row_off + (iw - pw)];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back into the input gradient.
fn col2im_acc<E: Element>(
    dcol: &[E],
    n: usize,
    ch_base: usize,
    spec: &Conv2dSpec,
    geom: &ConvGeom,
    dx: &mut Tensor4<E>,
) {
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding;
    let d = dx.dims();
    let (hh, ww) = (d[2], d[3]);
    let xs = dx.strides();
    let data = dx.data_mut();
    for icl in 0..geom.icg {
        let c = ch_base + icl;
        let x_off = n * xs[0] + c * xs[1];
        for p in 0..kh {
            for q in 0..kw {
                let krow = (icl * kh * kw + p * kw + q) * geom.positions;
                for oh_i in 0..geom.oh {
                    let ih = oh_i * spec.stride + p;
                    if ih < ph || ih - ph >= hh {
                        continue;
                    }
                    let row_off = x_off + (ih - ph) * xs[2];
                    for ow_i in 0..geom.ow {
                        let iw = ow_i * spec.stride + q;
                        if iw < pw || iw - pw >= ww {
                            continue;
                        }
                        let dst = row_off + (iw - pw);
                        data[dst] = data[dst] + dcol[krow + oh_i * geom.ow + ow_i];
                    }
                }
            }
        }
    }
}

fn check_conv_args<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    bias: Option<&Tensor4<E>>,
    spec: &Conv2dSpec,
) -> Result<[usize; 4]> {
    let out_dims = spec.out_dims(x.dims())?;
    if w.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "conv weights {:?} do not match spec {:?}",
            w.dims(),
            spec.weight_dims()
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [1, spec.out_channels, 1, 1] {
            return Err(Error::shape(format!(
                "conv bias {:?}, expected (1, {}, 1, 1)",
                b.dims(),
                spec.out_channels
            )));
        }
    }
    Ok(out_dims)
}

/// Grouped, strided, zero-padded 2-D convolution.
pub fn conv2d_raw<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    bias: Option<&Tensor4<E>>,
    spec: &Conv2dSpec,
) -> Result<Tensor4<E>> {
    let out_dims = check_conv_args(x, w, bias, spec)?;
    let geom = conv_geom(spec, out_dims);
    let mut out = Tensor4::zeros(out_dims);
    let mut col = vec![E::zero(); geom.kdim * geom.positions];
    let batch = out_dims[0];
    let chan_block = geom.ocg * geom.positions;
    {
        let out_data = out.data_mut();
        for n in 0..batch {
            let n_off = n * spec.out_channels * geom.positions;
            for g in 0..spec.groups {
                im2col(x, n, g * geom.icg, spec, &geom, &mut col);
                let y_block = &mut out_data[n_off + g * chan_block..n_off + (g + 1) * chan_block];
                if let Some(b) = bias {
                    for ol in 0..geom.ocg {
                        let bv = b.data()[g * geom.ocg + ol];
                        for v in &mut y_block[ol * geom.positions..(ol + 1) * geom.positions] {
                            *v = bv;
                        }
                    }
                }
                let w_block = &w.data()[g * geom.ocg * geom.kdim..(g + 1) * geom.ocg * geom.kdim];
                gemm_acc(w_block, &col, geom.ocg, geom.kdim, geom.positions, y_block);
            }
        }
    }
    out.debug_check_finite("conv2d", &[x, w]);
    Ok(out)
}

/// Gradients of `conv2d_raw` wrt input, weights and (optionally) bias.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    spec: &Conv2dSpec,
    gy: &Tensor4<E>,
    with_bias: bool,
) -> Result<(Tensor4<E>, Tensor4<E>, Option<Tensor4<E>>)> {
    let out_dims = check_conv_args(x, w, None, spec)?;
    if gy.dims() != out_dims {
        return Err(Error::shape(format!(
            "conv backward: grad {:?} does not match output {:?}",
            gy.dims(),
            out_dims
        )));
    }
    let geom = conv_geom(spec, out_dims);
    let mut dx = Tensor4::zeros(x.dims());
    let mut dw = Tensor4::zeros(w.dims());
    let mut db = if with_bias { Some(Tensor4::zeros([1, spec.out_channels, 1, 1])) } else { None };
    let mut col = vec![E::zero(); geom.kdim * geom.positions];
    let mut dcol = vec![E::zero(); geom.kdim * geom.positions];
    let chan_block = geom.ocg * geom.positions;
    for n in 0..out_dims[0] {
        let n_off = n * spec.out_channels * geom.positions;
        for g in 0..spec.groups {
            im2col(x, n, g * geom.icg, spec, &geom, &mut col);
            let gy_block = &gy.data()[n_off + g * chan_block..n_off + (g + 1) * chan_block];
            let w_block_range = g * geom.ocg * geom.kdim..(g + 1) * geom.ocg * geom.kdim;
            // dW_g += gY_g * col^T
            gemm_nt_acc(
                gy_block,
                &col,
                geom.ocg,
                geom.positions,
                geom.kdim,
                &mut dw.data_mut()[w_block_range.clone()],
            );
            // dcol = W_g^T * gY_g
            for v in dcol.iter_mut() {
                *v = E::zero();
            }
            gemm_tn_acc(
                &w.data()[w_block_range],
                gy_block,
                geom.ocg,
                geom.kdim,
                geom.positions,
                &mut dcol,
            );
            col2im_acc(&dcol, n, g * geom.icg, spec, &geom, &mut dx);
            if let Some(db) = db.as_mut() {
                let dbd = db.data_mut();
                for ol in 0..geom.ocg {
                    let o = g * geom.ocg + ol;
                    let mut acc = E::zero();
                    for &v in &gy_block[ol * geom.positions..(ol + 1) * geom.positions] {
                        acc = acc + v;
                    }
                    dbd[o] = dbd[o] + acc;
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Window-max pooling with stride equal to the kernel. Extents must divide
/// evenly (2x2 pooling on an odd extent is a shape error). Returns the
/// pooled tensor and, per output element, the flat input index of its max
/// (first occurrence in scan order wins ties).
pub fn maxpool_raw<E: Element>(x: &Tensor4<E>, kh: usize, kw: usize) -> Result<(Tensor4<E>, Vec<usize>)> {
    let d = x.dims();
    if kh == 0 || kw == 0 {
        return Err(Error::config("maxpool kernel must be >= 1".to_string()));
    }
    if d[2] % kh != 0 || d[3] % kw != 0 {
        return Err(Error::shape(format!(
            "maxpool {kh}x{kw} on extents {}x{}: extents must divide evenly",
            d[2], d[3]
        )));
    }
    let out_dims = [d[0], d[1], d[2] / kh, d[3] / kw];
    let mut out = Tensor4::zeros(out_dims);
    let mut argmax = vec![0usize; out.numel()];
    let xs = x.strides();
    {
        let od = out.data_mut();
        let mut out_idx = 0;
        for n in 0..d[0] {
            for c in 0..d[1] {
                let base = n * xs[0] + c * xs[1];
                for oh in 0..out_dims[2] {
                    for ow in 0..out_dims[3] {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0;
                        for p in 0..kh {
                            for q in 0..kw {
                                let idx = base + (oh * kh + p) * xs[2] + (ow * kw + q);
                                let v = x.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        od[out_idx] = best;
                        argmax[out_idx] = best_idx;
                        out_idx += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

// ---- parameter initialization -------------------------------------------

/// Uniform fan-in init, bound `1/sqrt(fan_in)`.
pub fn uniform_fan_in<E: Element>(dims: [usize; 4], fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor4<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor4::rand_uniform(dims, -bound, bound, rng).requires_grad(true)
}

// ---- layer structs -------------------------------------------------------

/// Grouped 2-D convolution layer.
#[derive(Clone)]
pub struct Conv2d<E: Element> {
    pub spec: Conv2dSpec,
    pub weight: Tensor4<E>,
    pub bias: Option<Tensor4<E>>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(spec: Conv2dSpec, rng: &mut ChaCha20Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
        let weight = uniform_fan_in(spec.weight_dims(), fan_in, rng);
        let bias = if spec.bias {
            Some(uniform_fan_in([1, spec.out_channels, 1, 1], fan_in, rng))
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let out_dims = self.spec.out_dims(tape.dims(x))?;
        ctx.count_macs(self.spec.macs(out_dims));
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, &self.spec)
    }

    pub fn param_count(&self) -> u64 {
        self.spec.param_count()
    }
}

/// Channel batch normalization over `(N, H, W)`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates with `running = momentum * running + (1 - momentum) * batch`;
/// eval mode normalizes with the running estimates. Running stats sit
/// behind a lock so eval-mode forwards stay `&self` and concurrent.
pub struct BatchNorm<E: Element> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor4<E>,
    pub beta: Tensor4<E>,
    running_mean: RwLock<Tensor4<E>>,
    running_var: RwLock<Tensor4<E>>,
}

impl<E: Element> Clone for BatchNorm<E> {
    fn clone(&self) -> Self {
        BatchNorm {
            channels: self.channels,
            eps: self.eps,
            momentum: self.momentum,
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RwLock::new(self.running_mean.read().unwrap().clone()),
            running_var: RwLock::new(self.running_var.read().unwrap().clone()),
        }
    }
}

impl<E: Element> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        let dims = [1, channels, 1, 1];
        BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.9,
            gamma: Tensor4::ones(dims).requires_grad(true),
            beta: Tensor4::zeros(dims).requires_grad(true),
            running_mean: RwLock::new(Tensor4::zeros(dims)),
            running_var: RwLock::new(Tensor4::ones(dims)),
        }
    }

    pub fn running_stats(&self) -> (Tensor4<E>, Tensor4<E>) {
        (
            self.running_mean.read().unwrap().clone(),
            self.running_var.read().unwrap().clone(),
        )
    }

    pub fn set_running_stats(&self, mean: Tensor4<E>, var: Tensor4<E>) -> Result<()> {
        let dims = [1, self.channels, 1, 1];
        if mean.dims() != dims || var.dims() != dims {
            return Err(Error::shape("batchnorm running stats shape mismatch".to_string()));
        }
        *self.running_mean.write().unwrap() = mean;
        *self.running_var.write().unwrap() = var;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let d = tape.dims(x);
        if d[1] != self.channels {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got input with {}",
                self.channels, d[1]
            )));
        }
        let (xhat, batch_stats) = if ctx.is_train() {
            let mu = {
                let m = tape.reduce_mean(x, 0)?;
                let m = tape.reduce_mean(m, 2)?;
                tape.reduce_mean(m, 3)?
            };
            let neg_mu = tape.neg(mu);
            let centered = tape.badd(x, neg_mu)?;
            let sq = tape.mul(centered, centered)?;
            let var = {
                let v = tape.reduce_mean(sq, 0)?;
                let v = tape.reduce_mean(v, 2)?;
                tape.reduce_mean(v, 3)?
            };
            let istd = tape.rsqrt_eps(var, self.eps);
            let xhat = tape.bmul(centered, istd)?;
            let stats = (tape.value(mu).clone(), tape.value(var).clone());
            (xhat, Some(stats))
        } else {
            let (rm, rv) = self.running_stats();
            let eps = E::from_f64_lossy(self.eps);
            let neg_mean = tape.constant(rm.scale(-E::one()));
            let istd = tape.constant(rv.map(|v| (v + eps).sqrt().recip()));
            let centered = tape.badd(x, neg_mean)?;
            (tape.bmul(centered, istd)?, None)
        };
        if let Some((mu, var)) = batch_stats {
            let m = E::from_f64_lossy(self.momentum);
            let one_m = E::one() - m;
            let mut rm = self.running_mean.write().unwrap();
            *rm = rm.scale(m).add(&mu.scale(one_m))?;
            let mut rv = self.running_var.write().unwrap();
            *rv = rv.scale(m).add(&var.scale(one_m))?;
        }
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let scaled = tape.bmul(xhat, g)?;
        tape.badd(scaled, b)
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Squeeze-and-excitation channel attention: global average pool over
/// `(H, W)`, a bottleneck of two pointwise maps with a ReLU between, a
/// sigmoid gate, and a per-channel rescale of the input.
#[derive(Clone)]
pub struct SeAttention<E: Element> {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Conv2d<E>,
    pub fc2: Conv2d<E>,
}

impl<E: Element> SeAttention<E> {
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "se attention: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let squeeze = channels / reduction;
        let fc1 = Conv2d::new(Conv2dSpec::pointwise(channels, squeeze), rng)?;
        let fc2 = Conv2d::new(Conv2dSpec::pointwise(squeeze, channels), rng)?;
        Ok(SeAttention { channels, reduction, fc1, fc2 })
    }

    /// Returns the rescaled tensor and the gate vector `(N, C, 1, 1)`.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<(Var, Var)> {
        let d = tape.dims(x);
        if d[1] != self.channels {
            return Err(Error::shape(format!(
                "se attention over {} channels got input with {}",
                self.channels, d[1]
            )));
        }
        let s = tape.reduce_mean(x, 2)?;
        let s = tape.reduce_mean(s, 3)?;
        let z = self.fc1.forward(tape, s, ctx)?;
        let z = tape.relu(z);
        let e = self.fc2.forward(tape, z, ctx)?;
        let gate = tape.sigmoid(e);
        let y = tape.bmul(x, gate)?;
        Ok((y, gate))
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Inverted dropout: in train mode zeroes with probability `p` and scales
/// survivors by `1/(1-p)`; eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout p must be in [0, 1), got {p}")));
        }
        Ok(Dropout { p })
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        if !ctx.is_train() || self.p == 0.0 {
            return Ok(x);
        }
        let scale = E::from_f64_lossy(1.0 / (1.0 - self.p));
        let dims = tape.dims(x);
        let n = dims.iter().product();
        let rng = ctx.rng()?;
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let keep = rng.gen::<f64>() >= self.p;
            mask.push(if keep { scale } else { E::zero() });
        }
        let mask = tape.constant(Tensor4::from_vec(dims, mask)?);
        tape.mul(x, mask)
    }
}

/// Fully-connected head on flattened `(N, D, 1, 1)` features; a pointwise
/// convolution under the hood.
#[derive(Clone)]
pub struct Linear<E: Element> {
    conv: Conv2d<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(Linear { conv: Conv2d::new(Conv2dSpec::pointwise(in_features, out_features), rng)? })
    }

    pub fn in_features(&self) -> usize {
        self.conv.spec.in_channels
    }

    pub fn out_features(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn weight(&self) -> &Tensor4<E> {
        &self.conv.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor4<E> {
        &mut self.conv.weight
    }

    pub fn bias(&self) -> &Tensor4<E> {
        self.conv.bias.as_ref().expect("linear always carries bias")
    }

    pub fn bias_mut(&mut self) -> &mut Tensor4<E> {
        self.conv.bias.as_mut().expect("linear always carries bias")
    }

    /// Simultaneous mutable access to weight and bias.
    pub fn params_mut(&mut self) -> (&mut Tensor4<E>, &mut Tensor4<E>) {
        (
            &mut self.conv.weight,
            self.conv.bias.as_mut().expect("linear always carries bias"),
        )
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let d = tape.dims(x);
        if d[2] != 1 || d[3] != 1 {
            return Err(Error::shape(format!("linear expects (N, D, 1, 1), got {d:?}")));
        }
        self.conv.forward(tape, x, ctx)
    }

    pub fn param_count(&self) -> u64 {
        self.conv.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use crate::tape::finite_diff_check;
    use rand::SeedableRng;

    /// Direct 6-deep nested-loop convolution; the independent oracle.
    fn conv_oracle<E: Element>(
        x: &Tensor4<E>,
        w: &Tensor4<E>,
        bias: Option<&Tensor4<E>>,
        spec: &Conv2dSpec,
    ) -> Tensor4<E> {
        let out_dims = spec.out_dims(x.dims()).unwrap();
        let mut out = Tensor4::zeros(out_dims);
        let icg = spec.in_channels / spec.groups;
        let ocg = spec.out_channels / spec.groups;
        let (kh, kw) = spec.kernel;
        let (ph, pw) = spec.padding;
        for n in 0..out_dims[0] {
            for o in 0..out_dims[1] {
                let g = o / ocg;
                for oh in 0..out_dims[2] {
                    for ow in 0..out_dims[3] {
                        let mut acc = bias.map_or(E::zero(), |b| b.at([0, o, 0, 0]));
                        for icl in 0..icg {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let ih = (oh * spec.stride + p) as isize - ph as isize;
                                    let iw = (ow * spec.stride + q) as isize - pw as isize;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= x.dims()[2] as isize
                                        || iw >= x.dims()[3] as isize
                                    {
                                        continue;
                                    }
                                    acc = acc
                                        + x.at([n, g * icg + icl, ih as usize, iw as usize])
                                            * w.at([o, icl, p, q]);
                                }
                            }
                        }
                        out.set([n, o, oh, ow], acc);
                    }
                }
            }
        }
        out
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let c = 4;
        let mut w = Tensor4::<f32>::zeros([c, c, 1, 1]);
        for i in 0..c {
            w.set([i, i, 0, 0], 1.0);
        }
        let mut spec = Conv2dSpec::pointwise(c, c);
        spec.bias = false;
        let x = Tensor4::<f32>::rand_uniform([2, c, 3, 5], -1.0, 1.0, &mut rng(1));
        let y = conv2d_raw(&x, &w, None, &spec).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn conv_shape_follows_architecture_row() {
        let spec = Conv2dSpec::pointwise(3, 64);
        assert_eq!(spec.out_dims([1, 3, 64, 25]).unwrap(), [1, 64, 64, 25]);
    }

    #[test]
    fn grouped_conv_matches_nested_loop_oracle() {
        let spec = Conv2dSpec::new(6, 6, (3, 1), 3, (1, 0));
        let mut r = rng(2);
        let x = Tensor4::<f32>::rand_uniform([2, 6, 5, 4], -1.0, 1.0, &mut r);
        let w = Tensor4::<f32>::rand_uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
        let b = Tensor4::<f32>::rand_uniform([1, 6, 1, 1], -1.0, 1.0, &mut r);
        let got = conv2d_raw(&x, &w, Some(&b), &spec).unwrap();
        let want = conv_oracle(&x, &w, Some(&b), &spec);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn strided_padded_conv_matches_oracle() {
        let mut spec = Conv2dSpec::new(3, 8, (3, 3), 1, (1, 1));
        spec.stride = 2;
        let mut r = rng(3);
        let x = Tensor4::<f32>::rand_uniform([1, 3, 8, 6], -1.0, 1.0, &mut r);
        let w = Tensor4::<f32>::rand_uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
        let got = conv2d_raw(&x, &w, None, &spec).unwrap();
        let want = conv_oracle(&x, &w, None, &spec);
        assert_eq!(got.dims(), [1, 8, 4, 3]);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
    }

    #[test]
    fn grouped_conv_equals_concatenated_group_slices() {
        // conv with groups=g == g independent convs on channel slices.
        let g = 3;
        let spec = Conv2dSpec::new(6, 9, (3, 3), g, (1, 1));
        let mut r = rng(4);
        let x = Tensor4::<f32>::rand_uniform([2, 6, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor4::<f32>::rand_uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
        let b = Tensor4::<f32>::rand_uniform([1, 9, 1, 1], -1.0, 1.0, &mut r);
        let whole = conv2d_raw(&x, &w, Some(&b), &spec).unwrap();
        let icg = 2;
        let ocg = 3;
        let mut parts = Vec::new();
        for gi in 0..g {
            let xs = x.narrow(1, gi * icg, icg).unwrap();
            let ws = w.narrow(0, gi * ocg, ocg).unwrap();
            let bs = b.narrow(1, gi * ocg, ocg).unwrap();
            let sub = Conv2dSpec::new(icg, ocg, (3, 3), 1, (1, 1));
            parts.push(conv2d_raw(&xs, &ws, Some(&bs), &sub).unwrap());
        }
        let refs: Vec<&Tensor4<f32>> = parts.iter().collect();
        let stitched = Tensor4::concat(&refs, 1).unwrap();
        assert!(whole.max_abs_diff(&stitched).unwrap() < 1e-6);
    }

    #[test]
    fn pointwise_conv_is_a_matrix_product() {
        let mut spec = Conv2dSpec::pointwise(3, 5);
        spec.bias = false;
        let mut r = rng(5);
        let x = Tensor4::<f64>::rand_uniform([1, 3, 4, 2], -1.0, 1.0, &mut r);
        let w = Tensor4::<f64>::rand_uniform([5, 3, 1, 1], -1.0, 1.0, &mut r);
        let y = conv2d_raw(&x, &w, None, &spec).unwrap();
        for o in 0..5 {
            for h in 0..4 {
                for ww in 0..2 {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        acc += w.at([o, i, 0, 0]) * x.at([0, i, h, ww]);
                    }
                    assert!((y.at([0, o, h, ww]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_indivisible_groups_and_bad_shapes() {
        assert!(Conv2dSpec::new(5, 6, (1, 1), 2, (0, 0)).validate().is_err());
        let spec = Conv2dSpec::pointwise(3, 4);
        assert!(spec.out_dims([1, 5, 4, 4]).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = Conv2dSpec::new(4, 6, (3, 1), 2, (1, 0));
        let mut r = rng(6);
        let x = Tensor4::<f64>::rand_uniform([2, 4, 5, 3], -1.0, 1.0, &mut r);
        let w = Tensor4::<f64>::rand_uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
        let b = Tensor4::<f64>::rand_uniform([1, 6, 1, 1], -1.0, 1.0, &mut r);

        // wrt input
        let (ws, bs, sp) = (w.clone(), b.clone(), spec.clone());
        let err = finite_diff_check(
            move |tape, v| {
                let wv = tape.constant(ws.clone());
                let bv = tape.constant(bs.clone());
                let y = tape.conv2d(v, wv, Some(bv), &sp)?;
                Ok(tape.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv input fd error {err}");

        // wrt weights
        let (xs, bs, sp) = (x.clone(), b.clone(), spec.clone());
        let err = finite_diff_check(
            move |tape, v| {
                let xv = tape.constant(xs.clone());
                let bv = tape.constant(bs.clone());
                let y = tape.conv2d(xv, v, Some(bv), &sp)?;
                Ok(tape.sum_all(y))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv weight fd error {err}");

        // wrt bias
        let (xs, ws, sp) = (x, w, spec);
        let err = finite_diff_check(
            move |tape, v| {
                let xv = tape.constant(xs.clone());
                let wv = tape.constant(ws.clone());
                let y = tape.conv2d(xv, wv, Some(v), &sp)?;
                Ok(tape.sum_all(y))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv bias fd error {err}");
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let mut r = rng(7);
        let x = Tensor4::<f32>::rand_uniform([2, 3, 4, 6], -1.0, 1.0, &mut r);
        let (y, _) = maxpool_raw(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), [2, 3, 2, 3]);
        for n in 0..2 {
            for c in 0..3 {
                for oh in 0..2 {
                    for ow in 0..3 {
                        let mut best = f32::NEG_INFINITY;
                        for p in 0..2 {
                            for q in 0..2 {
                                best = best.max(x.at([n, c, 2 * oh + p, 2 * ow + q]));
                            }
                        }
                        assert_eq!(y.at([n, c, oh, ow]), best);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_shapes_and_errors() {
        let x = Tensor4::<f32>::full([1, 32, 64, 32], 1.5);
        let (y, _) = maxpool_raw(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), [1, 32, 32, 16]);
        assert!(y.data().iter().all(|&v| v == 1.5));
        let odd = Tensor4::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool_raw(&odd, 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let x = Tensor4::<f64>::rand_uniform([1, 2, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor4::<f64>::rand_uniform([1, 2, 2, 2], -1.0, 1.0, &mut r);
        let err = finite_diff_check(
            move |tape, v| {
                let p = tape.maxpool(v, 2, 2)?;
                let wv = tape.constant(w.clone());
                let m = tape.mul(p, wv)?;
                Ok(tape.sum_all(m))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "maxpool fd error {err}");
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut r = rng(9);
        let bn = BatchNorm::<f64>::new(3);
        let x = Tensor4::rand_uniform([4, 3, 5, 5], -2.0, 3.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mut rng2 = rng(10);
        let mut ctx = Ctx::train(&mut rng2);
        let y = bn.forward(&mut tape, xv, &mut ctx).unwrap();
        let yt = tape.value(y);
        for c in 0..3 {
            let mut mean = 0.0;
            let mut count = 0.0;
            for n in 0..4 {
                for h in 0..5 {
                    for w in 0..5 {
                        mean += yt.at([n, c, h, w]);
                        count += 1.0;
                    }
                }
            }
            mean /= count;
            let mut var = 0.0;
            for n in 0..4 {
                for h in 0..5 {
                    for w in 0..5 {
                        var += (yt.at([n, c, h, w]) - mean).powi(2);
                    }
                }
            }
            var /= count;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_with_default_stats_divides_by_sqrt_one_plus_eps() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let y = bn.forward(&mut tape, xv, &mut ctx).unwrap();
        let yt = tape.value(y);
        for i in 0..4 {
            let want = x.data()[i] / (1.0f64 + 1e-5).sqrt();
            assert!((yt.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_running_stats_follow_ema_recurrence() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let batch_mean = 4.0;
        let batch_var = 5.0; // biased variance of [1,3,5,7]
        let k = 4;
        for _ in 0..k {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mut r = rng(11);
            let mut ctx = Ctx::train(&mut r);
            bn.forward(&mut tape, xv, &mut ctx).unwrap();
        }
        let m: f64 = 0.9;
        let want_mean = m.powi(k) * 0.0 + (1.0 - m.powi(k)) * batch_mean;
        let want_var = m.powi(k) * 1.0 + (1.0 - m.powi(k)) * batch_var;
        let (rm, rv) = bn.running_stats();
        assert!((rm.data()[0] - want_mean).abs() < 1e-10, "mean {} vs {want_mean}", rm.data()[0]);
        assert!((rv.data()[0] - want_var).abs() < 1e-10, "var {} vs {want_var}", rv.data()[0]);
    }

    #[test]
    fn batchnorm_train_gradient_matches_finite_differences() {
        let mut r = rng(12);
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor4::rand_uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let w = Tensor4::rand_uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let err = finite_diff_check(
            |tape, v| {
                let mut r2 = rng(13);
                let mut ctx = Ctx::train(&mut r2);
                let y = bn.forward(tape, v, &mut ctx)?;
                let wv = tape.constant(w.clone());
                let m = tape.mul(y, wv)?;
                Ok(tape.sum_all(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "batchnorm fd error {err}");
    }

    #[test]
    fn dropout_eval_and_p_zero_are_identity() {
        let x = Tensor4::<f32>::rand_uniform([1, 2, 3, 4], -1.0, 1.0, &mut rng(14));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let d = Dropout::new(0.5).unwrap();
        let y = d.forward(&mut tape, xv, &mut ctx).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let mut r = rng(15);
        let mut ctx = Ctx::train(&mut r);
        let d0 = Dropout::new(0.0).unwrap();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone());
        let y = d0.forward(&mut tape, xv, &mut ctx).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_keep_rate_matches_monte_carlo_expectation() {
        let p = 0.3;
        let d = Dropout::new(p).unwrap();
        let x = Tensor4::<f32>::ones([1, 100, 100, 100]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mut r = rng(16);
        let mut ctx = Ctx::train(&mut r);
        let y = d.forward(&mut tape, xv, &mut ctx).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let rate = kept as f64 / 1e6;
        assert!((rate - (1.0 - p)).abs() < 0.01, "keep rate {rate}");
        // Survivors are scaled by 1/(1-p).
        let nonzero = tape.value(y).data().iter().find(|&&v| v != 0.0).copied().unwrap();
        assert!((nonzero - 1.0 / (1.0 - p as f32)).abs() < 1e-6);
    }

    #[test]
    fn se_zero_weights_gate_half() {
        let mut se = SeAttention::<f64>::new(4, 1, &mut rng(17)).unwrap();
        se.fc1.weight = Tensor4::zeros(se.fc1.spec.weight_dims()).requires_grad(true);
        se.fc1.bias = Some(Tensor4::zeros([1, 4, 1, 1]).requires_grad(true));
        se.fc2.weight = Tensor4::zeros(se.fc2.spec.weight_dims()).requires_grad(true);
        se.fc2.bias = Some(Tensor4::zeros([1, 4, 1, 1]).requires_grad(true));
        let x = Tensor4::rand_uniform([2, 4, 3, 3], -1.0, 1.0, &mut rng(18));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let (y, gate) = se.forward(&mut tape, xv, &mut ctx).unwrap();
        assert!(tape.value(gate).data().iter().all(|&g| g == 0.5));
        for i in 0..x.numel() {
            assert!((tape.value(y).data()[i] - x.data()[i] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn se_gate_shape_and_range() {
        let se = SeAttention::<f32>::new(30, 1, &mut rng(19)).unwrap();
        let x = Tensor4::rand_uniform([1, 30, 8, 5], -1.0, 1.0, &mut rng(20));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let mut ctx = Ctx::eval();
        let (_, gate) = se.forward(&mut tape, xv, &mut ctx).unwrap();
        let g = tape.value(gate);
        assert_eq!(g.dims(), [1, 30, 1, 1]);
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn se_gate_matches_closed_form_for_tiny_input() {
        // 2 channels, 1x1 spatial, r=1: squeeze is the input itself.
        let mut se = SeAttention::<f64>::new(2, 1, &mut rng(21)).unwrap();
        let w1 = Tensor4::from_vec([2, 2, 1, 1], vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let b1 = Tensor4::from_vec([1, 2, 1, 1], vec![0.1, -0.2]).unwrap();
        let w2 = Tensor4::from_vec([2, 2, 1, 1], vec![-0.3, 0.6, 0.2, -0.1]).unwrap();
        let b2 = Tensor4::from_vec([1, 2, 1, 1], vec![0.05, 0.15]).unwrap();
        se.fc1.weight = w1.clone().requires_grad(true);
        se.fc1.bias = Some(b1.clone().requires_grad(true));
        se.fc2.weight = w2.clone().requires_grad(true);
        se.fc2.bias = Some(b2.clone().requires_grad(true));
        let x = Tensor4::from_vec([1, 2, 1, 1], vec![0.8, -0.4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let (_, gate) = se.forward(&mut tape, xv, &mut ctx).unwrap();

        let z0 = f64::max(0.5 * 0.8 + -0.25 * -0.4 + 0.1, 0.0);
        let z1 = f64::max(1.0 * 0.8 + 0.75 * -0.4 + -0.2, 0.0);
        let e0 = -0.3 * z0 + 0.6 * z1 + 0.05;
        let e1 = 0.2 * z0 + -0.1 * z1 + 0.15;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((tape.value(gate).at([0, 0, 0, 0]) - sig(e0)).abs() < 1e-12);
        assert!((tape.value(gate).at([0, 1, 0, 0]) - sig(e1)).abs() < 1e-12);
    }

    #[test]
    fn se_gradient_matches_finite_differences() {
        let se = SeAttention::<f64>::new(4, 2, &mut rng(22)).unwrap();
        let x = Tensor4::rand_uniform([2, 4, 3, 2], -1.0, 1.0, &mut rng(23));
        let err = finite_diff_check(
            |tape, v| {
                let mut ctx = Ctx::eval();
                let (y, _) = se.forward(tape, v, &mut ctx)?;
                Ok(tape.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "se fd error {err}");
    }

    #[test]
    fn layer_modes_are_explicit() {
        assert_eq!(Mode::Train, Mode::Train);
        assert!(Dropout::new(1.0).is_err());
    }
}
