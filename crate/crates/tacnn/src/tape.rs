//! Reverse-mode automatic differentiation over `Tensor4` values.
//!
//! A `Tape` records one forward computation as an append-only list of
//! nodes; `backward` walks the list once in reverse creation order and
//! returns gradients for every grad-requiring leaf. A tape is built and
//! consumed by exactly one training step; concurrent steps use distinct
//! tapes.

use std::collections::HashMap;

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::layers::{conv2d_backward, conv2d_raw, maxpool_raw, Conv2dSpec};
use crate::tensor::{BinaryKind, Element, Tensor4};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

/// Forward/eval switch for layers with mode-dependent behavior
/// (batch norm, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-run execution context threaded through layer forwards: mode,
/// the RNG used by dropout, a multiply-accumulate counter, and an
/// optional shape trace.
pub struct Ctx<'a> {
    pub mode: Mode,
    rng: Option<&'a mut ChaCha20Rng>,
    pub macs: u64,
    pub trace: Option<Vec<(String, [usize; 4])>>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Ctx<'static> {
        Ctx { mode: Mode::Eval, rng: None, macs: 0, trace: None }
    }

    pub fn train(rng: &'a mut ChaCha20Rng) -> Ctx<'a> {
        Ctx { mode: Mode::Train, rng: Some(rng), macs: 0, trace: None }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> Result<&mut ChaCha20Rng> {
        match self.rng.as_deref_mut() {
            Some(r) => Ok(r),
            None => Err(Error::usage("train-mode forward requires an RNG".to_string())),
        }
    }

    pub fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace_shape(&mut self, name: &str, dims: [usize; 4]) {
        if let Some(t) = self.trace.as_mut() {
            t.push((name.to_string(), dims));
        }
    }
}

/// Backward rule of a tape node: which local gradient to apply, plus the
/// activations the rule needs (input/output values are read back from the
/// tape itself).
enum Rule<E: Element> {
    Permute { inverse: [usize; 4] },
    Add,
    Mul,
    EMax,
    Neg,
    ScalarMul { k: E },
    /// `a + broadcast(b)` with `b` shaped `(1|N, C, 1, 1)`.
    BAdd,
    /// `a * broadcast(b)` with `b` shaped `(1|N, C, 1, 1)`.
    BMul,
    /// `y = (x + eps)^(-1/2)`.
    RsqrtEps,
    ReduceMean { axis: usize },
    SumAll,
    Relu,
    Sigmoid,
    Conv2d { spec: Conv2dSpec },
    MaxPool { argmax: Vec<usize> },
    SoftmaxXent { probs: Tensor4<E> },
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Reshape,
    Motion,
}

struct Node<E: Element> {
    output: usize,
    inputs: Vec<usize>,
    rule: Rule<E>,
}

/// Append-only record of one forward computation.
pub struct Tape<E: Element> {
    values: Vec<Tensor4<E>>,
    tracked: Vec<bool>,
    nodes: Vec<Node<E>>,
    params: HashMap<*const E, Var>,
    overrides: HashMap<*const E, Var>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            tracked: Vec::new(),
            nodes: Vec::new(),
            params: HashMap::new(),
            overrides: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records nothing; for pure-forward (inference) passes.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<E> {
        &self.values[v.id]
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.values[v.id].dims()
    }

    fn push_value(&mut self, t: Tensor4<E>, tracked: bool) -> Var {
        let id = self.values.len();
        self.values.push(t);
        self.tracked.push(tracked && self.grad_enabled);
        Var { id }
    }

    /// Registers an input value. Tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor4<E>) -> Var {
        let tracked = t.wants_grad();
        self.push_value(t, tracked)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor4<E>) -> Var {
        self.push_value(t, false)
    }

    /// Registers a model parameter, memoized by buffer identity so a layer
    /// can call this on every forward without duplicating leaves.
    pub fn param(&mut self, t: &Tensor4<E>) -> Var {
        let key = t.buf_ptr();
        if let Some(&v) = self.overrides.get(&key) {
            return v;
        }
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(key, v);
        v
    }

    /// Substitutes `var` for a parameter tensor in subsequent `param` calls.
    /// Used by gradient checking to treat one parameter as the free variable.
    pub fn bind_override(&mut self, t: &Tensor4<E>, var: Var) {
        self.overrides.insert(t.buf_ptr(), var);
    }

    fn record(&mut self, out: Tensor4<E>, inputs: &[Var], rule: Rule<E>) -> Var {
        let tracked = inputs.iter().any(|v| self.tracked[v.id]);
        let out_var = self.push_value(out, tracked);
        if tracked && self.grad_enabled {
            self.nodes.push(Node {
                output: out_var.id,
                inputs: inputs.iter().map(|v| v.id).collect(),
                rule,
            });
        }
        out_var
    }

    // ---- primitive ops -------------------------------------------------

    pub fn permute(&mut self, x: Var, order: [usize; 4]) -> Result<Var> {
        let out = self.value(x).permute(order)?;
        let inverse = Tensor4::<E>::inverse_order(order);
        Ok(self.record(out, &[x], Rule::Permute { inverse }))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let out = self.value(a).binary(self.value(b), kind)?;
        let rule = match kind {
            BinaryKind::Add => Rule::Add,
            BinaryKind::Mul => Rule::Mul,
            BinaryKind::Max => Rule::EMax,
        };
        Ok(self.record(out, &[a, b], rule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Max)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.record(out, &[x], Rule::Neg)
    }

    pub fn scalar_mul(&mut self, x: Var, k: E) -> Var {
        let out = self.value(x).scale(k);
        self.record(out, &[x], Rule::ScalarMul { k })
    }

    fn check_broadcast(&self, a: Var, b: Var) -> Result<()> {
        let da = self.dims(a);
        let db = self.dims(b);
        if db[2] != 1 || db[3] != 1 || db[1] != da[1] || (db[0] != 1 && db[0] != da[0]) {
            return Err(Error::shape(format!(
                "broadcast op: rhs {db:?} incompatible with lhs {da:?} (want (1|N, C, 1, 1))"
            )));
        }
        Ok(())
    }

    fn broadcast_to(&self, b: Var, target: [usize; 4]) -> Result<Tensor4<E>> {
        let t = self.value(b);
        let mut out = t.clone();
        if out.dims()[0] != target[0] {
            out = out.broadcast_axis(0, target[0])?;
        }
        out = out.broadcast_axis(2, target[2])?.broadcast_axis(3, target[3])?;
        Ok(out)
    }

    /// `a + broadcast(b)` where `b` is `(1|N, C, 1, 1)`.
    pub fn badd(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b)?;
        let bb = self.broadcast_to(b, self.dims(a))?;
        let out = self.value(a).add(&bb)?;
        Ok(self.record(out, &[a, b], Rule::BAdd))
    }

    /// `a * broadcast(b)` where `b` is `(1|N, C, 1, 1)`.
    pub fn bmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b)?;
        let bb = self.broadcast_to(b, self.dims(a))?;
        let out = self.value(a).mul(&bb)?;
        Ok(self.record(out, &[a, b], Rule::BMul))
    }

    pub fn rsqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let e = E::from_f64_lossy(eps);
        let out = self.value(x).map(|v| (v + e).sqrt().recip());
        self.record(out, &[x], Rule::RsqrtEps)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).reduce_mean(axis)?;
        Ok(self.record(out, &[x], Rule::ReduceMean { axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        self.record(out, &[x], Rule::SumAll)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.record(out, &[x], Rule::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = E::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        self.record(out, &[x], Rule::Sigmoid)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        let bias = b.map(|bv| self.value(bv).clone());
        let out = conv2d_raw(self.value(x), self.value(w), bias.as_ref(), spec)?;
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        Ok(self.record(out, &inputs, Rule::Conv2d { spec: spec.clone() }))
    }

    pub fn maxpool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let (out, argmax) = maxpool_raw(self.value(x), kh, kw)?;
        Ok(self.record(out, &[x], Rule::MaxPool { argmax }))
    }

    /// Soft-target cross entropy over softmax, averaged over the batch axis.
    /// `logits` and `target` are `(N, K, 1, 1)`; each target row must be a
    /// probability vector.
    pub fn softmax_xent(&mut self, logits: Var, target: Var) -> Result<Var> {
        let ld = self.dims(logits);
        let td = self.dims(target);
        if ld != td || ld[2] != 1 || ld[3] != 1 {
            return Err(Error::shape(format!(
                "softmax_xent: want matching (N, K, 1, 1) shapes, got {ld:?} vs {td:?}"
            )));
        }
        let (n, k) = (ld[0], ld[1]);
        let t = self.value(target);
        let tol = 1e-6;
        for row in 0..n {
            let mut sum = 0.0;
            for j in 0..k {
                let v = t.at([row, j, 0, 0]).to_f64_lossy();
                if v < 0.0 {
                    return Err(Error::input(format!(
                        "softmax_xent: negative target entry {v} in row {row}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::input(format!(
                    "softmax_xent: target row {row} sums to {sum}, expected 1"
                )));
            }
        }
        let l = self.value(logits);
        let mut probs = Tensor4::zeros(ld);
        let mut loss = 0.0f64;
        for row in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                mx = mx.max(l.at([row, j, 0, 0]).to_f64_lossy());
            }
            let mut z = 0.0;
            for j in 0..k {
                z += (l.at([row, j, 0, 0]).to_f64_lossy() - mx).exp();
            }
            let log_z = z.ln() + mx;
            for j in 0..k {
                let lv = l.at([row, j, 0, 0]).to_f64_lossy();
                let log_p = lv - log_z;
                probs.set([row, j, 0, 0], E::from_f64_lossy(log_p.exp()));
                let tv = self.value(target).at([row, j, 0, 0]).to_f64_lossy();
                if tv > 0.0 {
                    loss -= tv * log_p;
                }
            }
        }
        loss /= n as f64;
        let out = Tensor4::scalar(E::from_f64_lossy(loss));
        Ok(self.record(out, &[logits, target], Rule::SoftmaxXent { probs }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor4<E>> = parts.iter().map(|v| &self.values[v.id]).collect();
        let out = Tensor4::concat(&tensors, axis)?;
        Ok(self.record(out, parts, Rule::Concat { axis }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.record(out, &[x], Rule::Narrow { axis, start }))
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        Ok(self.record(out, &[x], Rule::Reshape))
    }

    /// Forward temporal difference along axis 2 with a zero-padded final
    /// frame: `y[t] = x[t+1] - x[t]` for `t < T-1`, `y[T-1] = 0`.
    pub fn motion(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.dims();
        if d[2] < 2 {
            return Err(Error::input(format!("motion: need T >= 2, got T = {}", d[2])));
        }
        let mut out = Tensor4::zeros(d);
        for n in 0..d[0] {
            for c in 0..d[1] {
                for t in 0..d[2] - 1 {
                    for v in 0..d[3] {
                        let diff = xt.at([n, c, t + 1, v]) - xt.at([n, c, t, v]);
                        out.set([n, c, t, v], diff);
                    }
                }
            }
        }
        Ok(self.record(out, &[x], Rule::Motion))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape; returns the
    /// gradient of every grad-requiring leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        if self.values[loss.id].dims() != [1, 1, 1, 1] {
            return Err(Error::usage(format!(
                "backward: loss must be scalar (1,1,1,1), got {:?}",
                self.values[loss.id].dims()
            )));
        }
        if self.nodes.is_empty() || !self.tracked[loss.id] {
            return Err(Error::usage(
                "backward on a detached graph: no tracked computation reaches the loss".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor4<E>>> = vec![None; self.values.len()];
        grads[loss.id] = Some(Tensor4::ones([1, 1, 1, 1]));

        let acc = |slot: &mut Option<Tensor4<E>>, g: Tensor4<E>| -> Result<()> {
            match slot {
                Some(prev) => *slot = Some(prev.add(&g)?),
                None => *slot = Some(g),
            }
            Ok(())
        };

        for node in self.nodes.iter().rev() {
            let g = match grads[node.output].clone() {
                Some(g) => g,
                None => continue,
            };
            match &node.rule {
                Rule::Permute { inverse } => {
                    acc(&mut grads[node.inputs[0]], g.permute(*inverse)?)?;
                }
                Rule::Add => {
                    acc(&mut grads[node.inputs[0]], g.clone())?;
                    acc(&mut grads[node.inputs[1]], g)?;
                }
                Rule::Mul => {
                    let a = &self.values[node.inputs[0]];
                    let b = &self.values[node.inputs[1]];
                    acc(&mut grads[node.inputs[0]], g.mul(b)?)?;
                    acc(&mut grads[node.inputs[1]], g.mul(a)?)?;
                }
                Rule::EMax => {
                    let a = &self.values[node.inputs[0]];
                    let b = &self.values[node.inputs[1]];
                    let mut ga = Tensor4::zeros(a.dims());
                    let mut gb = Tensor4::zeros(b.dims());
                    {
                        let gad = ga.data_mut();
                        for i in 0..a.numel() {
                            if a.data()[i] >= b.data()[i] {
                                gad[i] = g.data()[i];
                            }
                        }
                    }
                    {
                        let gbd = gb.data_mut();
                        for i in 0..a.numel() {
                            if a.data()[i] < b.data()[i] {
                                gbd[i] = g.data()[i];
                            }
                        }
                    }
                    acc(&mut grads[node.inputs[0]], ga)?;
                    acc(&mut grads[node.inputs[1]], gb)?;
                }
                Rule::Neg => {
                    acc(&mut grads[node.inputs[0]], g.map(|v| -v))?;
                }
                Rule::ScalarMul { k } => {
                    acc(&mut grads[node.inputs[0]], g.scale(*k))?;
                }
                Rule::BAdd => {
                    let db_dims = self.values[node.inputs[1]].dims();
                    acc(&mut grads[node.inputs[0]], g.clone())?;
                    let mut gb = g.reduce_sum(2)?.reduce_sum(3)?;
                    if db_dims[0] == 1 && gb.dims()[0] != 1 {
                        gb = gb.reduce_sum(0)?;
                    }
                    acc(&mut grads[node.inputs[1]], gb)?;
                }
                Rule::BMul => {
                    let a = self.values[node.inputs[0]].clone();
                    let b = node.inputs[1];
                    let db_dims = self.values[b].dims();
                    let bb = self.broadcast_to(Var { id: b }, a.dims())?;
                    acc(&mut grads[node.inputs[0]], g.mul(&bb)?)?;
                    let mut gb = g.mul(&a)?.reduce_sum(2)?.reduce_sum(3)?;
                    if db_dims[0] == 1 && gb.dims()[0] != 1 {
                        gb = gb.reduce_sum(0)?;
                    }
                    acc(&mut grads[b], gb)?;
                }
                Rule::RsqrtEps => {
                    // dy/dx = -1/2 * y^3
                    let y = &self.values[node.output];
                    let half = E::from_f64_lossy(0.5);
                    let dydx = y.map(|v| -half * v * v * v);
                    acc(&mut grads[node.inputs[0]], g.mul(&dydx)?)?;
                }
                Rule::ReduceMean { axis } => {
                    let in_dims = self.values[node.inputs[0]].dims();
                    let extent = in_dims[*axis];
                    let scaled = g.scale(E::one() / E::from_usize(extent).unwrap());
                    acc(&mut grads[node.inputs[0]], scaled.broadcast_axis(*axis, extent)?)?;
                }
                Rule::SumAll => {
                    let in_dims = self.values[node.inputs[0]].dims();
                    acc(&mut grads[node.inputs[0]], Tensor4::full(in_dims, g.data()[0]))?;
                }
                Rule::Relu => {
                    let x = &self.values[node.inputs[0]];
                    let mut gx = g.clone();
                    {
                        let gd = gx.data_mut();
                        for i in 0..x.numel() {
                            if x.data()[i] <= E::zero() {
                                gd[i] = E::zero();
                            }
                        }
                    }
                    acc(&mut grads[node.inputs[0]], gx)?;
                }
                Rule::Sigmoid => {
                    let y = &self.values[node.output];
                    let dydx = y.map(|v| v * (E::one() - v));
                    acc(&mut grads[node.inputs[0]], g.mul(&dydx)?)?;
                }
                Rule::Conv2d { spec } => {
                    let x = &self.values[node.inputs[0]];
                    let w = &self.values[node.inputs[1]];
                    let with_bias = node.inputs.len() == 3;
                    let (dx, dw, db) = conv2d_backward(x, w, spec, &g, with_bias)?;
                    acc(&mut grads[node.inputs[0]], dx)?;
                    acc(&mut grads[node.inputs[1]], dw)?;
                    if with_bias {
                        acc(&mut grads[node.inputs[2]], db.unwrap())?;
                    }
                }
                Rule::MaxPool { argmax } => {
                    let in_dims = self.values[node.inputs[0]].dims();
                    let mut gx = Tensor4::zeros(in_dims);
                    {
                        let gd = gx.data_mut();
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            gd[src] = gd[src] + g.data()[out_idx];
                        }
                    }
                    acc(&mut grads[node.inputs[0]], gx)?;
                }
                Rule::SoftmaxXent { probs } => {
                    let target = &self.values[node.inputs[1]];
                    let n = probs.dims()[0];
                    let scale = g.data()[0] / E::from_usize(n).unwrap();
                    let mut dl = Tensor4::zeros(probs.dims());
                    {
                        let dld = dl.data_mut();
                        for i in 0..probs.numel() {
                            dld[i] = (probs.data()[i] - target.data()[i]) * scale;
                        }
                    }
                    acc(&mut grads[node.inputs[0]], dl)?;
                    if self.tracked[node.inputs[1]] {
                        let dt = probs.map(|p| -(p.ln())).scale(scale);
                        acc(&mut grads[node.inputs[1]], dt)?;
                    }
                }
                Rule::Concat { axis } => {
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let len = self.values[inp].dims()[*axis];
                        acc(&mut grads[inp], g.narrow(*axis, offset, len)?)?;
                        offset += len;
                    }
                }
                Rule::Narrow { axis, start } => {
                    let in_dims = self.values[node.inputs[0]].dims();
                    let mut gx = Tensor4::zeros(in_dims);
                    let gd = g.dims();
                    let s_out = gx.strides();
                    let s_g = g.strides();
                    {
                        let data = gx.data_mut();
                        for i0 in 0..gd[0] {
                            for i1 in 0..gd[1] {
                                for i2 in 0..gd[2] {
                                    for i3 in 0..gd[3] {
                                        let mut oi = [i0, i1, i2, i3];
                                        oi[*axis] += start;
                                        let dst = oi[0] * s_out[0]
                                            + oi[1] * s_out[1]
                                            + oi[2] * s_out[2]
                                            + oi[3] * s_out[3];
                                        let src = i0 * s_g[0] + i1 * s_g[1] + i2 * s_g[2] + i3 * s_g[3];
                                        data[dst] = data[dst] + g.data()[src];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads[node.inputs[0]], gx)?;
                }
                Rule::Reshape => {
                    let in_dims = self.values[node.inputs[0]].dims();
                    acc(&mut grads[node.inputs[0]], g.reshape(in_dims)?)?;
                }
                Rule::Motion => {
                    // y[t] = x[t+1] - x[t] (t < T-1) => dx[t] = g[t-1] - g[t]
                    // with g[-1] = 0 and the final output frame constant zero.
                    let in_dims = self.values[node.inputs[0]].dims();
                    let tlen = in_dims[2];
                    let mut gx = Tensor4::zeros(in_dims);
                    for n in 0..in_dims[0] {
                        for c in 0..in_dims[1] {
                            for t in 0..tlen {
                                for v in 0..in_dims[3] {
                                    let mut val = E::zero();
                                    if t > 0 {
                                        val = val + g.at([n, c, t - 1, v]);
                                    }
                                    if t < tlen - 1 {
                                        val = val - g.at([n, c, t, v]);
                                    }
                                    gx.set([n, c, t, v], val);
                                }
                            }
                        }
                    }
                    acc(&mut grads[node.inputs[0]], gx)?;
                }
            }
        }

        Ok(Gradients { grads, params: self.params })
    }
}

/// Output of `Tape::backward`: gradients addressable by `Var` or by the
/// parameter tensor they belong to.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor4<E>>>,
    params: HashMap<*const E, Var>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<E>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter tensor registered via `Tape::param`.
    pub fn for_param(&self, t: &Tensor4<E>) -> Option<&Tensor4<E>> {
        self.params.get(&t.buf_ptr()).and_then(|&v| self.get(v))
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`:
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
///
/// `f` must be deterministic (eval mode / dropout disabled). Intended for
/// double precision.
pub fn finite_diff_check<E, F>(f: F, x: &Tensor4<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, Var) -> Result<Var>,
{
    // Analytic gradient.
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().requires_grad(true));
    let loss = f(&mut tape, xv)?;
    if tape.dims(loss) != [1, 1, 1, 1] {
        return Err(Error::usage("finite_diff_check: f must return a scalar".to_string()));
    }
    let grads = tape.backward(loss)?;
    let analytic = match grads.get(xv) {
        Some(g) => g.clone(),
        None => Tensor4::zeros(x.dims()),
    };

    let eval = |t: &Tensor4<E>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.leaf(t.clone());
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i].to_f64_lossy();
        let mut plus = x.clone();
        plus.data_mut()[i] = E::from_f64_lossy(orig + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = E::from_f64_lossy(orig - h);
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i].to_f64_lossy();
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_check: non-finite value at coordinate {i} (analytic {a}, numeric {numeric})"
            )));
        }
        let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
