//! Dense rank-4 tensors.
//!
//! `Tensor4` is the universal value type of the engine: a row-major array
//! with four positional axes. Semantic axis labels (N,C,T,V or N,V,T,C)
//! are carried by callers; the tensor itself is domain-free.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar element type of the engine. `f32` is the working precision,
/// `f64` is used for gradient checking.
pub trait Element:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
    Max,
}

/// Dense rank-4 tensor with row-major storage.
///
/// Values are immutable after construction; `Clone` shares the underlying
/// buffer. `data_mut` performs copy-on-write for in-place parameter updates.
#[derive(Clone)]
pub struct Tensor4<E: Element> {
    dims: [usize; 4],
    data: Arc<Vec<E>>,
    requires_grad: bool,
}

impl<E: Element> fmt::Debug for Tensor4<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor4(dims={:?}, requires_grad={}, data[..4]={:?})",
            self.dims,
            self.requires_grad,
            &self.data[..self.data.len().min(4)]
        )
    }
}

fn numel(dims: &[usize; 4]) -> usize {
    dims.iter().product()
}

impl<E: Element> Tensor4<E> {
    pub fn from_vec(dims: [usize; 4], data: Vec<E>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("all extents must be >= 1, got {dims:?}")));
        }
        if data.len() != numel(&dims) {
            return Err(Error::shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                numel(&dims)
            )));
        }
        Ok(Tensor4 { dims, data: Arc::new(data), requires_grad: false })
    }

    pub fn full(dims: [usize; 4], value: E) -> Self {
        Tensor4 { dims, data: Arc::new(vec![value; numel(&dims)]), requires_grad: false }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, E::zero())
    }

    pub fn ones(dims: [usize; 4]) -> Self {
        Self::full(dims, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Uniform random tensor in `[lo, hi)` drawn from `rng`.
    pub fn rand_uniform(dims: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = numel(&dims);
        let data = (0..n)
            .map(|_| E::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Tensor4 { dims, data: Arc::new(data), requires_grad: false }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Copy-on-write mutable access to the buffer.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Identity of the underlying buffer; used by the tape to recognize
    /// repeated parameter registrations.
    pub(crate) fn buf_ptr(&self) -> *const E {
        self.data.as_ptr()
    }

    pub fn strides(&self) -> [usize; 4] {
        let d = self.dims;
        [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
    }

    #[inline]
    pub fn at(&self, i: [usize; 4]) -> E {
        let s = self.strides();
        self.data[i[0] * s[0] + i[1] * s[1] + i[2] * s[2] + i[3] * s[3]]
    }

    #[inline]
    pub fn set(&mut self, i: [usize; 4], v: E) {
        let s = self.strides();
        let idx = i[0] * s[0] + i[1] * s[1] + i[2] * s[2] + i[3] * s[3];
        self.data_mut()[idx] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build guard for the "finite in, finite out" forward
    /// invariant: outputs may only be non-finite when an input was.
    #[inline]
    pub(crate) fn debug_check_finite(&self, op: &str, inputs: &[&Tensor4<E>]) {
        #[cfg(debug_assertions)]
        {
            if inputs.iter().all(|t| t.is_finite()) {
                assert!(self.is_finite(), "non-finite values produced by {op} from finite inputs");
            }
        }
        #[cfg(not(debug_assertions))]
        {
            let _ = (op, inputs);
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor4<E> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor4 { dims: self.dims, data: Arc::new(data), requires_grad: false }
    }

    pub fn scale(&self, k: E) -> Tensor4<E> {
        self.map(|v| v * k)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v)
    }

    /// Pointwise binary op; shapes must match exactly (no broadcasting).
    pub fn binary(&self, other: &Tensor4<E>, kind: BinaryKind) -> Result<Tensor4<E>> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "elementwise {kind:?}: shape mismatch {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| match kind {
                BinaryKind::Add => a + b,
                BinaryKind::Mul => a * b,
                // Ties route to the first operand.
                BinaryKind::Max => {
                    if a >= b {
                        a
                    } else {
                        b
                    }
                }
            })
            .collect();
        let out = Tensor4 { dims: self.dims, data: Arc::new(data), requires_grad: false };
        out.debug_check_finite("binary", &[self, other]);
        Ok(out)
    }

    pub fn add(&self, other: &Tensor4<E>) -> Result<Tensor4<E>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn mul(&self, other: &Tensor4<E>) -> Result<Tensor4<E>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn emax(&self, other: &Tensor4<E>) -> Result<Tensor4<E>> {
        self.binary(other, BinaryKind::Max)
    }

    /// Validates a 4-axis permutation.
    pub fn check_permutation(order: [usize; 4]) -> Result<()> {
        let mut seen = [false; 4];
        for &o in &order {
            if o >= 4 || seen[o] {
                return Err(Error::config(format!("invalid axis permutation {order:?}")));
            }
            seen[o] = true;
        }
        Ok(())
    }

    /// Axis permutation: `out[i0,i1,i2,i3] = self[i[order[0]], ...]`
    /// i.e. output axis `k` is input axis `order[k]`.
    pub fn permute(&self, order: [usize; 4]) -> Result<Tensor4<E>> {
        Self::check_permutation(order)?;
        let d = self.dims;
        let out_dims = [d[order[0]], d[order[1]], d[order[2]], d[order[3]]];
        let in_strides = self.strides();
        let mut data = vec![E::zero(); self.numel()];
        let mut idx = 0;
        for i0 in 0..out_dims[0] {
            for i1 in 0..out_dims[1] {
                for i2 in 0..out_dims[2] {
                    for i3 in 0..out_dims[3] {
                        let out_idx = [i0, i1, i2, i3];
                        let mut src = 0;
                        for k in 0..4 {
                            src += out_idx[k] * in_strides[order[k]];
                        }
                        data[idx] = self.data[src];
                        idx += 1;
                    }
                }
            }
        }
        Ok(Tensor4 { dims: out_dims, data: Arc::new(data), requires_grad: false })
    }

    /// Inverse of a permutation order.
    pub fn inverse_order(order: [usize; 4]) -> [usize; 4] {
        let mut inv = [0usize; 4];
        for (k, &o) in order.iter().enumerate() {
            inv[o] = k;
        }
        inv
    }

    /// Arithmetic mean over one axis; that axis extent becomes 1.
    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor4<E>> {
        if axis >= 4 {
            return Err(Error::shape(format!("axis {axis} out of bounds")));
        }
        let mut out_dims = self.dims;
        let extent = out_dims[axis];
        out_dims[axis] = 1;
        let mut out = Tensor4::zeros(out_dims);
        let inv = E::one() / E::from_usize(extent).unwrap();
        {
            let s_in = self.strides();
            let s_out = out.strides();
            let data = Arc::make_mut(&mut out.data);
            for i0 in 0..self.dims[0] {
                for i1 in 0..self.dims[1] {
                    for i2 in 0..self.dims[2] {
                        for i3 in 0..self.dims[3] {
                            let mut oi = [i0, i1, i2, i3];
                            oi[axis] = 0;
                            let src = i0 * s_in[0] + i1 * s_in[1] + i2 * s_in[2] + i3 * s_in[3];
                            let dst = oi[0] * s_out[0] + oi[1] * s_out[1] + oi[2] * s_out[2] + oi[3] * s_out[3];
                            data[dst] = data[dst] + self.data[src];
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                *v = *v * inv;
            }
        }
        out.debug_check_finite("reduce_mean", &[self]);
        Ok(out)
    }

    /// Repeats values along `axis` (which must have extent 1) `n` times.
    /// Adjoint of summing over that axis.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Tensor4<E>> {
        if self.dims[axis] != 1 {
            return Err(Error::shape(format!(
                "broadcast_axis: axis {axis} has extent {} (want 1)",
                self.dims[axis]
            )));
        }
        let mut out_dims = self.dims;
        out_dims[axis] = n;
        let mut out = Tensor4::zeros(out_dims);
        let s_in = self.strides();
        let s_out = out.strides();
        {
            let data = Arc::make_mut(&mut out.data);
            for i0 in 0..out_dims[0] {
                for i1 in 0..out_dims[1] {
                    for i2 in 0..out_dims[2] {
                        for i3 in 0..out_dims[3] {
                            let mut si = [i0, i1, i2, i3];
                            si[axis] = 0;
                            let src = si[0] * s_in[0] + si[1] * s_in[1] + si[2] * s_in[2] + si[3] * s_in[3];
                            let dst = i0 * s_out[0] + i1 * s_out[1] + i2 * s_out[2] + i3 * s_out[3];
                            data[dst] = self.data[src];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sum over one axis (no mean), extent becomes 1.
    pub fn reduce_sum(&self, axis: usize) -> Result<Tensor4<E>> {
        let mean = self.reduce_mean(axis)?;
        Ok(mean.scale(E::from_usize(self.dims[axis]).unwrap()))
    }

    /// Reinterprets the buffer with new dims of identical element count.
    pub fn reshape(&self, dims: [usize; 4]) -> Result<Tensor4<E>> {
        if numel(&dims) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?}: element count mismatch",
                self.dims, dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape: zero extent".to_string()));
        }
        Ok(Tensor4 { dims, data: Arc::clone(&self.data), requires_grad: false })
    }

    /// Contiguous slice along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor4<E>> {
        if axis >= 4 || start + len > self.dims[axis] || len == 0 {
            return Err(Error::shape(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                self.dims
            )));
        }
        let mut out_dims = self.dims;
        out_dims[axis] = len;
        let mut out = Tensor4::zeros(out_dims);
        let s_in = self.strides();
        let s_out = out.strides();
        {
            let data = Arc::make_mut(&mut out.data);
            for i0 in 0..out_dims[0] {
                for i1 in 0..out_dims[1] {
                    for i2 in 0..out_dims[2] {
                        for i3 in 0..out_dims[3] {
                            let mut si = [i0, i1, i2, i3];
                            si[axis] += start;
                            let src = si[0] * s_in[0] + si[1] * s_in[1] + si[2] * s_in[2] + si[3] * s_in[3];
                            let dst = i0 * s_out[0] + i1 * s_out[1] + i2 * s_out[2] + i3 * s_out[3];
                            data[dst] = self.data[src];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor4<E>], axis: usize) -> Result<Tensor4<E>> {
        if parts.is_empty() {
            return Err(Error::input("concat of zero tensors".to_string()));
        }
        if axis >= 4 {
            return Err(Error::shape(format!("concat axis {axis} out of bounds")));
        }
        let mut out_dims = parts[0].dims;
        out_dims[axis] = 0;
        for p in parts {
            let mut d = p.dims;
            d[axis] = 0;
            let mut base = parts[0].dims;
            base[axis] = 0;
            if d != base {
                return Err(Error::shape(format!(
                    "concat: incompatible shapes {:?} vs {:?} on axis {axis}",
                    p.dims, parts[0].dims
                )));
            }
            out_dims[axis] += p.dims[axis];
        }
        let mut out = Tensor4::zeros(out_dims);
        let mut offset = 0;
        for p in parts {
            let s_in = p.strides();
            let s_out = out.strides();
            let data = Arc::make_mut(&mut out.data);
            for i0 in 0..p.dims[0] {
                for i1 in 0..p.dims[1] {
                    for i2 in 0..p.dims[2] {
                        for i3 in 0..p.dims[3] {
                            let mut oi = [i0, i1, i2, i3];
                            oi[axis] += offset;
                            let src = i0 * s_in[0] + i1 * s_in[1] + i2 * s_in[2] + i3 * s_in[3];
                            let dst = oi[0] * s_out[0] + oi[1] * s_out[1] + oi[2] * s_out[2] + oi[3] * s_out[3];
                            data[dst] = p.data[src];
                        }
                    }
                }
            }
            offset += p.dims[axis];
        }
        Ok(out)
    }

    /// Casts elementwise into another precision.
    pub fn cast<F: Element>(&self) -> Tensor4<F> {
        let data = self.data.iter().map(|&v| F::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor4 { dims: self.dims, data: Arc::new(data), requires_grad: self.requires_grad }
    }

    /// Max absolute difference against another tensor of identical shape.
    pub fn max_abs_diff(&self, other: &Tensor4<E>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape("max_abs_diff: shape mismatch".to_string()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn construction_checks_invariants() {
        assert!(Tensor4::<f32>::from_vec([2, 2, 2, 2], vec![0.0; 16]).is_ok());
        assert!(Tensor4::<f32>::from_vec([2, 2, 2, 2], vec![0.0; 15]).is_err());
        assert!(Tensor4::<f32>::from_vec([0, 2, 2, 2], vec![]).is_err());
    }

    #[test]
    fn permute_identity_is_bitwise_equal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Tensor4::<f32>::rand_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let y = x.permute([0, 1, 2, 3]).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn permute_transposes_shape() {
        let x = Tensor4::<f32>::zeros([1, 32, 64, 25]);
        let y = x.permute([0, 3, 2, 1]).unwrap();
        assert_eq!(y.dims(), [1, 25, 64, 32]);
    }

    #[test]
    fn permute_roundtrips_for_all_24_orders() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::rand_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let axes = [0usize, 1, 2, 3];
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let order = [axes[a], axes[b], axes[c], axes[d]];
                        if Tensor4::<f64>::check_permutation(order).is_err() {
                            continue;
                        }
                        let inv = Tensor4::<f64>::inverse_order(order);
                        let y = x.permute(order).unwrap().permute(inv).unwrap();
                        assert_eq!(x.data(), y.data(), "order {order:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn permute_value_mapping() {
        // out[i...] = in[i[order[k]]...]: spot-check a single element.
        let mut x = Tensor4::<f32>::zeros([2, 3, 4, 5]);
        x.set([1, 2, 3, 4], 7.0);
        let y = x.permute([3, 2, 1, 0]).unwrap();
        assert_eq!(y.at([4, 3, 2, 1]), 7.0);
    }

    #[test]
    fn add_matches_scalar_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = Tensor4::<f32>::rand_uniform([2, 3, 4, 5], -2.0, 2.0, &mut rng);
        let b = Tensor4::<f32>::rand_uniform([2, 3, 4, 5], -2.0, 2.0, &mut rng);
        let c = a.add(&b).unwrap();
        for i in 0..a.numel() {
            assert_eq!(c.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn add_zero_is_identity_and_max_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Tensor4::<f32>::rand_uniform([1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let z = Tensor4::<f32>::zeros([1, 2, 3, 4]);
        assert_eq!(x.add(&z).unwrap().data(), x.data());
        assert_eq!(x.emax(&x).unwrap().data(), x.data());
    }

    #[test]
    fn elementwise_shape_mismatch_is_error() {
        let a = Tensor4::<f32>::zeros([1, 2, 3, 4]);
        let b = Tensor4::<f32>::zeros([1, 2, 4, 3]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_mean_matches_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = Tensor4::<f64>::rand_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let m = x.reduce_mean(2).unwrap();
        assert_eq!(m.dims(), [2, 3, 1, 5]);
        for n in 0..2 {
            for c in 0..3 {
                for v in 0..5 {
                    let mut s = 0.0;
                    for t in 0..4 {
                        s += x.at([n, c, t, v]);
                    }
                    let want = s / 4.0;
                    assert!((m.at([n, c, 0, v]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reduce_mean_shape_chain_case() {
        let x = Tensor4::<f32>::zeros([1, 256, 4, 2]);
        assert_eq!(x.reduce_mean(2).unwrap().dims(), [1, 256, 1, 2]);
    }

    #[test]
    fn reduce_mean_constant_and_unit_axis() {
        let x = Tensor4::<f32>::full([2, 3, 4, 5], 2.5);
        let m = x.reduce_mean(1).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.5));
        let u = Tensor4::<f32>::full([2, 3, 1, 5], 1.25);
        assert_eq!(u.reduce_mean(2).unwrap().data(), u.data());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let a = Tensor4::<f32>::rand_uniform([1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor4::<f32>::rand_uniform([1, 5, 3, 4], -1.0, 1.0, &mut rng);
        let c = Tensor4::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), [1, 7, 3, 4]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 5).unwrap().data(), b.data());
    }
}
