//! Topology-aware feature blocks.
//!
//! Both blocks follow the same map-attend-group-map layout: pointwise
//! feature mapping, squeeze-and-excitation channel attention, a pair of
//! grouped convolutions with different group counts summed elementwise,
//! and a pointwise output map. `Cag` applies it with coordinates as
//! channels; `Vag` applies it after the joints-as-channels transposition,
//! so its channel groups act as virtual body parts, and finishes with a
//! pool-conv-pool tail.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Conv2dSpec, SeAttention};
use crate::tape::{Ctx, Tape, Var};
use crate::tensor::Element;

fn same_padding(kernel: (usize, usize)) -> Result<(usize, usize)> {
    if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
        return Err(Error::config(format!(
            "same padding needs odd kernel extents, got {kernel:?}"
        )));
    }
    Ok(((kernel.0 - 1) / 2, (kernel.1 - 1) / 2))
}

/// 2x2 max pooling that skips axes already reduced to extent 1, so the
/// tail keeps working at short temporal extents. Extents > 1 must still
/// be even.
pub fn pool2_clamped<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let d = tape.dims(x);
    let kh = if d[2] > 1 { 2 } else { 1 };
    let kw = if d[3] > 1 { 2 } else { 1 };
    tape.maxpool(x, kh, kw)
}

fn check_dual_groups(channels: usize, groups: usize) -> Result<()> {
    if groups < 2 || groups % 2 != 0 {
        return Err(Error::config(format!(
            "dual grouped conv needs an even group count >= 2, got {groups}"
        )));
    }
    if channels % groups != 0 || channels % (groups / 2) != 0 {
        return Err(Error::config(format!(
            "dual grouped conv: {channels} channels not divisible by {groups} and {}",
            groups / 2
        )));
    }
    Ok(())
}

/// Two parallel grouped convolutions over the same input, summed:
/// branch A uses `kernel_a` with `n` groups and same padding, branch B is
/// pointwise with `n/2` groups. Channel count is preserved.
#[derive(Clone)]
pub struct DualGroupedConv<E: Element> {
    pub groups: usize,
    pub branch_a: Conv2d<E>,
    pub branch_b: Conv2d<E>,
}

impl<E: Element> DualGroupedConv<E> {
    pub fn new(
        channels: usize,
        groups: usize,
        kernel_a: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        check_dual_groups(channels, groups)?;
        let pad = same_padding(kernel_a)?;
        let branch_a = Conv2d::new(Conv2dSpec::new(channels, channels, kernel_a, groups, pad), rng)?;
        let branch_b =
            Conv2d::new(Conv2dSpec::new(channels, channels, (1, 1), groups / 2, (0, 0)), rng)?;
        Ok(DualGroupedConv { groups, branch_a, branch_b })
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let a = self.branch_a.forward(tape, x, ctx)?;
        let b = self.branch_b.forward(tape, x, ctx)?;
        tape.add(a, b)
    }

    pub fn param_count(&self) -> u64 {
        self.branch_a.param_count() + self.branch_b.param_count()
    }
}

/// Configuration of the coordinate-aware block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CagSpec {
    pub in_coords: usize,
    pub hidden: usize,
    pub grouped: usize,
    pub out: usize,
    pub groups: usize,
}

impl Default for CagSpec {
    fn default() -> Self {
        CagSpec { in_coords: 3, hidden: 64, grouped: 30, out: 32, groups: 10 }
    }
}

impl CagSpec {
    pub fn validate(&self) -> Result<()> {
        check_dual_groups(self.grouped, self.groups)
    }
}

/// Coordinate-aware grouping: pointwise map to a hidden width (with batch
/// norm and ReLU), pointwise map down to the grouped width, channel
/// attention, dual grouped convolution with a temporal (3x1) kernel, and
/// a pointwise output map. Preserves the `(T, V)` extents.
#[derive(Clone)]
pub struct Cag<E: Element> {
    pub spec: CagSpec,
    pub map_hi: Conv2d<E>,
    pub bn: BatchNorm<E>,
    pub map_lo: Conv2d<E>,
    pub se: SeAttention<E>,
    pub dual: DualGroupedConv<E>,
    pub map_out: Conv2d<E>,
}

impl<E: Element> Cag<E> {
    pub fn new(spec: CagSpec, rng: &mut ChaCha20Rng) -> Result<Self> {
        spec.validate()?;
        let map_hi = Conv2d::new(Conv2dSpec::pointwise(spec.in_coords, spec.hidden), rng)?;
        let bn = BatchNorm::new(spec.hidden);
        let map_lo = Conv2d::new(Conv2dSpec::pointwise(spec.hidden, spec.grouped), rng)?;
        let se = SeAttention::new(spec.grouped, 1, rng)?;
        let dual = DualGroupedConv::new(spec.grouped, spec.groups, (3, 1), rng)?;
        let map_out = Conv2d::new(Conv2dSpec::pointwise(spec.grouped, spec.out), rng)?;
        Ok(Cag { spec, map_hi, bn, map_lo, se, dual, map_out })
    }

    /// Returns the block output `(N, out, T, V)` and the attention gate.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<(Var, Var)> {
        let d = tape.dims(x);
        if d[1] != self.spec.in_coords {
            return Err(Error::shape(format!(
                "cag expects {} coordinate channels, got {}",
                self.spec.in_coords, d[1]
            )));
        }
        let h = self.map_hi.forward(tape, x, ctx)?;
        let h = self.bn.forward(tape, h, ctx)?;
        let h = tape.relu(h);
        ctx.trace_shape("cag.map_hi", tape.dims(h));
        let h = self.map_lo.forward(tape, h, ctx)?;
        ctx.trace_shape("cag.map_lo", tape.dims(h));
        let (attended, gate) = self.se.forward(tape, h, ctx)?;
        ctx.trace_shape("cag.se", tape.dims(attended));
        let grouped = self.dual.forward(tape, attended, ctx)?;
        ctx.trace_shape("cag.dual", tape.dims(grouped));
        let out = self.map_out.forward(tape, grouped, ctx)?;
        ctx.trace_shape("cag.out", tape.dims(out));
        Ok((out, gate))
    }

    pub fn param_count(&self) -> u64 {
        self.map_hi.param_count()
            + self.bn.param_count()
            + self.map_lo.param_count()
            + self.se.param_count()
            + self.dual.param_count()
            + self.map_out.param_count()
    }
}

/// Configuration of the virtual-part-aware block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VagSpec {
    pub in_joints: usize,
    pub grouped: usize,
    pub out: usize,
    pub groups: usize,
    pub tail_channels: usize,
}

impl Default for VagSpec {
    fn default() -> Self {
        VagSpec { in_joints: 25, grouped: 30, out: 32, groups: 10, tail_channels: 64 }
    }
}

impl VagSpec {
    pub fn validate(&self) -> Result<()> {
        check_dual_groups(self.grouped, self.groups)
    }
}

/// Virtual-part-aware grouping on the transposed (joints-as-channels)
/// tensor: pointwise map, channel attention, dual grouped convolution
/// with a 3x3 kernel, pointwise map, then a pool - conv3x3 - pool tail
/// that quarters the spatial extents and widens to `tail_channels`.
#[derive(Clone)]
pub struct Vag<E: Element> {
    pub spec: VagSpec,
    pub map_in: Conv2d<E>,
    pub se: SeAttention<E>,
    pub dual: DualGroupedConv<E>,
    pub map_out: Conv2d<E>,
    pub tail: Conv2d<E>,
}

impl<E: Element> Vag<E> {
    pub fn new(spec: VagSpec, rng: &mut ChaCha20Rng) -> Result<Self> {
        spec.validate()?;
        let map_in = Conv2d::new(Conv2dSpec::pointwise(spec.in_joints, spec.grouped), rng)?;
        let se = SeAttention::new(spec.grouped, 1, rng)?;
        let dual = DualGroupedConv::new(spec.grouped, spec.groups, (3, 3), rng)?;
        let map_out = Conv2d::new(Conv2dSpec::pointwise(spec.grouped, spec.out), rng)?;
        let tail =
            Conv2d::new(Conv2dSpec::new(spec.out, spec.tail_channels, (3, 3), 1, (1, 1)), rng)?;
        Ok(Vag { spec, map_in, se, dual, map_out, tail })
    }

    /// Returns the block output `(N, tail_channels, T/4, C'/4)` and the
    /// attention gate.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, ctx: &mut Ctx) -> Result<(Var, Var)> {
        let d = tape.dims(x);
        if d[1] != self.spec.in_joints {
            return Err(Error::shape(format!(
                "vag expects {} joint channels, got {}",
                self.spec.in_joints, d[1]
            )));
        }
        let h = self.map_in.forward(tape, x, ctx)?;
        ctx.trace_shape("vag.map_in", tape.dims(h));
        let (attended, gate) = self.se.forward(tape, h, ctx)?;
        ctx.trace_shape("vag.se", tape.dims(attended));
        let grouped = self.dual.forward(tape, attended, ctx)?;
        ctx.trace_shape("vag.dual", tape.dims(grouped));
        let h = self.map_out.forward(tape, grouped, ctx)?;
        ctx.trace_shape("vag.map_out", tape.dims(h));
        let h = pool2_clamped(tape, h)?;
        let h = self.tail.forward(tape, h, ctx)?;
        let out = pool2_clamped(tape, h)?;
        ctx.trace_shape("vag.tail", tape.dims(out));
        Ok((out, gate))
    }

    pub fn param_count(&self) -> u64 {
        self.map_in.param_count()
            + self.se.param_count()
            + self.dual.param_count()
            + self.map_out.param_count()
            + self.tail.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::conv2d_raw;
    use crate::tape::finite_diff_check;
    use crate::tensor::Tensor4;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn zeroed<E: Element>(conv: &mut Conv2d<E>) {
        conv.weight = Tensor4::zeros(conv.spec.weight_dims()).requires_grad(true);
        if let Some(b) = conv.bias.as_mut() {
            *b = Tensor4::zeros(b.dims()).requires_grad(true);
        }
    }

    #[test]
    fn dual_conv_group_layout_matches_spec() {
        let dual = DualGroupedConv::<f32>::new(30, 10, (3, 1), &mut rng(1)).unwrap();
        // 10 groups of 3 channels on branch A, 5 groups of 6 on branch B.
        assert_eq!(dual.branch_a.spec.weight_dims(), [30, 3, 3, 1]);
        assert_eq!(dual.branch_b.spec.weight_dims(), [30, 6, 1, 1]);
        assert_eq!(dual.branch_a.spec.padding, (1, 0));
    }

    #[test]
    fn dual_conv_rejects_bad_divisibility() {
        assert!(DualGroupedConv::<f32>::new(30, 8, (3, 1), &mut rng(2)).is_err());
        assert!(DualGroupedConv::<f32>::new(30, 5, (3, 1), &mut rng(2)).is_err());
        // 32 channels work with 8 groups (and 4 on branch B).
        assert!(DualGroupedConv::<f32>::new(32, 8, (3, 3), &mut rng(2)).is_ok());
    }

    #[test]
    fn dual_conv_zero_weights_give_zero_output() {
        let mut dual = DualGroupedConv::<f32>::new(6, 2, (3, 1), &mut rng(3)).unwrap();
        zeroed(&mut dual.branch_a);
        zeroed(&mut dual.branch_b);
        let x = Tensor4::rand_uniform([1, 6, 4, 3], -1.0, 1.0, &mut rng(4));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let mut ctx = Ctx::eval();
        let y = dual.forward(&mut tape, xv, &mut ctx).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_conv_equals_sum_of_branches() {
        let dual = DualGroupedConv::<f64>::new(30, 10, (3, 1), &mut rng(5)).unwrap();
        let x = Tensor4::rand_uniform([2, 30, 6, 5], -1.0, 1.0, &mut rng(6));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let y = dual.forward(&mut tape, xv, &mut ctx).unwrap();

        let a = conv2d_raw(&x, &dual.branch_a.weight, dual.branch_a.bias.as_ref(), &dual.branch_a.spec).unwrap();
        let b = conv2d_raw(&x, &dual.branch_b.weight, dual.branch_b.bias.as_ref(), &dual.branch_b.spec).unwrap();
        let want = a.add(&b).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn dual_conv_with_single_groups_is_two_full_convolutions() {
        let dual = DualGroupedConv::<f64>::new(4, 2, (3, 3), &mut rng(7)).unwrap();
        // groups (2, 1): branch B is already a full convolution; rebuild A
        // as a full convolution with the same block-diagonal weights.
        let x = Tensor4::rand_uniform([1, 4, 4, 4], -1.0, 1.0, &mut rng(8));
        let mut full_w = Tensor4::zeros([4, 4, 3, 3]);
        for o in 0..4 {
            let g = o / 2;
            for icl in 0..2 {
                for p in 0..3 {
                    for q in 0..3 {
                        full_w.set([o, g * 2 + icl, p, q], dual.branch_a.weight.at([o, icl, p, q]));
                    }
                }
            }
        }
        let full_spec = Conv2dSpec::new(4, 4, (3, 3), 1, (1, 1));
        let a = conv2d_raw(&x, &full_w, dual.branch_a.bias.as_ref(), &full_spec).unwrap();
        let b = conv2d_raw(&x, &dual.branch_b.weight, dual.branch_b.bias.as_ref(), &dual.branch_b.spec).unwrap();
        let want = a.add(&b).unwrap();

        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let mut ctx = Ctx::eval();
        let y = dual.forward(&mut tape, xv, &mut ctx).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn cag_shape_chain() {
        let cag = Cag::<f32>::new(CagSpec::default(), &mut rng(9)).unwrap();
        let mut ctx = Ctx::eval();
        for (t, v) in [(64, 25), (8, 5)] {
            let x = Tensor4::rand_uniform([1, 3, t, v], -1.0, 1.0, &mut rng(10));
            let mut tape = Tape::inference();
            let xv = tape.leaf(x);
            let (y, gate) = cag.forward(&mut tape, xv, &mut ctx).unwrap();
            assert_eq!(tape.dims(y), [1, 32, t, v]);
            assert_eq!(tape.dims(gate), [1, 30, 1, 1]);
        }
    }

    #[test]
    fn cag_rejects_wrong_coordinate_extent() {
        let cag = Cag::<f32>::new(CagSpec::default(), &mut rng(11)).unwrap();
        let x = Tensor4::zeros([1, 4, 8, 5]);
        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let mut ctx = Ctx::eval();
        assert!(matches!(cag.forward(&mut tape, xv, &mut ctx), Err(Error::Shape(_))));
    }

    #[test]
    fn cag_with_unit_gate_and_dead_branch_b_composes_layerwise() {
        let mut cag = Cag::<f64>::new(CagSpec::default(), &mut rng(12)).unwrap();
        // Force the sigmoid gate to exactly 1 and kill branch B.
        zeroed(&mut cag.se.fc2);
        cag.se.fc2.bias = Some(Tensor4::full([1, 30, 1, 1], 40.0).requires_grad(true));
        zeroed(&mut cag.dual.branch_b);

        let x = Tensor4::rand_uniform([1, 3, 8, 5], -1.0, 1.0, &mut rng(13));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let (y, _) = cag.forward(&mut tape, xv, &mut ctx).unwrap();

        // Layer-by-layer oracle: map_out(conv_a(map_lo(relu(bn_eval(map_hi(x)))))).
        let h = conv2d_raw(&x, &cag.map_hi.weight, cag.map_hi.bias.as_ref(), &cag.map_hi.spec).unwrap();
        let (rm, rv) = cag.bn.running_stats();
        let eps = cag.bn.eps;
        let mut bn_out = Tensor4::zeros(h.dims());
        for n in 0..h.dims()[0] {
            for c in 0..h.dims()[1] {
                for t in 0..h.dims()[2] {
                    for v in 0..h.dims()[3] {
                        let xh = (h.at([n, c, t, v]) - rm.at([0, c, 0, 0]))
                            / (rv.at([0, c, 0, 0]) + eps).sqrt();
                        bn_out.set([n, c, t, v], xh * cag.bn.gamma.at([0, c, 0, 0]) + cag.bn.beta.at([0, c, 0, 0]));
                    }
                }
            }
        }
        let relu = bn_out.map(|v| if v > 0.0 { v } else { 0.0 });
        let lo = conv2d_raw(&relu, &cag.map_lo.weight, cag.map_lo.bias.as_ref(), &cag.map_lo.spec).unwrap();
        let a = conv2d_raw(&lo, &cag.dual.branch_a.weight, cag.dual.branch_a.bias.as_ref(), &cag.dual.branch_a.spec).unwrap();
        let want = conv2d_raw(&a, &cag.map_out.weight, cag.map_out.bias.as_ref(), &cag.map_out.spec).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-9);
    }

    #[test]
    fn vag_shape_chain_at_full_and_reduced_extents() {
        let vag = Vag::<f32>::new(VagSpec::default(), &mut rng(14)).unwrap();
        let mut ctx = Ctx::eval();
        let x = Tensor4::rand_uniform([1, 25, 64, 32], -1.0, 1.0, &mut rng(15));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let (y, gate) = vag.forward(&mut tape, xv, &mut ctx).unwrap();
        assert_eq!(tape.dims(y), [1, 64, 16, 8]);
        assert_eq!(tape.dims(gate), [1, 30, 1, 1]);

        // Reduced temporal extent: 8 -> 2.
        let spec = VagSpec { in_joints: 5, ..VagSpec::default() };
        let vag = Vag::<f32>::new(spec, &mut rng(16)).unwrap();
        let x = Tensor4::rand_uniform([1, 5, 8, 32], -1.0, 1.0, &mut rng(17));
        let mut tape = Tape::inference();
        let xv = tape.leaf(x);
        let (y, _) = vag.forward(&mut tape, xv, &mut ctx).unwrap();
        assert_eq!(tape.dims(y), [1, 64, 2, 8]);
    }

    #[test]
    fn vag_n6_variant_group_layout() {
        let spec = VagSpec { groups: 6, ..VagSpec::default() };
        let vag = Vag::<f32>::new(spec, &mut rng(18)).unwrap();
        // 6 groups of 5 channels on branch A, 3 groups of 10 on branch B.
        assert_eq!(vag.dual.branch_a.spec.weight_dims(), [30, 5, 3, 3]);
        assert_eq!(vag.dual.branch_b.spec.weight_dims(), [30, 10, 1, 1]);
    }

    #[test]
    fn vag_zero_input_matches_bias_propagation_oracle() {
        let spec = VagSpec { in_joints: 5, ..VagSpec::default() };
        let vag = Vag::<f64>::new(spec, &mut rng(19)).unwrap();
        let x = Tensor4::zeros([1, 5, 8, 32]);
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let mut ctx = Ctx::eval();
        let (y, _) = vag.forward(&mut tape, xv, &mut ctx).unwrap();

        let h = conv2d_raw(&x, &vag.map_in.weight, vag.map_in.bias.as_ref(), &vag.map_in.spec).unwrap();
        // SE on a constant-channel map: squeeze equals the channel value.
        let s = h.reduce_mean(2).unwrap().reduce_mean(3).unwrap();
        let z = conv2d_raw(&s, &vag.se.fc1.weight, vag.se.fc1.bias.as_ref(), &vag.se.fc1.spec)
            .unwrap()
            .map(|v| if v > 0.0 { v } else { 0.0 });
        let e = conv2d_raw(&z, &vag.se.fc2.weight, vag.se.fc2.bias.as_ref(), &vag.se.fc2.spec).unwrap();
        let gate = e.map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut attended = Tensor4::zeros(h.dims());
        for c in 0..h.dims()[1] {
            for t in 0..h.dims()[2] {
                for v in 0..h.dims()[3] {
                    attended.set([0, c, t, v], h.at([0, c, t, v]) * gate.at([0, c, 0, 0]));
                }
            }
        }
        let a = conv2d_raw(&attended, &vag.dual.branch_a.weight, vag.dual.branch_a.bias.as_ref(), &vag.dual.branch_a.spec).unwrap();
        let b = conv2d_raw(&attended, &vag.dual.branch_b.weight, vag.dual.branch_b.bias.as_ref(), &vag.dual.branch_b.spec).unwrap();
        let summed = a.add(&b).unwrap();
        let mo = conv2d_raw(&summed, &vag.map_out.weight, vag.map_out.bias.as_ref(), &vag.map_out.spec).unwrap();
        let (p1, _) = crate::layers::maxpool_raw(&mo, 2, 2).unwrap();
        let t1 = conv2d_raw(&p1, &vag.tail.weight, vag.tail.bias.as_ref(), &vag.tail.spec).unwrap();
        let (want, _) = crate::layers::maxpool_raw(&t1, 2, 2).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn shape_chain_is_invariant_across_legal_group_counts() {
        // n = 8 needs a grouped width divisible by 8 and 4.
        for (n, grouped) in [(6, 30), (8, 32), (10, 30)] {
            let cspec = CagSpec { grouped, groups: n, ..CagSpec::default() };
            let cag = Cag::<f32>::new(cspec, &mut rng(20 + n as u64)).unwrap();
            let x = Tensor4::rand_uniform([1, 3, 8, 5], -1.0, 1.0, &mut rng(30 + n as u64));
            let mut tape = Tape::inference();
            let xv = tape.leaf(x);
            let mut ctx = Ctx::eval();
            let (y, _) = cag.forward(&mut tape, xv, &mut ctx).unwrap();
            assert_eq!(tape.dims(y), [1, 32, 8, 5], "n = {n}");

            let vspec = VagSpec { in_joints: 5, grouped, groups: n, ..VagSpec::default() };
            let vag = Vag::<f32>::new(vspec, &mut rng(40 + n as u64)).unwrap();
            let x = Tensor4::rand_uniform([1, 5, 8, 32], -1.0, 1.0, &mut rng(50 + n as u64));
            let mut tape = Tape::inference();
            let xv = tape.leaf(x);
            let (y, _) = vag.forward(&mut tape, xv, &mut ctx).unwrap();
            assert_eq!(tape.dims(y), [1, 64, 2, 8], "n = {n}");
        }
    }

    #[test]
    fn blocks_pass_finite_difference_checks_at_tiny_shapes() {
        let cag = Cag::<f64>::new(CagSpec::default(), &mut rng(60)).unwrap();
        let x = Tensor4::rand_uniform([1, 3, 8, 5], -1.0, 1.0, &mut rng(61));
        let err = finite_diff_check(
            |tape, v| {
                let mut ctx = Ctx::eval();
                let (y, _) = cag.forward(tape, v, &mut ctx)?;
                Ok(tape.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cag fd error {err}");

        let spec = VagSpec { in_joints: 5, ..VagSpec::default() };
        let vag = Vag::<f64>::new(spec, &mut rng(62)).unwrap();
        let x = Tensor4::rand_uniform([1, 5, 8, 32], -1.0, 1.0, &mut rng(63));
        let err = finite_diff_check(
            |tape, v| {
                let mut ctx = Ctx::eval();
                let (y, _) = vag.forward(tape, v, &mut ctx)?;
                Ok(tape.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "vag fd error {err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cag = Cag::<f32>::new(CagSpec::default(), &mut rng(64)).unwrap();
        let x = Tensor4::rand_uniform([2, 3, 8, 5], -1.0, 1.0, &mut rng(65));
        let run = || {
            let mut tape = Tape::inference();
            let xv = tape.leaf(x.clone());
            let mut ctx = Ctx::eval();
            let (y, _) = cag.forward(&mut tape, xv, &mut ctx).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
