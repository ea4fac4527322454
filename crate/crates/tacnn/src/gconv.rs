//! Graph convolution realized as a pointwise convolution.
//!
//! For `x` laid out `(N, C, T, V)`, graph convolution right-multiplies by
//! an adjacency matrix: `y[c,t,v] = sum_u x[c,t,u] * a[u,v]`, optionally
//! after a channel transform `W`. Transposing joints into the channel
//! axis (`(N, V, T, C)`) turns that joint mixing into ordinary 1x1
//! channel mixing, which this module verifies numerically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::layers::{conv2d_raw, Conv2dSpec};
use crate::tensor::{Element, Tensor4};

/// Dense V x V adjacency weights. No structural constraint is imposed;
/// entries only need to be finite.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix<E: Element> {
    size: usize,
    data: Vec<E>,
}

impl<E: Element> AdjacencyMatrix<E> {
    pub fn from_vec(size: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::input(format!(
                "adjacency: {} entries for size {size}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("adjacency entries must be finite".to_string()));
        }
        Ok(AdjacencyMatrix { size, data })
    }

    pub fn identity(size: usize) -> Self {
        let mut data = vec![E::zero(); size * size];
        for i in 0..size {
            data[i * size + i] = E::one();
        }
        AdjacencyMatrix { size, data }
    }

    pub fn rand_uniform(size: usize, rng: &mut ChaCha20Rng) -> Self {
        let data = (0..size * size)
            .map(|_| E::from_f64_lossy(rng.gen_range(-1.0..1.0)))
            .collect();
        AdjacencyMatrix { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> E {
        self.data[u * self.size + v]
    }
}

/// Parameters of a graph convolution: an optional channel transform
/// (rows = output channels) and the adjacency.
#[derive(Debug, Clone)]
pub struct GraphConvParams<E: Element> {
    /// `(C', C, 1, 1)`; `None` keeps the channel count and skips the transform.
    pub transform: Option<Tensor4<E>>,
    pub adjacency: AdjacencyMatrix<E>,
}

/// `y[n,c',t,v] = sum_u x'[n,c',t,u] * a[u,v]` with `x' = W x` when a
/// transform is present.
pub fn graph_conv<E: Element>(x: &Tensor4<E>, params: &GraphConvParams<E>) -> Result<Tensor4<E>> {
    let d = x.dims();
    if d[3] != params.adjacency.size() {
        return Err(Error::shape(format!(
            "graph_conv: {} joints vs adjacency of size {}",
            d[3],
            params.adjacency.size()
        )));
    }
    let transformed;
    let input = match params.transform.as_ref() {
        Some(w) => {
            let wd = w.dims();
            if wd[1] != d[1] || wd[2] != 1 || wd[3] != 1 {
                return Err(Error::shape(format!(
                    "graph_conv: transform {:?} does not accept {} channels",
                    wd, d[1]
                )));
            }
            let mut out = Tensor4::zeros([d[0], wd[0], d[2], d[3]]);
            for n in 0..d[0] {
                for co in 0..wd[0] {
                    for t in 0..d[2] {
                        for v in 0..d[3] {
                            let mut acc = E::zero();
                            for ci in 0..d[1] {
                                acc = acc + w.at([co, ci, 0, 0]) * x.at([n, ci, t, v]);
                            }
                            out.set([n, co, t, v], acc);
                        }
                    }
                }
            }
            transformed = out;
            &transformed
        }
        None => x,
    };
    let id = input.dims();
    let a = &params.adjacency;
    let mut out = Tensor4::zeros(id);
    for n in 0..id[0] {
        for c in 0..id[1] {
            for t in 0..id[2] {
                for v in 0..id[3] {
                    let mut acc = E::zero();
                    for u in 0..id[3] {
                        acc = acc + input.at([n, c, t, u]) * a.at(u, v);
                    }
                    out.set([n, c, t, v], acc);
                }
            }
        }
    }
    out.debug_check_finite("graph_conv", &[x]);
    Ok(out)
}

/// Embeds an adjacency matrix as 1x1 convolution weights over the
/// joints-as-channels layout: `w[v, u, 0, 0] = a[u, v]`.
///
/// The transpose falls out of matching the two index conventions. Take
/// two joints and `a = [[a00, a01], [a10, a11]]`. Right-multiplication
/// gives `y[.., v=0] = x[.., u=0] a00 + x[.., u=1] a10`. After
/// transposition the convolution computes output channel 0 as
/// `sum_u w[0, u] x[u, ..]`, so `w[0, 0] = a00` and `w[0, 1] = a10`:
/// the kernel is the transpose of `a`.
pub fn adjacency_to_conv_weights<E: Element>(a: &AdjacencyMatrix<E>) -> Tensor4<E> {
    let v = a.size();
    let mut w = Tensor4::zeros([v, v, 1, 1]);
    for vo in 0..v {
        for u in 0..v {
            w.set([vo, u, 0, 0], a.at(u, vo));
        }
    }
    w
}

fn conv_route<E: Element>(x: &Tensor4<E>, params: &GraphConvParams<E>) -> Result<Tensor4<E>> {
    let mut h = x.clone();
    if let Some(w) = params.transform.as_ref() {
        // The channel transform is itself a pointwise convolution, applied
        // before the transposition so it mixes the coordinate axis.
        let mut spec = Conv2dSpec::pointwise(w.dims()[1], w.dims()[0]);
        spec.bias = false;
        h = conv2d_raw(&h, w, None, &spec)?;
    }
    let t = h.permute([0, 3, 2, 1])?;
    let aw = adjacency_to_conv_weights(&params.adjacency);
    let v = params.adjacency.size();
    let mut spec = Conv2dSpec::pointwise(v, v);
    spec.bias = false;
    let mixed = conv2d_raw(&t, &aw, None, &spec)?;
    mixed.permute([0, 3, 2, 1])
}

/// Result of a randomized equivalence run.
#[derive(Debug, Clone)]
pub struct EquivReport {
    pub trials: usize,
    pub max_abs_err: f64,
    pub threshold: f64,
    pub passed: usize,
}

impl EquivReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.trials
    }
}

/// Shape grid used by the randomized equivalence checks.
pub const EQUIV_JOINTS: [usize; 3] = [3, 5, 25];
pub const EQUIV_CHANNELS: [usize; 3] = [1, 3, 8];
pub const EQUIV_FRAMES: [usize; 2] = [1, 4];

/// Runs `trials` randomized equivalence checks between `graph_conv` and
/// the transposed-pointwise-convolution route, with and without a channel
/// transform, over the shape grid. Reports the worst absolute error and
/// how many trials stayed under `threshold`.
pub fn equiv_report<E: Element>(trials: usize, threshold: f64, seed: u64) -> Result<EquivReport> {
    if trials < 1 {
        return Err(Error::input("equiv_report needs at least one trial".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut max_abs_err = 0.0f64;
    let mut passed = 0;
    for _ in 0..trials {
        let v = EQUIV_JOINTS[rng.gen_range(0..EQUIV_JOINTS.len())];
        let c = EQUIV_CHANNELS[rng.gen_range(0..EQUIV_CHANNELS.len())];
        let t = EQUIV_FRAMES[rng.gen_range(0..EQUIV_FRAMES.len())];
        let x = Tensor4::<E>::rand_uniform([1, c, t, v], -1.0, 1.0, &mut rng);
        let adjacency = AdjacencyMatrix::rand_uniform(v, &mut rng);

        let plain = GraphConvParams { transform: None, adjacency: adjacency.clone() };
        let err_plain = graph_conv(&x, &plain)?.max_abs_diff(&conv_route(&x, &plain)?)?;

        let c_out = rng.gen_range(1..=8);
        let w = Tensor4::<E>::rand_uniform([c_out, c, 1, 1], -1.0, 1.0, &mut rng);
        let with_w = GraphConvParams { transform: Some(w), adjacency };
        let err_w = graph_conv(&x, &with_w)?.max_abs_diff(&conv_route(&x, &with_w)?)?;

        let err = err_plain.max(err_w);
        max_abs_err = max_abs_err.max(err);
        if err < threshold {
            passed += 1;
        }
    }
    Ok(EquivReport { trials, max_abs_err, threshold, passed })
}
