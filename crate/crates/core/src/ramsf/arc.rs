//! Adaptive rotated convolution.
//!
//! A routing perceptron looks at the pooled input and predicts one angle and
//! one mixing weight per base kernel. Each kernel is rotated by its angle,
//! the rotated kernels are mixed with the softmax weights, and the mixture
//! convolves the input. Mixing before convolving is the same as summing the
//! weighted per-kernel convolutions, since convolution is linear in the
//! kernel.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::autodiff::{rotation_taps, Graph, Var};
use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ArcParams {
    /// `n x C_out x C_in x k x k` base kernels.
    pub kernels: ParamId,
    pub bias: ParamId,
    pub route_w1: ParamId,
    pub route_b1: ParamId,
    /// Emits `2n` values: `n` angle logits then `n` weight logits.
    pub route_w2: ParamId,
    pub route_b2: ParamId,
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub hidden: usize,
    /// When false the angles are held at zero.
    pub rotate: bool,
}

impl ArcParams {
    pub fn routing_hidden(c_in: usize, reduction: usize) -> usize {
        (c_in / reduction.max(1)).max(4)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        routing_reduction: usize,
        rotate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=8).contains(&n) {
            return Err(TensorError::Config(format!(
                "ARC kernel count must be 1..=8, got {n}"
            )));
        }
        if k % 2 == 0 {
            return Err(TensorError::Config(format!(
                "ARC kernel size must be odd, got {k}"
            )));
        }
        let hidden = Self::routing_hidden(c_in, routing_reduction);
        let nm = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            kernels: store.he(nm("kernels"), &[n, c_out, c_in, k, k], c_in * k * k, rng),
            bias: store.zeros(nm("bias"), &[c_out]),
            route_w1: store.he(nm("route_w1"), &[hidden, c_in], c_in, rng),
            route_b1: store.zeros(nm("route_b1"), &[hidden]),
            route_w2: store.randn(
                nm("route_w2"),
                &[2 * n, hidden],
                0.1 / (hidden as f64).sqrt(),
                rng,
            ),
            route_b2: store.zeros(nm("route_b2"), &[2 * n]),
            n,
            c_in,
            c_out,
            k,
            hidden,
            rotate,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.kernels,
            self.bias,
            self.route_w1,
            self.route_b1,
            self.route_w2,
            self.route_b2,
        ]
    }
}

/// Predicts `(theta, lambda)`: `n` angles in `[-pi/2, pi/2]` (shape `[n]`)
/// and `n` convex mixing weights (shape `1 x n`).
pub fn arc_routing<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &ArcParams,
    x: Var,
) -> Result<(Var, Var)> {
    let pooled = g.global_avg_pool(x)?;
    let c = g.shape(pooled)[0];
    if c != p.c_in {
        return Err(TensorError::Shape {
            op: "arc_routing",
            lhs: g.shape(x).to_vec(),
            rhs: vec![p.c_in],
        });
    }
    let pooled = g.reshape(pooled, &[1, c])?;
    let hidden = g.conv1d(pooled, b.var(p.route_w1), b.var(p.route_b1))?;
    let hidden = g.relu(hidden)?;
    let logits = g.conv1d(hidden, b.var(p.route_w2), b.var(p.route_b2))?;
    let theta = if p.rotate {
        let raw = g.slice(logits, 1, 0, p.n)?;
        let squashed = g.tanh(raw)?;
        let theta = g.scale(squashed, T::lit(FRAC_PI_2))?;
        g.reshape(theta, &[p.n])?
    } else {
        g.constant(Tensor::zeros(&[p.n]))
    };
    let weight_logits = g.slice(logits, 1, p.n, 2 * p.n)?;
    let lambda = g.softmax_lastdim(weight_logits)?;
    Ok((theta, lambda))
}

/// Rotates every `k x k` plane of a `C_out x C_in x k x k` kernel by
/// `theta` radians with bilinear resampling about the center.
pub fn rotate_kernel<T: Real>(w: &Tensor<T>, theta: T) -> Result<Tensor<T>> {
    let [c_out, c_in, k, k2] = w.shape()[..] else {
        return Err(TensorError::Contract(format!(
            "rotate_kernel expects C_out x C_in x k x k, got {:?}",
            w.shape()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(TensorError::Contract(format!(
            "rotate_kernel needs an odd square kernel, got {k}x{k2}"
        )));
    }
    let plane = k * k;
    let taps = rotation_taps(k, theta);
    let mut out = vec![T::zero(); w.numel()];
    for p in 0..c_out * c_in {
        let base = p * plane;
        for t in &taps {
            out[base + t.dst] = out[base + t.dst] + t.weight * w.data()[base + t.src];
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Rotated-kernel convolution with externally supplied angles (`[n]`) and
/// mixing weights (`1 x n`).
pub fn arc_conv_with_routing<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &ArcParams,
    x: Var,
    theta: Var,
    lambda: Var,
) -> Result<Var> {
    let bank = b.var(p.kernels);
    let rotated = g.rotate_kernels(bank, theta)?;
    let per_kernel = p.c_out * p.c_in * p.k * p.k;
    let flat = g.reshape(rotated, &[p.n, per_kernel])?;
    let mixed = g.matmul(lambda, flat)?;
    let kernel = g.reshape(mixed, &[p.c_out, p.c_in, p.k, p.k])?;
    g.conv2d(x, kernel, Some(b.var(p.bias)), 1, p.k / 2)
}

/// Adaptive rotated convolution: route, rotate, mix, convolve.
pub fn arc_conv<T: Real>(g: &mut Graph<T>, b: &Bound, p: &ArcParams, x: Var) -> Result<Var> {
    let (theta, lambda) = arc_routing(g, b, p, x)?;
    arc_conv_with_routing(g, b, p, x, theta, lambda)
}
