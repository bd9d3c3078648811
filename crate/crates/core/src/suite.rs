//! The finite-difference gradient suite: every graph primitive and every
//! composite block, checked on randomized small shapes over many seeds.
//!
//! Each case reduces its output to a scalar through a fixed random
//! projection `sum(out * R)`, so every output element contributes to the
//! checked gradient.

use std::f64::consts::FRAC_PI_2;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var, OP_NAMES};
use crate::ctx::ForwardCtx;
use crate::error::{Result, TensorError};
use crate::gradcheck::{check_gradients, CheckOptions, CheckReport};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::ramsf::{
    arc_conv, linear_attention, ramsf_decode, ArcParams, AttentionMode, DenominatorCount,
    LinearAttentionParams, RamsfConfig, RamsfParams, ScalePyramid,
};
use crate::tensor::Tensor;
use crate::vlcam::{vlcam_forward, VlcamConfig, VlcamParams};

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Composite blocks checked in addition to [`OP_NAMES`].
pub const COMPOSITE_NAMES: &[&str] = &[
    "vlcam_forward",
    "linear_attention_channel",
    "linear_attention_spatial",
    "arc_conv",
    "ramsf_decode",
    "end_to_end",
];

/// Every case name, primitives first.
pub fn case_names() -> Vec<&'static str> {
    OP_NAMES.iter().chain(COMPOSITE_NAMES).copied().collect()
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub first_seed: u64,
    /// Restrict to these cases; empty runs all.
    pub only: Vec<String>,
    /// Op whose backward is deliberately corrupted (mutation check).
    pub fault: Option<String>,
    pub tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            only: Vec::new(),
            fault: None,
            tolerance: TOLERANCE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub seeds: u64,
    /// Seed that produced `max_rel_err`.
    pub worst_seed: u64,
    pub kink_retries: usize,
    pub skipped: usize,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| !c.passed(self.tolerance))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    /// One line per case.
    pub fn render(&self) -> String {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&format!(
                "{:<width$}  max_rel_err {:.3e}  checked {:>6}  kinks {:>3}  skipped {:>2}  seeds {:>3}  {:>7.2}s  {}\n",
                c.name,
                c.max_rel_err,
                c.checked,
                c.kink_retries,
                c.skipped,
                c.seeds,
                c.elapsed.as_secs_f64(),
                if c.passed(self.tolerance) {
                    "ok"
                } else {
                    "FAIL"
                },
            ));
        }
        out
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    if let Some(f) = &opts.fault {
        if !OP_NAMES.contains(&f.as_str()) {
            return Err(TensorError::Config(format!(
                "cannot inject a fault into unknown op `{f}`"
            )));
        }
    }
    let names: Vec<&str> = if opts.only.is_empty() {
        case_names()
    } else {
        for n in &opts.only {
            if !case_names().contains(&n.as_str()) {
                return Err(TensorError::Config(format!("unknown gradient case `{n}`")));
            }
        }
        case_names()
            .into_iter()
            .filter(|n| opts.only.iter().any(|o| o == n))
            .collect()
    };
    let mut cases = Vec::with_capacity(names.len());
    for name in names {
        cases.push(run_case(name, opts)?);
    }
    Ok(SuiteReport {
        cases,
        tolerance: opts.tolerance,
    })
}

/// Finite-difference settings per case. Composite losses sum thousands of
/// outputs, so at the primitives' step rounding error dominates; they use a
/// larger step with Richardson extrapolation instead.
pub fn case_options(name: &str) -> CheckOptions {
    if COMPOSITE_NAMES.contains(&name) {
        CheckOptions {
            step: COMPOSITE_STEP,
            richardson: true,
            ..CheckOptions::default()
        }
    } else {
        CheckOptions::default()
    }
}

pub const COMPOSITE_STEP: f64 = 1e-4;

pub fn run_case(name: &str, opts: &SuiteOptions) -> Result<CaseResult> {
    let start = Instant::now();
    let mut total = CheckReport::default();
    let mut worst_seed = opts.first_seed;
    for seed in opts.first_seed..opts.first_seed + opts.seeds {
        let check = CheckOptions {
            seed,
            fault: opts.fault.clone(),
            ..case_options(name)
        };
        let r = check_case(name, seed, &check)?;
        if r.max_rel_err > total.max_rel_err {
            worst_seed = seed;
        }
        total.merge(&r);
    }
    Ok(CaseResult {
        name: name.to_string(),
        max_rel_err: total.max_rel_err,
        checked: total.checked,
        seeds: opts.seeds,
        worst_seed,
        kink_retries: total.kink_retries,
        skipped: total.skipped,
        elapsed: start.elapsed(),
    })
}

fn rng_for(name: &str, seed: u64) -> ChaCha8Rng {
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal values pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    randn(rng, shape).map(|v| {
        if v.abs() < gap {
            v + gap.copysign(v)
        } else {
            v
        }
    })
}

/// `sum(out * R)` for a projection `R` fixed by `seed` and the output shape.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let r = g.constant(randn(&mut rng, &shape));
    let m = g.mul(out, r)?;
    g.sum(m)
}

fn op_case<F>(inputs: Vec<Tensor<f64>>, seed: u64, opts: &CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients(
        |g, v| {
            let out = f(g, v)?;
            project(g, out, seed)
        },
        &inputs,
        opts,
    )
}

/// Checks a block whose parameters live in `store`. Inputs are `extra`
/// followed by every parameter; `samples` bounds the entries checked per
/// input tensor.
fn store_case<F>(
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    samples: Option<usize>,
    seed: u64,
    opts: &CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let opts = CheckOptions {
        samples_per_input: samples,
        ..opts.clone()
    };
    check_gradients(
        |g, v| {
            let bound = Bound::from_vars(v[n_extra..].to_vec());
            let out = f(g, &bound, &v[..n_extra])?;
            project(g, out, seed)
        },
        &inputs,
        &opts,
    )
}

/// Replaces zero-initialized tensors (biases, residual gates) with random
/// values so that every branch carries gradient.
fn randomize_zeros(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).max_abs() == 0.0 {
            let shape = store.get(id).shape().to_vec();
            let t = Tensor::randn(&shape, 0.5, rng);
            store.set(id, t).expect("same shape");
        }
    }
}

pub fn check_case(name: &str, seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let mut rng = rng_for(name, seed);
    let r = &mut rng;
    let dim = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);
    match name {
        "matmul" => {
            let (m, k, n) = if seed == 0 {
                (5, 7, 3)
            } else {
                (dim(r, 1, 5), dim(r, 1, 6), dim(r, 1, 5))
            };
            let a = randn(r, &[m, k]);
            let b = randn(r, &[k, n]);
            op_case(vec![a, b], seed, opts, |g, v| g.matmul(v[0], v[1]))
        }
        "transpose" => {
            let x = {
                let s = [dim(r, 1, 5), dim(r, 1, 5)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, |g, v| g.transpose(v[0]))
        }
        "add" | "sub" | "mul" => {
            let shape = [dim(r, 1, 4), dim(r, 1, 4)];
            let a = randn(r, &shape);
            // Odd seeds exercise scalar broadcasting on alternating sides.
            let b = if seed % 2 == 1 {
                randn(r, &[1])
            } else {
                randn(r, &shape)
            };
            let (a, b) = if seed % 4 == 3 { (b, a) } else { (a, b) };
            let op = name.to_string();
            op_case(vec![a, b], seed, opts, move |g, v| match op.as_str() {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            let x = {
                let s = [dim(r, 1, 4), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, move |g, v| g.scale(v[0], c))
        }
        "add_const" => {
            let c = r.random_range(-2.0..2.0);
            let x = {
                let s = [dim(r, 1, 4), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, move |g, v| g.add_const(v[0], c))
        }
        "relu" => {
            let x = {
                let s = [dim(r, 1, 6), dim(r, 1, 4)];
                away_from_zero(r, &s, 0.05)
            };
            op_case(vec![x], seed, opts, |g, v| g.relu(v[0]))
        }
        "tanh" => {
            let x = {
                let s = [dim(r, 1, 5), dim(r, 1, 5)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, |g, v| g.tanh(v[0]))
        }
        "conv1d" => {
            let (l, ci, co) = (dim(r, 1, 5), dim(r, 1, 4), dim(r, 1, 4));
            let x = randn(r, &[l, ci]);
            let w = randn(r, &[co, ci]);
            let b = randn(r, &[co]);
            op_case(vec![x, w, b], seed, opts, |g, v| g.conv1d(v[0], v[1], v[2]))
        }
        "conv2d" => {
            let (c, co) = if seed == 0 {
                (2, 2)
            } else {
                (dim(r, 1, 3), dim(r, 1, 3))
            };
            let (h, w) = if seed == 0 {
                (5, 5)
            } else {
                (dim(r, 3, 6), dim(r, 3, 6))
            };
            let k = if seed == 0 || r.random_bool(0.7) {
                3
            } else {
                1
            };
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, k / 2);
            let with_bias = seed % 3 != 2;
            let mut inputs = vec![randn(r, &[c, h, w]), randn(r, &[co, c, k, k])];
            if with_bias {
                inputs.push(randn(r, &[co]));
            }
            op_case(inputs, seed, opts, move |g, v| {
                g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
            })
        }
        "instance_norm" => {
            let (l, c) = if seed == 0 {
                (8, 4)
            } else {
                (dim(r, 2, 7), dim(r, 1, 4))
            };
            let x = randn(r, &[l, c]);
            op_case(vec![x], seed, opts, |g, v| g.instance_norm(v[0]))
        }
        "softmax_lastdim" => {
            let x = {
                let s = [dim(r, 1, 4), dim(r, 1, 6)];
                randn(r, &s)
            }
            .map(|v| 2.0 * v);
            op_case(vec![x], seed, opts, |g, v| g.softmax_lastdim(v[0]))
        }
        "concat" => {
            let rank3 = seed % 2 == 0;
            let axis = if rank3 { 0 } else { dim(r, 0, 1) };
            let base: Vec<usize> = if rank3 {
                vec![0, dim(r, 1, 3), dim(r, 1, 3)]
            } else {
                vec![dim(r, 1, 3), dim(r, 1, 3)]
            };
            let parts = dim(r, 2, 3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dim(r, 1, 3);
                    randn(r, &s)
                })
                .collect();
            op_case(inputs, seed, opts, move |g, v| g.concat(v, axis))
        }
        "slice" => {
            let shape = [dim(r, 2, 5), dim(r, 2, 5)];
            let axis = dim(r, 0, 1);
            let start = dim(r, 0, shape[axis] - 1);
            let end = dim(r, start + 1, shape[axis]);
            let x = randn(r, &shape);
            op_case(vec![x], seed, opts, move |g, v| {
                g.slice(v[0], axis, start, end)
            })
        }
        "reshape" => {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            let x = randn(r, &[a, b]);
            op_case(vec![x], seed, opts, move |g, v| g.reshape(v[0], &[b, a, 1]))
        }
        "upsample_bilinear" => {
            let factor = if seed % 3 == 0 { 4 } else { 2 };
            let x = {
                let s = [dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, move |g, v| {
                g.upsample_bilinear(v[0], factor)
            })
        }
        "global_avg_pool" => {
            let x = {
                let s = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, |g, v| g.global_avg_pool(v[0]))
        }
        "dropout" => {
            // Train mode with a fixed mask seed, so the op is deterministic.
            let x = {
                let s = [dim(r, 2, 6), dim(r, 2, 6)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, move |g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                g.dropout(v[0], 0.3, &mut mask_rng)
            })
        }
        "cross_entropy" => {
            let (h, w) = (dim(r, 1, 4), dim(r, 1, 4));
            let logits = randn(r, &[2, h, w]).map(|v| 2.0 * v);
            let target: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.5)).collect();
            op_case(vec![logits], seed, opts, move |g, v| {
                g.cross_entropy_2class(v[0], &target)
            })
        }
        "sum" => {
            let x = {
                let s = [dim(r, 1, 4), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, |g, v| g.sum(v[0]))
        }
        "sum_axis0" => {
            let x = {
                let s = [dim(r, 1, 5), dim(r, 1, 4)];
                randn(r, &s)
            };
            op_case(vec![x], seed, opts, |g, v| g.sum_axis0(v[0]))
        }
        "l2_normalize_rows" => {
            let (m, d) = if seed == 0 {
                (3, 5)
            } else {
                (dim(r, 1, 5), dim(r, 1, 5))
            };
            let x = randn(r, &[m, d]);
            op_case(vec![x], seed, opts, |g, v| g.l2_normalize_rows(v[0]))
        }
        "div_col" => {
            let (m, d) = (dim(r, 1, 5), dim(r, 1, 4));
            let a = randn(r, &[m, d]);
            let b = randn(r, &[m, 1]).map(|v| v.abs() + 0.5);
            op_case(vec![a, b], seed, opts, |g, v| g.div_col(v[0], v[1]))
        }
        "gather_rows" => {
            let (vocab, d) = (dim(r, 2, 6), dim(r, 1, 4));
            let ids: Vec<usize> = (0..dim(r, 1, 6))
                .map(|_| r.random_range(0..vocab))
                .collect();
            let table = randn(r, &[vocab, d]);
            op_case(vec![table], seed, opts, move |g, v| {
                g.gather_rows(v[0], &ids)
            })
        }
        "rotate_kernels" => {
            let n = dim(r, 1, 3);
            let k = if seed % 4 == 3 { 5 } else { 3 };
            let w = {
                let s = [n, dim(r, 1, 2), dim(r, 1, 2), k, k];
                randn(r, &s)
            };
            let theta = Tensor::from_fn(&[n], |_| r.random_range(-FRAC_PI_2..FRAC_PI_2));
            op_case(vec![w, theta], seed, opts, |g, v| {
                g.rotate_kernels(v[0], v[1])
            })
        }
        "vlcam_forward" => {
            let heads = dim(r, 1, 2);
            let cfg = VlcamConfig {
                heads,
                c_k: 2 * heads,
                ..VlcamConfig::default()
            };
            let c_v = heads * dim(r, 1, 2);
            let c_l = dim(r, 2, 4);
            let tokens = dim(r, 2, 6);
            let words = dim(r, 1, 4);
            let mut store = ParamStore::new();
            let p = VlcamParams::new(&mut store, "vlcam", &cfg, tokens, c_v, c_l, r)?;
            randomize_zeros(&mut store, r);
            let f_v = randn(r, &[tokens, c_v]);
            let f_l = randn(r, &[words, c_l]);
            store_case(&store, vec![f_v, f_l], None, seed, opts, move |g, b, x| {
                vlcam_forward(g, b, &p, x[0], x[1], &mut ForwardCtx::eval())
            })
        }
        "linear_attention_channel" | "linear_attention_spatial" => {
            let mode = if name.ends_with("channel") {
                AttentionMode::Channel
            } else {
                AttentionMode::Spatial
            };
            let c = dim(r, 2, 4);
            let (h, w) = (dim(r, 1, 3), dim(r, 2, 3));
            let mut store = ParamStore::new();
            let p = LinearAttentionParams::new(
                &mut store,
                "attn",
                mode,
                c,
                2,
                1e-6,
                DenominatorCount::Tokens,
                r,
            )?;
            randomize_zeros(&mut store, r);
            let x = randn(r, &[c, h, w]);
            store_case(&store, vec![x], None, seed, opts, move |g, b, x| {
                linear_attention(g, b, &p, x[0])
            })
        }
        "arc_conv" => {
            let n = dim(r, 1, 4);
            let (c_in, c_out) = (dim(r, 1, 3), dim(r, 1, 3));
            let mut store = ParamStore::new();
            let p = ArcParams::new(&mut store, "arc", n, c_in, c_out, 3, 4, true, r)?;
            randomize_zeros(&mut store, r);
            // Larger routing weights so the angles move away from zero.
            let w2 = store.get(p.route_w2).map(|v| 20.0 * v);
            store.set(p.route_w2, w2)?;
            let x = {
                let s = [c_in, dim(r, 3, 5), dim(r, 3, 5)];
                randn(r, &s)
            };
            store_case(&store, vec![x], None, seed, opts, move |g, b, x| {
                arc_conv(g, b, &p, x[0])
            })
        }
        "ramsf_decode" => {
            let channels = [4, 8, 16, 32];
            let cfg = RamsfConfig {
                width: 4,
                arc_kernels: 2,
                qk_reduction: 2,
                ..RamsfConfig::default()
            };
            let mut store = ParamStore::new();
            let p = RamsfParams::new(&mut store, "ramsf", &cfg, channels, r)?;
            randomize_zeros(&mut store, r);
            let sizes = [32, 16, 8, 4];
            let pyr: Vec<Tensor<f64>> = (0..4)
                .map(|i| randn(r, &[channels[i], sizes[i], sizes[i]]))
                .collect();
            store_case(&store, pyr, Some(2), seed, opts, move |g, b, x| {
                let pyr = ScalePyramid {
                    x1: x[0],
                    x2: x[1],
                    x3: x[2],
                    x4: x[3],
                };
                ramsf_decode(g, b, &p, &pyr)
            })
        }
        "end_to_end" => {
            let mut cfg = ModelConfig::smoke();
            cfg.seed = seed;
            let mut model = Model::<f64>::new(cfg)?;
            randomize_zeros(&mut model.store, r);
            let size = model.cfg.image_size;
            let image = Tensor::from_fn(&[model.cfg.in_channels, size, size], |_| {
                r.random_range(0.0..1.0)
            });
            let tokens: Vec<usize> = (0..dim(r, 1, 5))
                .map(|_| r.random_range(0..model.cfg.vocab_size))
                .collect();
            let store = model.store.clone();
            store_case(&store, vec![image], Some(1), seed, opts, move |g, b, x| {
                model.forward(g, b, x[0], &tokens, &mut ForwardCtx::eval())
            })
        }
        other => Err(TensorError::Config(format!(
            "unknown gradient case `{other}`"
        ))),
    }
}
