//! L2-normalized linear attention over channel or spatial tokens.
//!
//! For tokens `Q, K` (rows L2-normalized) and values `V`, each output row is
//!
//! ```text
//!   (sum_n V_n + q (K^T V)) / (count + q . sum_n K_n + eps)
//! ```
//!
//! which is softmax-free attention with kernel `1 + q . k`. The result is
//! scaled by a learnable `gamma` and added back to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which axis of a `C x H x W` map plays the role of tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Tokens are channels; features are the `H*W` spatial positions.
    Channel,
    /// Tokens are the `H*W` positions; features are projected channels.
    Spatial,
}

/// Constant term of the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorCount {
    /// Number of tokens summed over (`C` in channel mode, `H*W` in spatial
    /// mode). Keeps the denominator strictly positive.
    #[default]
    Tokens,
    /// Always `H*W`, as printed for both variants.
    Spatial,
}

#[derive(Clone, Debug)]
pub struct LinearAttentionParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    /// Single-element residual scale.
    pub gamma: ParamId,
    pub eps: f64,
    pub mode: AttentionMode,
    pub channels: usize,
    /// Projected query/key width in spatial mode.
    pub qk_dim: usize,
    pub count: DenominatorCount,
}

impl LinearAttentionParams {
    /// Query/key width chosen for `channels` input channels in spatial mode.
    pub fn spatial_qk_dim(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        mode: AttentionMode,
        channels: usize,
        qk_reduction: usize,
        eps: f64,
        count: DenominatorCount,
        rng: &mut R,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!(
                "attention eps must be > 0, got {eps}"
            )));
        }
        let qk_dim = match mode {
            AttentionMode::Channel => channels,
            AttentionMode::Spatial => Self::spatial_qk_dim(channels, qk_reduction),
        };
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            w_q: store.he(n("w_q"), &[qk_dim, channels], channels, rng),
            b_q: store.zeros(n("b_q"), &[qk_dim]),
            w_k: store.he(n("w_k"), &[qk_dim, channels], channels, rng),
            b_k: store.zeros(n("b_k"), &[qk_dim]),
            w_v: store.he(n("w_v"), &[channels, channels], channels, rng),
            b_v: store.zeros(n("b_v"), &[channels]),
            gamma: store.zeros(n("gamma"), &[1]),
            eps,
            mode,
            channels,
            qk_dim,
            count,
        })
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.gamma,
        ]
    }
}

/// Intermediate values of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LinearAttentionTrace {
    pub output: Var,
    /// `tokens x 1` denominators.
    pub denominator: Var,
    /// `tokens x features` attention result before reshaping and scaling.
    pub attended: Var,
}

/// Normalized linear attention on token matrices `q, k` (`T x d`) and
/// `v` (`T x F`). Returns `(attended, denominator)`.
pub fn normalized_linear_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    count: T,
    eps: T,
) -> Result<(Var, Var)> {
    let tokens = g.shape(q)[0];
    let qn = g.l2_normalize_rows(q)?;
    let kn = g.l2_normalize_rows(k)?;
    let knt = g.transpose(kn)?;
    let kv = g.matmul(knt, v)?;
    let v_sum = g.sum_axis0(v)?;
    let ones = g.constant(Tensor::ones(&[tokens, 1]));
    let v_sum_rows = g.matmul(ones, v_sum)?;
    let qkv = g.matmul(qn, kv)?;
    let numerator = g.add(v_sum_rows, qkv)?;
    let k_sum = g.sum_axis0(kn)?;
    let k_sum = g.transpose(k_sum)?;
    let qk = g.matmul(qn, k_sum)?;
    let denominator = g.add_const(qk, count + eps)?;
    let attended = g.div_col(numerator, denominator)?;
    Ok((attended, denominator))
}

pub fn linear_attention_trace<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &LinearAttentionParams,
    x: Var,
) -> Result<LinearAttentionTrace> {
    let xs = g.shape(x).to_vec();
    let [c, h, w] = xs[..] else {
        return Err(TensorError::InvalidShape {
            op: "linear_attention",
            shape: xs,
            reason: "expected C x H x W".into(),
        });
    };
    if c != p.channels {
        return Err(TensorError::Shape {
            op: "linear_attention",
            lhs: xs,
            rhs: vec![p.channels],
        });
    }
    if !(p.eps > 0.0) {
        return Err(TensorError::Config(format!(
            "attention eps must be > 0, got {}",
            p.eps
        )));
    }
    let m = h * w;
    let flat = g.reshape(x, &[c, m])?;
    let tokens_first = g.transpose(flat)?;
    let q = g.conv1d(tokens_first, b.var(p.w_q), b.var(p.b_q))?;
    let k = g.conv1d(tokens_first, b.var(p.w_k), b.var(p.b_k))?;
    let v = g.conv1d(tokens_first, b.var(p.w_v), b.var(p.b_v))?;
    let (q, k, v, tokens) = match p.mode {
        AttentionMode::Spatial => (q, k, v, m),
        AttentionMode::Channel => (g.transpose(q)?, g.transpose(k)?, g.transpose(v)?, c),
    };
    let count = match p.count {
        DenominatorCount::Tokens => tokens,
        DenominatorCount::Spatial => m,
    };
    let (attended, denominator) =
        normalized_linear_attention(g, q, k, v, T::lit(count as f64), T::lit(p.eps))?;
    let channels_first = match p.mode {
        AttentionMode::Spatial => g.transpose(attended)?,
        AttentionMode::Channel => attended,
    };
    let refined = g.reshape(channels_first, &[c, h, w])?;
    let scaled = g.mul(b.var(p.gamma), refined)?;
    let output = g.add(x, scaled)?;
    Ok(LinearAttentionTrace {
        output,
        denominator,
        attended,
    })
}

/// Residual linear attention; `p.mode` selects channel or spatial tokens.
pub fn linear_attention<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &LinearAttentionParams,
    x: Var,
) -> Result<Var> {
    linear_attention_trace(g, b, p, x).map(|t| t.output)
}
