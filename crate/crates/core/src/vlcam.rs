//! Vision-language cross-attention fusion.
//!
//! Vision tokens (`H'W' x C_V`) query language tokens (`N x C_L`) through
//! multi-head scaled dot-product attention. The attended features gate the
//! vision stream elementwise, then pass through a 4x feed-forward block and a
//! final projection. The output has the shape of the vision input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ctx::ForwardCtx;
use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlcamConfig {
    pub heads: usize,
    /// Key/query width `C_K`.
    pub c_k: usize,
    pub dropout: f64,
    /// Adds `F_V` back after the fusion normalization.
    pub fuse_residual: bool,
    /// Standard deviation of the positional-encoding initialization.
    pub pos_std: f64,
}

impl Default for VlcamConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            c_k: 64,
            dropout: 0.1,
            fuse_residual: false,
            pos_std: 0.02,
        }
    }
}

/// Parameter handles of one fusion block.
#[derive(Clone, Debug)]
pub struct VlcamParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    /// Positional encoding, `tokens x C_K`.
    pub p_v: ParamId,
    pub w_fuse: ParamId,
    pub w_ffn1: ParamId,
    pub b_ffn1: ParamId,
    pub w_ffn2: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub heads: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub c_l: usize,
    /// Vision token count the positional encoding is declared for.
    pub tokens: usize,
    pub dropout: f64,
    pub fuse_residual: bool,
}

impl VlcamParams {
    /// Allocates and initializes the block's parameters in `store`, with
    /// names prefixed by `prefix`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &VlcamConfig,
        tokens: usize,
        c_v: usize,
        c_l: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = cfg.heads;
        if heads == 0 || cfg.c_k % heads != 0 || c_v % heads != 0 {
            return Err(TensorError::Config(format!(
                "heads ({heads}) must divide C_K ({}) and C_V ({c_v})",
                cfg.c_k
            )));
        }
        if tokens == 0 || c_l == 0 {
            return Err(TensorError::Config(
                "vlcam needs at least one token and channel".into(),
            ));
        }
        let c_k = cfg.c_k;
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            w_q: store.he(n("w_q"), &[c_k, c_v], c_v, rng),
            w_k: store.he(n("w_k"), &[c_k, c_l], c_l, rng),
            w_v: store.he(n("w_v"), &[c_v, c_l], c_l, rng),
            b_v: store.zeros(n("b_v"), &[c_v]),
            p_v: store.randn(n("p_v"), &[tokens, c_k], cfg.pos_std, rng),
            w_fuse: store.he(n("w_fuse"), &[c_v, c_v], c_v, rng),
            w_ffn1: store.he(n("w_ffn1"), &[4 * c_v, c_v], c_v, rng),
            b_ffn1: store.zeros(n("b_ffn1"), &[4 * c_v]),
            w_ffn2: store.he(n("w_ffn2"), &[c_v, 4 * c_v], 4 * c_v, rng),
            w_out: store.he(n("w_out"), &[c_v, c_v], c_v, rng),
            b_out: store.zeros(n("b_out"), &[c_v]),
            heads,
            c_k,
            c_v,
            c_l,
            tokens,
            dropout: cfg.dropout,
            fuse_residual: cfg.fuse_residual,
        })
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.b_v,
            self.p_v,
            self.w_fuse,
            self.w_ffn1,
            self.b_ffn1,
            self.w_ffn2,
            self.w_out,
            self.b_out,
        ]
    }
}

/// Bias-free 1x1 projection. Used where a bias would cancel exactly: before
/// instance normalization, and on the keys, where it shifts every score of a
/// query's row by the same amount ahead of the softmax.
fn unbiased<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(x, wt)
}

/// Projects vision and language features into the shared attention space:
/// instance-normalized, position-offset queries from vision; plain keys and
/// values from language.
pub fn project_qkv<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &VlcamParams,
    f_v: Var,
    f_l: Var,
) -> Result<(Var, Var, Var)> {
    let vs = g.shape(f_v).to_vec();
    if vs.len() != 2 || vs[0] != p.tokens || vs[1] != p.c_v {
        return Err(TensorError::Shape {
            op: "project_qkv",
            lhs: vs,
            rhs: vec![p.tokens, p.c_v],
        });
    }
    let ls = g.shape(f_l).to_vec();
    if ls.len() != 2 || ls[1] != p.c_l || ls[0] == 0 {
        return Err(TensorError::Shape {
            op: "project_qkv",
            lhs: ls,
            rhs: vec![0, p.c_l],
        });
    }
    let q = unbiased(g, f_v, b.var(p.w_q))?;
    let q = g.instance_norm(q)?;
    let q = g.add(q, b.var(p.p_v))?;
    let k = unbiased(g, f_l, b.var(p.w_k))?;
    let v = g.conv1d(f_l, b.var(p.w_v), b.var(p.b_v))?;
    Ok((q, k, v))
}

/// Multi-head cross-attention. Returns the concatenated head outputs and the
/// per-head attention matrices (`H'W' x N`, rows on the probability simplex).
pub fn cross_attention_with_maps<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (qs, ks, vs) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::Shape {
            op: "cross_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (c_k, c_v) = (qs[1], vs[1]);
    if heads == 0 || c_k % heads != 0 || c_v % heads != 0 {
        return Err(TensorError::Config(format!(
            "heads ({heads}) must divide key width {c_k} and value width {c_v}"
        )));
    }
    let (dk, dv) = (c_k / heads, c_v / heads);
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let kt = g.transpose(k)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kth, vh) = if heads == 1 {
            (q, kt, v)
        } else {
            (
                g.slice(q, 1, h * dk, (h + 1) * dk)?,
                g.slice(kt, 0, h * dk, (h + 1) * dk)?,
                g.slice(v, 1, h * dv, (h + 1) * dv)?,
            )
        };
        let scores = g.matmul(qh, kth)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_lastdim(scores)?;
        outs.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((out, maps))
}

pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    cross_attention_with_maps(g, q, k, v, heads).map(|(out, _)| out)
}

/// Gates the vision stream with the attended features:
/// `instance_norm(conv1d(f_vl * f_v))`.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &VlcamParams,
    f_vl: Var,
    f_v: Var,
) -> Result<Var> {
    if g.shape(f_vl) != g.shape(f_v) {
        return Err(TensorError::Shape {
            op: "fuse",
            lhs: g.shape(f_vl).to_vec(),
            rhs: g.shape(f_v).to_vec(),
        });
    }
    let gated = g.mul(f_vl, f_v)?;
    let projected = unbiased(g, gated, b.var(p.w_fuse))?;
    let fused = g.instance_norm(projected)?;
    if p.fuse_residual {
        g.add(fused, f_v)
    } else {
        Ok(fused)
    }
}

/// Full fusion block: projection, cross-attention, gating, feed-forward and
/// output projection.
pub fn vlcam_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &VlcamParams,
    f_v: Var,
    f_l: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (q, k, v) = project_qkv(g, b, p, f_v, f_l)?;
    let f_vl = cross_attention(g, q, k, v, p.heads)?;
    let fused = fuse(g, b, p, f_vl, f_v)?;
    let hidden = g.conv1d(fused, b.var(p.w_ffn1), b.var(p.b_ffn1))?;
    let hidden = g.relu(hidden)?;
    let hidden = ctx.dropout(g, hidden, p.dropout)?;
    let hidden = unbiased(g, hidden, b.var(p.w_ffn2))?;
    let ffn = g.instance_norm(hidden)?;
    let out = g.conv1d(ffn, b.var(p.w_out), b.var(p.b_out))?;
    ctx.dropout(g, out, p.dropout)
}
