//! Rotation-aware multi-scale fusion decoder.
//!
//! Top-down over a four-level pyramid: every level gets a ReLU'd 1x1 lateral
//! transform; the deeper decoder output is upsampled 2x, concatenated with
//! the lateral, refined by linear attention (channel tokens for the two
//! coarse fusions, spatial tokens for the finest) and convolved with an
//! adaptive rotated convolution that maps back to the decoder width.

mod arc;
mod attention;

pub use arc::{arc_conv, arc_conv_with_routing, arc_routing, rotate_kernel, ArcParams};
pub use attention::{
    linear_attention, linear_attention_trace, normalized_linear_attention, AttentionMode,
    DenominatorCount, LinearAttentionParams, LinearAttentionTrace,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RamsfConfig {
    /// Common decoder width after the lateral transforms.
    pub width: usize,
    /// Number of ARC base kernels.
    pub arc_kernels: usize,
    pub arc_kernel_size: usize,
    pub arc_rotate: bool,
    pub routing_reduction: usize,
    pub qk_reduction: usize,
    pub attention_eps: f64,
    pub denominator: DenominatorCount,
    /// Applies ARC before attention inside each fusion stage.
    pub arc_before_attention: bool,
}

impl Default for RamsfConfig {
    fn default() -> Self {
        Self {
            width: 96,
            arc_kernels: 4,
            arc_kernel_size: 3,
            arc_rotate: true,
            routing_reduction: 4,
            qk_reduction: 8,
            attention_eps: 1e-6,
            denominator: DenominatorCount::Tokens,
            arc_before_attention: false,
        }
    }
}

/// Four encoder levels at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid<X> {
    pub x1: X,
    pub x2: X,
    pub x3: X,
    pub x4: X,
}

impl<X> ScalePyramid<X> {
    pub fn levels(&self) -> [&X; 4] {
        [&self.x1, &self.x2, &self.x3, &self.x4]
    }
}

impl<T: Real> ScalePyramid<Tensor<T>> {
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> ScalePyramid<Var> {
        ScalePyramid {
            x1: g.leaf(self.x1.clone(), requires_grad),
            x2: g.leaf(self.x2.clone(), requires_grad),
            x3: g.leaf(self.x3.clone(), requires_grad),
            x4: g.leaf(self.x4.clone(), requires_grad),
        }
    }
}

impl ScalePyramid<Var> {
    /// Checks each level is `C x H x W` at exactly half the resolution of the
    /// previous one and returns the channel counts.
    pub fn validate<T: Real>(&self, g: &Graph<T>) -> Result<[usize; 4]> {
        let mut channels = [0; 4];
        let mut prev: Option<(usize, usize)> = None;
        for (i, v) in self.levels().into_iter().enumerate() {
            let s = g.shape(*v);
            let [c, h, w] = s[..] else {
                return Err(TensorError::InvalidShape {
                    op: "scale_pyramid",
                    shape: s.to_vec(),
                    reason: "expected C x H x W".into(),
                });
            };
            if let Some((ph, pw)) = prev {
                if ph != 2 * h || pw != 2 * w {
                    return Err(TensorError::InvalidShape {
                        op: "scale_pyramid",
                        shape: s.to_vec(),
                        reason: format!("level {} must be half of {ph}x{pw}", i + 1),
                    });
                }
            }
            prev = Some((h, w));
            channels[i] = c;
        }
        Ok(channels)
    }
}

/// ReLU'd 1x1 convolution onto the decoder width.
#[derive(Clone, Debug)]
pub struct LateralParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LateralParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.he(format!("{prefix}.w"), &[c_out, c_in, 1, 1], c_in, rng),
            b: store.zeros(format!("{prefix}.b"), &[c_out]),
        }
    }
}

pub fn lateral<T: Real>(g: &mut Graph<T>, b: &Bound, p: &LateralParams, x: Var) -> Result<Var> {
    let y = g.conv2d(x, b.var(p.w), Some(b.var(p.b)), 1, 0)?;
    g.relu(y)
}

/// Channel concatenation of a lateral map with the upsampled decoder map.
pub fn concat_fuse<T: Real>(g: &mut Graph<T>, l: Var, y: Var) -> Result<Var> {
    let (ls, ys) = (g.shape(l), g.shape(y));
    if ls.len() != 3 || ys.len() != 3 || ls[1..] != ys[1..] {
        return Err(TensorError::Shape {
            op: "concat_fuse",
            lhs: ls.to_vec(),
            rhs: ys.to_vec(),
        });
    }
    g.concat(&[l, y], 0)
}

/// One top-down fusion stage.
#[derive(Clone, Debug)]
pub struct FusionStage {
    pub attention: LinearAttentionParams,
    pub arc: ArcParams,
}

#[derive(Clone, Debug)]
pub struct RamsfParams {
    /// Laterals for levels 1..=4.
    pub laterals: [LateralParams; 4],
    /// Stages for levels 3, 2, 1 in decoding order.
    pub stages: [FusionStage; 3],
    pub width: usize,
    pub arc_before_attention: bool,
}

impl RamsfParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &RamsfConfig,
        channels: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.width;
        if d == 0 {
            return Err(TensorError::Config("decoder width must be positive".into()));
        }
        let laterals = [0, 1, 2, 3].map(|i| {
            LateralParams::new(
                store,
                &format!("{prefix}.lateral{}", i + 1),
                channels[i],
                d,
                rng,
            )
        });
        let attn_channels = if cfg.arc_before_attention { d } else { 2 * d };
        let mut stage = |level: usize, mode: AttentionMode| -> Result<FusionStage> {
            let sp = format!("{prefix}.stage{level}");
            Ok(FusionStage {
                attention: LinearAttentionParams::new(
                    store,
                    &format!("{sp}.attn"),
                    mode,
                    attn_channels,
                    cfg.qk_reduction,
                    cfg.attention_eps,
                    cfg.denominator,
                    rng,
                )?,
                arc: ArcParams::new(
                    store,
                    &format!("{sp}.arc"),
                    cfg.arc_kernels,
                    2 * d,
                    d,
                    cfg.arc_kernel_size,
                    cfg.routing_reduction,
                    cfg.arc_rotate,
                    rng,
                )?,
            })
        };
        let stages = [
            stage(3, AttentionMode::Channel)?,
            stage(2, AttentionMode::Channel)?,
            stage(1, AttentionMode::Spatial)?,
        ];
        Ok(Self {
            laterals,
            stages,
            width: d,
            arc_before_attention: cfg.arc_before_attention,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.laterals.iter().flat_map(|l| [l.w, l.b]).collect();
        for s in &self.stages {
            ids.extend(s.attention.ids());
            ids.extend(s.arc.ids());
        }
        ids
    }
}

/// Decodes a pyramid into `width x H/4 x W/4` features.
pub fn ramsf_decode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &RamsfParams,
    pyr: &ScalePyramid<Var>,
) -> Result<Var> {
    pyr.validate(g)?;
    let mut y = lateral(g, b, &p.laterals[3], pyr.x4)?;
    let finer = [(pyr.x3, 2), (pyr.x2, 1), (pyr.x1, 0)];
    for (stage, (x, li)) in p.stages.iter().zip(finer) {
        let up = g.upsample_bilinear(y, 2)?;
        let l = lateral(g, b, &p.laterals[li], x)?;
        let f = concat_fuse(g, l, up)?;
        y = if p.arc_before_attention {
            let f = arc_conv(g, b, &stage.arc, f)?;
            linear_attention(g, b, &stage.attention, f)?
        } else {
            let f = linear_attention(g, b, &stage.attention, f)?;
            arc_conv(g, b, &stage.arc, f)?
        };
    }
    Ok(y)
}
