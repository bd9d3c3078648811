//! End-to-end referring-segmentation model: toy visual and text encoders,
//! per-scale cross-attention fusion, the rotation-aware decoder and a
//! two-class segmentation head.

mod checkpoint;
mod synthetic;
mod train;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use synthetic::{synthetic_sample, Sample};
pub use train::{train_smoke, AdamW, TrainError, TrainOptions};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ctx::ForwardCtx;
use crate::error::{Result, TensorError};
use crate::metrics::BinaryMask;
use crate::params::{Bound, ParamId, ParamStore};
use crate::ramsf::{lateral, ramsf_decode, LateralParams, RamsfConfig, RamsfParams, ScalePyramid};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::vlcam::{vlcam_forward, VlcamConfig, VlcamParams};

/// Encoder output strides relative to the input image.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channels of the four encoder stages.
    pub encoder_channels: [usize; 4],
    /// Language feature width `C_L`.
    pub text_width: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub enable_vlcam: bool,
    pub enable_ramsf: bool,
    pub vlcam: VlcamConfig,
    pub ramsf: RamsfConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 448,
            in_channels: 3,
            encoder_channels: [96, 192, 384, 768],
            text_width: 768,
            vocab_size: 1000,
            max_tokens: 20,
            enable_vlcam: true,
            enable_ramsf: true,
            vlcam: VlcamConfig::default(),
            ramsf: RamsfConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64x64 inputs and narrow layers.
    pub fn smoke() -> Self {
        Self {
            image_size: 64,
            encoder_channels: [8, 16, 16, 32],
            text_width: 16,
            vlcam: VlcamConfig {
                heads: 2,
                c_k: 8,
                ..VlcamConfig::default()
            },
            ramsf: RamsfConfig {
                width: 16,
                ..RamsfConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(TensorError::InvalidShape {
                op: "model_config",
                shape: vec![self.image_size, self.image_size],
                reason: "image size must be a positive multiple of 32".into(),
            });
        }
        if self.enable_vlcam && self.image_size / 32 < 2 {
            return Err(TensorError::Config(format!(
                "cross-attention fusion normalizes over tokens and needs at least 2 tokens on \
                 the coarsest level; image size {} gives 1",
                self.image_size
            )));
        }
        if self.max_tokens == 0 || self.vocab_size == 0 || self.in_channels == 0 {
            return Err(TensorError::Config(
                "max_tokens, vocab_size and in_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size / STRIDES[level]
    }
}

/// Four strided 3x3 convolution stages (strides 4, 2, 2, 2), each followed
/// by ReLU.
#[derive(Clone, Debug)]
pub struct ToyVisualEncoder {
    pub stages: [(ParamId, ParamId); 4],
}

/// Token embedding followed by a per-token 1-wide convolution.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub embed: ParamId,
    pub w_mix: ParamId,
    pub b_mix: ParamId,
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Ramsf(RamsfParams),
    /// Lateral transforms with additive top-down fusion.
    Fpn([LateralParams; 4]),
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub visual: ToyVisualEncoder,
    pub text: ToyTextEncoder,
    pub vlcam: Option<[VlcamParams; 4]>,
    pub decoder: Decoder,
    pub head: (ParamId, ParamId),
}

impl<T: Real> Model<T> {
    /// Builds and seeds every parameter from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let ch = cfg.encoder_channels;
        let mut c_prev = cfg.in_channels;
        let stages = [0, 1, 2, 3].map(|i| {
            let w = store.he(
                format!("visual.stage{}.w", i + 1),
                &[ch[i], c_prev, 3, 3],
                c_prev * 9,
                &mut rng,
            );
            let b = store.zeros(format!("visual.stage{}.b", i + 1), &[ch[i]]);
            c_prev = ch[i];
            (w, b)
        });
        let c_l = cfg.text_width;
        let text = ToyTextEncoder {
            embed: store.randn("text.embed", &[cfg.vocab_size, c_l], 1.0, &mut rng),
            w_mix: store.he("text.w_mix", &[c_l, c_l], c_l, &mut rng),
            b_mix: store.zeros("text.b_mix", &[c_l]),
        };
        let vlcam = if cfg.enable_vlcam {
            let mut blocks = Vec::with_capacity(4);
            for i in 0..4 {
                let side = cfg.level_size(i);
                blocks.push(VlcamParams::new(
                    &mut store,
                    &format!("vlcam{}", i + 1),
                    &cfg.vlcam,
                    side * side,
                    ch[i],
                    c_l,
                    &mut rng,
                )?);
            }
            Some(blocks.try_into().expect("four fusion blocks"))
        } else {
            None
        };
        let decoder = if cfg.enable_ramsf {
            Decoder::Ramsf(RamsfParams::new(
                &mut store, "ramsf", &cfg.ramsf, ch, &mut rng,
            )?)
        } else {
            let d = cfg.ramsf.width;
            Decoder::Fpn([0, 1, 2, 3].map(|i| {
                LateralParams::new(
                    &mut store,
                    &format!("fpn.lateral{}", i + 1),
                    ch[i],
                    d,
                    &mut rng,
                )
            }))
        };
        let d = cfg.ramsf.width;
        let head = (
            store.he("head.w", &[2, d, 1, 1], d, &mut rng),
            store.zeros("head.b", &[2]),
        );
        Ok(Self {
            cfg,
            store,
            visual: ToyVisualEncoder { stages },
            text,
            vlcam,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn check_inputs(&self, image_shape: &[usize], tokens: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if image_shape != [self.cfg.in_channels, s, s] {
            return Err(TensorError::Shape {
                op: "model_forward",
                lhs: image_shape.to_vec(),
                rhs: vec![self.cfg.in_channels, s, s],
            });
        }
        if tokens.is_empty() || tokens.len() > self.cfg.max_tokens {
            return Err(TensorError::Contract(format!(
                "expected 1..={} tokens, got {}",
                self.cfg.max_tokens,
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TensorError::Contract(format!(
                "token id {t} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Language features `N x C_L`.
    pub fn encode_text(&self, g: &mut Graph<T>, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let emb = g.gather_rows(b.var(self.text.embed), tokens)?;
        g.conv1d(emb, b.var(self.text.w_mix), b.var(self.text.b_mix))
    }

    /// Encoder pyramid, fused with language at every level when enabled.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        image: Var,
        f_l: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<ScalePyramid<Var>> {
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for (i, (w, bias)) in self.visual.stages.iter().enumerate() {
            let stride = if i == 0 { 4 } else { 2 };
            x = g.conv2d(x, b.var(*w), Some(b.var(*bias)), stride, 1)?;
            x = g.relu(x)?;
            if let (Some(blocks), Some(f_l)) = (&self.vlcam, f_l) {
                let [c, h, w] = g.shape(x)[..] else {
                    unreachable!("conv2d output is rank 3")
                };
                let flat = g.reshape(x, &[c, h * w])?;
                let f_v = g.transpose(flat)?;
                let fused = vlcam_forward(g, b, &blocks[i], f_v, f_l, ctx)?;
                let back = g.transpose(fused)?;
                x = g.reshape(back, &[c, h, w])?;
            }
            levels.push(x);
        }
        Ok(ScalePyramid {
            x1: levels[0],
            x2: levels[1],
            x3: levels[2],
            x4: levels[3],
        })
    }

    /// Two-class logits `2 x H x W` for an image `C x H x W` and token ids.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        image: Var,
        tokens: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_inputs(g.shape(image), tokens)?;
        let f_l = if self.vlcam.is_some() {
            Some(self.encode_text(g, b, tokens)?)
        } else {
            None
        };
        let pyr = self.encode(g, b, image, f_l, ctx)?;
        let features = match &self.decoder {
            Decoder::Ramsf(p) => ramsf_decode(g, b, p, &pyr)?,
            Decoder::Fpn(laterals) => fpn_decode(g, b, laterals, &pyr)?,
        };
        let logits = g.conv2d(features, b.var(self.head.0), Some(b.var(self.head.1)), 1, 0)?;
        g.upsample_bilinear(logits, STRIDES[0])
    }

    /// Eval-mode logits without gradient tracking.
    pub fn infer(&self, image: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&mut g, &b, x, tokens, &mut ctx)?;
        Ok(g.value(out).clone())
    }
}

/// Attention-free top-down decoding: `Y_4 = L_4`, `Y_i = L_i + up(Y_{i+1})`.
pub fn fpn_decode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    laterals: &[LateralParams; 4],
    pyr: &ScalePyramid<Var>,
) -> Result<Var> {
    pyr.validate(g)?;
    let mut y = lateral(g, b, &laterals[3], pyr.x4)?;
    for (x, li) in [(pyr.x3, 2), (pyr.x2, 1), (pyr.x1, 0)] {
        let up = g.upsample_bilinear(y, 2)?;
        let l = lateral(g, b, &laterals[li], x)?;
        y = g.add(l, up)?;
    }
    Ok(y)
}

/// Per-pixel argmax over `2 x H x W` logits. Channel 1 is the target; ties
/// go to background.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<BinaryMask> {
    let [2, h, w] = logits.shape()[..] else {
        return Err(TensorError::InvalidShape {
            op: "predict_mask",
            shape: logits.shape().to_vec(),
            reason: "expected 2 x H x W logits".into(),
        });
    };
    let n = h * w;
    let d = logits.data();
    let bits = (0..n).map(|p| d[n + p] > d[p]).collect();
    Ok(BinaryMask::new(h, w, bits).expect("length matches"))
}
