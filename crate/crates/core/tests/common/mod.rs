//! Straight-line reference implementations used as test oracles. Nothing
//! here calls into the library's kernels; tensors are plain `Vec<f64>`.

#![allow(dead_code)]

use aeroreformer::metrics::{BinaryMask, EvalSample};
use aeroreformer::model::ModelConfig;
use aeroreformer::params::ParamStore;

/// A `C x H x W` feature map.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Cross-correlation with zero padding; `weight` is `co x c x k x k`.
pub fn conv2d(
    x: &Map,
    weight: &[f64],
    co: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Map {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[o];
                for ci in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = weight[((o * x.c + ci) * k + ky) * k + kx];
                            acc += wv * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                data[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Map {
        c: co,
        h: ho,
        w: wo,
        data,
    }
}

pub fn relu(x: &Map) -> Map {
    Map {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

pub fn add(a: &Map, b: &Map) -> Map {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
    Map {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

pub fn concat(a: &Map, b: &Map) -> Map {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Map {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Bilinear upsampling with half-pixel centers; source coordinates are
/// clamped to the input.
pub fn upsample(x: &Map, f: usize) -> Map {
    let (h, w) = (x.h * f, x.w * f);
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            let (y0, y1, fy) = coord(y, x.h);
            for xx in 0..w {
                let (x0, x1, fx) = coord(xx, x.w);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Map { c: x.c, h, w, data }
}

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id).data()
}

fn param_shape(store: &ParamStore<f64>, name: &str) -> Vec<usize> {
    store.get(store.find(name).unwrap()).shape().to_vec()
}

/// `ReLU(1x1 conv)` with parameters `{prefix}.w`, `{prefix}.b`.
pub fn lateral(store: &ParamStore<f64>, prefix: &str, x: &Map) -> Map {
    let w = param(store, &format!("{prefix}.w"));
    let co = param_shape(store, &format!("{prefix}.w"))[0];
    relu(&conv2d(
        x,
        w,
        co,
        1,
        param(store, &format!("{prefix}.b")),
        1,
        0,
    ))
}

/// Encoder stages: 3x3 convs with strides 4, 2, 2, 2 and padding 1, each
/// followed by ReLU.
pub fn encoder(store: &ParamStore<f64>, image: &Map) -> Vec<Map> {
    let mut x = image.clone();
    let mut levels = Vec::new();
    for (i, stride) in [4, 2, 2, 2].into_iter().enumerate() {
        let name = format!("visual.stage{}", i + 1);
        let co = param_shape(store, &format!("{name}.w"))[0];
        x = relu(&conv2d(
            &x,
            param(store, &format!("{name}.w")),
            co,
            3,
            param(store, &format!("{name}.b")),
            stride,
            1,
        ));
        levels.push(x.clone());
    }
    levels
}

/// Top-down lateral-plus-add decoding of a 4-level pyramid.
pub fn fpn(store: &ParamStore<f64>, prefix: &str, levels: &[Map]) -> Map {
    let mut y = lateral(store, &format!("{prefix}.lateral4"), &levels[3]);
    for i in (0..3).rev() {
        let l = lateral(store, &format!("{prefix}.lateral{}", i + 1), &levels[i]);
        y = add(&l, &upsample(&y, 2));
    }
    y
}

/// Logits of the model with both fusion modules disabled.
pub fn baseline_forward(store: &ParamStore<f64>, image: &Map) -> Map {
    let levels = encoder(store, image);
    let y = fpn(store, "fpn", &levels);
    let head = conv2d(
        &y,
        param(store, "head.w"),
        2,
        1,
        param(store, "head.b"),
        1,
        0,
    );
    upsample(&head, 4)
}

// ---- metrics ----------------------------------------------------------

pub fn counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            if p && g {
                i += 1;
            }
            if p || g {
                u += 1;
            }
        }
    }
    (i, u)
}

pub fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Correctly rounded mean of `f64` values in `[0, 1]` whose lowest set bit
/// is at or above 2^-90: summed exactly as fixed-point integers, rounded
/// once.
pub fn exact_mean(values: &[f64]) -> f64 {
    const SCALE: i32 = 90;
    let mut acc: i128 = 0;
    for &v in values {
        assert!((0.0..=1.0).contains(&v));
        let scaled = v * 2f64.powi(SCALE);
        assert_eq!(
            scaled.fract(),
            0.0,
            "value {v} below fixed-point resolution"
        );
        acc += scaled as i128;
    }
    (acc as f64 / 2f64.powi(SCALE)) / values.len() as f64
}

pub struct OracleReport {
    pub ious: Vec<f64>,
    pub miou: f64,
    pub oiou: f64,
    pub pr: Vec<f64>,
    pub per_class: Vec<(String, f64)>,
    pub classwise_miou: f64,
}

pub fn oracle_report(samples: &[EvalSample]) -> OracleReport {
    let c: Vec<(u64, u64)> = samples.iter().map(|s| counts(&s.pred, &s.gt)).collect();
    let ious: Vec<f64> = c.iter().map(|&(i, u)| ratio(i, u)).collect();
    let ti: u64 = c.iter().map(|x| x.0).sum();
    let tu: u64 = c.iter().map(|x| x.1).sum();
    let pr = [0.5, 0.6, 0.7, 0.8, 0.9]
        .iter()
        .map(|&t| 100.0 * ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64)
        .collect();
    let mut classes: Vec<String> = samples.iter().map(|s| s.category.clone()).collect();
    classes.sort();
    classes.dedup();
    let per_class: Vec<(String, f64)> = classes
        .iter()
        .map(|cl| {
            let (mut i, mut u) = (0, 0);
            for (s, &(si, su)) in samples.iter().zip(&c) {
                if &s.category == cl {
                    i += si;
                    u += su;
                }
            }
            (cl.clone(), ratio(i, u))
        })
        .collect();
    let class_values: Vec<f64> = per_class.iter().map(|x| x.1).collect();
    OracleReport {
        miou: exact_mean(&ious),
        oiou: ratio(ti, tu),
        pr,
        classwise_miou: exact_mean(&class_values),
        per_class,
        ious,
    }
}

/// Parameters added by cross-attention fusion on all four levels.
pub fn vlcam_count(cfg: &ModelConfig) -> usize {
    let (c_k, c_l) = (cfg.vlcam.c_k, cfg.text_width);
    (0..4)
        .map(|i| {
            let c_v = cfg.encoder_channels[i];
            let side = cfg.image_size >> (2 + i);
            c_k * c_v
                + c_k * c_l
                + (c_v * c_l + c_v)
                + side * side * c_k
                + c_v * c_v
                + (4 * c_v * c_v + 4 * c_v)
                + 4 * c_v * c_v
                + (c_v * c_v + c_v)
        })
        .sum()
}

/// Extra parameters of the attention-plus-ARC stages over additive fusion.
pub fn ramsf_delta(cfg: &ModelConfig) -> usize {
    let r = &cfg.ramsf;
    let (d, n) = (r.width, r.arc_kernels);
    let c2 = 2 * d;
    let channel = 3 * (c2 * c2 + c2) + 1;
    let qk = (c2 / r.qk_reduction).max(2);
    let spatial = 2 * (qk * c2 + qk) + c2 * c2 + c2 + 1;
    let hidden = (c2 / r.routing_reduction).max(4);
    let arc = n * d * c2 * 9 + d + hidden * c2 + hidden + 2 * n * hidden + 2 * n;
    2 * channel + spatial + 3 * arc
}

pub fn baseline_count(cfg: &ModelConfig) -> usize {
    let ch = cfg.encoder_channels;
    let mut c_prev = cfg.in_channels;
    let mut total = 0;
    for c in ch {
        total += c * c_prev * 9 + c;
        c_prev = c;
    }
    let c_l = cfg.text_width;
    total += cfg.vocab_size * c_l + c_l * c_l + c_l;
    let d = cfg.ramsf.width;
    total += ch.iter().map(|c| c * d + d).sum::<usize>();
    total + 2 * d + 2
}
