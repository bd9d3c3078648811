//! Referring-segmentation metrics: IoU, mIoU, oIoU, Pr@X and class-wise IoU.
//!
//! Per-sample ratios are computed from integer pixel counts. Means are taken
//! with an exactly rounded sum, so every aggregate is independent of sample
//! order.
//!
//! Conventions: two empty masks have IoU 1; exactly one empty mask gives 0.
//! Pr@X counts samples with IoU >= X. Class-wise IoU pools intersections and
//! unions within a class; classes with no samples are not reported.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

/// IoU thresholds reported as Pr@X.
pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Row-major `H x W` binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(TensorError::InvalidShape {
                op: "binary_mask",
                shape: vec![height, width],
                reason: format!("holds {} pixels", bits.len()),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// `(|pred & gt|, |pred | gt|)` in pixels.
pub fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(TensorError::Contract(format!(
            "iou: prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    intersection_union(pred, gt).map(|(i, u)| ratio(i, u))
}

/// Exactly rounded sum of `f64` values (Shewchuk's partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to nearest.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

fn mean(values: impl IntoIterator<Item = f64>, n: usize) -> f64 {
    exact_sum(values) / n as f64
}

/// One evaluated prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub pred: BinaryMask,
    pub gt: BinaryMask,
    pub category: String,
    pub image_id: u64,
}

fn non_empty(samples: &[EvalSample], op: &str) -> Result<()> {
    if samples.is_empty() {
        Err(TensorError::Contract(format!(
            "{op} needs at least one sample"
        )))
    } else {
        Ok(())
    }
}

fn per_sample_counts(samples: &[EvalSample]) -> Result<Vec<(u64, u64)>> {
    samples
        .iter()
        .map(|s| intersection_union(&s.pred, &s.gt))
        .collect()
}

/// Unweighted mean of per-sample IoU.
pub fn miou(samples: &[EvalSample]) -> Result<f64> {
    non_empty(samples, "miou")?;
    let counts = per_sample_counts(samples)?;
    Ok(mean(counts.iter().map(|&(i, u)| ratio(i, u)), counts.len()))
}

/// Pooled IoU: total intersection over total union.
pub fn oiou(samples: &[EvalSample]) -> Result<f64> {
    non_empty(samples, "oiou")?;
    let counts = per_sample_counts(samples)?;
    let (i, u) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
    Ok(ratio(i, u))
}

fn hits_ratio(counts: &[(u64, u64)], threshold: f64) -> f64 {
    let hits = counts
        .iter()
        .filter(|&&(i, u)| ratio(i, u) >= threshold)
        .count();
    100.0 * hits as f64 / counts.len() as f64
}

/// Percentage of samples whose IoU is at least `threshold`.
pub fn precision_at(samples: &[EvalSample], threshold: f64) -> Result<f64> {
    non_empty(samples, "precision_at")?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TensorError::Contract(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(hits_ratio(&per_sample_counts(samples)?, threshold))
}

/// Per-class pooled IoU and their unweighted mean over the classes present.
pub fn classwise_iou(samples: &[EvalSample]) -> Result<(BTreeMap<String, f64>, f64)> {
    let mut pooled: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for s in samples {
        let (i, u) = intersection_union(&s.pred, &s.gt)?;
        let e = pooled.entry(s.category.clone()).or_default();
        e.0 += i;
        e.1 += u;
    }
    let per_class: BTreeMap<String, f64> = pooled
        .into_iter()
        .map(|(c, (i, u))| (c, ratio(i, u)))
        .collect();
    let m = if per_class.is_empty() {
        0.0
    } else {
        mean(per_class.values().copied(), per_class.len())
    };
    Ok((per_class, m))
}

/// Aggregated metrics, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub oiou: f64,
    /// Keyed by threshold rendered with one decimal (`"0.5"` .. `"0.9"`).
    pub pr: BTreeMap<String, f64>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub classwise_miou: f64,
    pub samples: usize,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

pub fn build_report(samples: &[EvalSample]) -> Result<EvalReport> {
    non_empty(samples, "build_report")?;
    let counts = per_sample_counts(samples)?;
    let pr = PR_THRESHOLDS
        .iter()
        .map(|&t| (threshold_key(t), hits_ratio(&counts, t)))
        .collect();
    let (per_class, classwise_miou) = classwise_iou(samples)?;
    Ok(EvalReport {
        miou: 100.0 * miou(samples)?,
        oiou: 100.0 * oiou(samples)?,
        pr,
        per_class_iou: per_class.into_iter().map(|(c, v)| (c, 100.0 * v)).collect(),
        classwise_miou: 100.0 * classwise_miou,
        samples: samples.len(),
    })
}

impl EvalReport {
    /// Pr@X values in threshold order.
    pub fn pr_values(&self) -> Vec<f64> {
        PR_THRESHOLDS
            .iter()
            .map(|&t| self.pr.get(&threshold_key(t)).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Plain-text tables: the overall row (Pr@0.5 .. Pr@0.9, mIoU, oIoU)
    /// followed by class-wise IoU.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let headers = [
            "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "mIoU", "oIoU",
        ];
        let mut values = self.pr_values();
        values.push(self.miou);
        values.push(self.oiou);
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.2}")).collect();
        let row = |items: &[String]| {
            items
                .iter()
                .map(|c| format!("{c:>8}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let head: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "{}", row(&head));
        let _ = writeln!(s, "{}", row(&cells));
        let _ = writeln!(s);
        let width = self
            .per_class_iou
            .keys()
            .map(String::len)
            .chain(["classwise mIoU".len()])
            .max()
            .unwrap_or(0);
        let _ = writeln!(s, "{:<width$} {:>8}", "class", "IoU");
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "{c:<width$} {v:>8.2}");
        }
        let _ = writeln!(
            s,
            "{:<width$} {:>8.2}",
            "classwise mIoU", self.classwise_miou
        );
        let _ = writeln!(s, "samples: {}", self.samples);
        s
    }
}
