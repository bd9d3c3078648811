//! Grid cropping and class-distribution filtering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DatagenError, Result};
use crate::source::{ClassTable, SemanticMaskImage};

pub const PATCH_SIZE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    DominantClass,
    InsufficientClasses,
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DominantClass => "dominant_class",
            Self::InsufficientClasses => "insufficient_classes",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Kept,
    Discarded(DiscardReason),
}

/// Patch-level class balance thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// A class strictly above this fraction dominates the patch.
    pub max_fraction: f64,
    /// Classes must strictly exceed this fraction to count as represented.
    pub min_fraction: f64,
    pub min_classes: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_fraction: 0.70,
            min_fraction: 0.05,
            min_classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub source_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// `size * size * 3` RGB bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// Pixel count per class id present in the patch.
    pub class_pixels: BTreeMap<u8, u64>,
    /// Class name to fraction of the patch, for present classes.
    pub class_distribution: BTreeMap<String, f64>,
    pub verdict: Verdict,
}

impl PatchRecord {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.png", self.source_id, self.x, self.y)
    }

    /// Row-major mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

/// Tiles `src` into non-overlapping `size x size` patches from the origin,
/// dropping right and bottom remainders. Verdicts start as kept; see
/// [`filter_patch`].
pub fn crop_patches(
    src: &SemanticMaskImage,
    table: &ClassTable,
    size: usize,
) -> Result<Vec<PatchRecord>> {
    if size == 0 {
        return Err(DatagenError::Config("patch size must be positive".into()));
    }
    if src.width < size || src.height < size {
        return Err(DatagenError::ingest(
            &src.id,
            format!(
                "source is {}x{}, smaller than one {size}x{size} patch",
                src.width, src.height
            ),
        ));
    }
    let mut out = Vec::new();
    for py in 0..src.height / size {
        for px in 0..src.width / size {
            let (x0, y0) = (px * size, py * size);
            let mut pixels = Vec::with_capacity(size * size * 3);
            let mut labels = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                let row = y * src.width;
                pixels.extend_from_slice(&src.pixels[(row + x0) * 3..(row + x0 + size) * 3]);
                labels.extend_from_slice(&src.labels[row + x0..row + x0 + size]);
            }
            let mut class_pixels = BTreeMap::new();
            for &l in &labels {
                *class_pixels.entry(l).or_insert(0u64) += 1;
            }
            let total = (size * size) as f64;
            let class_distribution = class_pixels
                .iter()
                .map(|(&id, &n)| {
                    let name = table
                        .get(id)
                        .map(|c| c.name.clone())
                        .unwrap_or_else(|| id.to_string());
                    (name, n as f64 / total)
                })
                .collect();
            out.push(PatchRecord {
                source_id: src.id.clone(),
                x: x0,
                y: y0,
                size,
                pixels,
                labels,
                class_pixels,
                class_distribution,
                verdict: Verdict::Kept,
            });
        }
    }
    Ok(out)
}

/// Verdict from a class distribution alone.
pub fn filter_patch(distribution: &BTreeMap<String, f64>, cfg: &FilterConfig) -> Verdict {
    if distribution.values().any(|&f| f > cfg.max_fraction) {
        return Verdict::Discarded(DiscardReason::DominantClass);
    }
    let represented = distribution
        .values()
        .filter(|&&f| f > cfg.min_fraction)
        .count();
    if represented < cfg.min_classes {
        Verdict::Discarded(DiscardReason::InsufficientClasses)
    } else {
        Verdict::Kept
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn verdict_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(
            filter_patch(&dist(&[("building", 0.80), ("road", 0.20)]), &cfg),
            Verdict::Discarded(DiscardReason::DominantClass)
        );
        assert_eq!(
            filter_patch(
                &dist(&[("building", 0.40), ("road", 0.35), ("tree", 0.25)]),
                &cfg
            ),
            Verdict::Kept
        );
        assert_eq!(
            filter_patch(&dist(&[("building", 0.70), ("road", 0.30)]), &cfg),
            Verdict::Kept
        );
    }

    #[test]
    fn too_few_represented_classes() {
        let cfg = FilterConfig::default();
        let mut d = dist(&[("building", 0.65)]);
        for i in 0..7 {
            d.insert(format!("c{i}"), 0.05);
        }
        assert_eq!(
            filter_patch(&d, &cfg),
            Verdict::Discarded(DiscardReason::InsufficientClasses)
        );
    }
}
