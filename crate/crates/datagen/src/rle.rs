//! Uncompressed counts-form run-length encoding of binary masks.
//!
//! Pixels are scanned column-major (down each column, columns left to
//! right) and the counts alternate between runs of 0 and runs of 1, always
//! starting with a (possibly empty) run of 0.

use serde::{Deserialize, Serialize};

use crate::error::{DatagenError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    /// Encodes a row-major mask of `height x width`.
    pub fn encode(mask: &[bool], height: usize, width: usize) -> Self {
        assert_eq!(mask.len(), height * width, "mask length");
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..width {
            for y in 0..height {
                let v = mask[y * width + x];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            size: [height, width],
            counts,
        }
    }

    /// Decodes to a row-major mask.
    pub fn decode(&self) -> Result<Vec<bool>> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(DatagenError::Export(format!(
                "run lengths sum to {total}, expected {}",
                h * w
            )));
        }
        let mut mask = vec![false; h * w];
        let mut pos = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            let on = i % 2 == 1;
            for p in pos..pos + c as usize {
                if on {
                    let (x, y) = (p / h, p % h);
                    mask[y * w + x] = true;
                }
            }
            pos += c as usize;
        }
        Ok(mask)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

/// Tight `[x, y, width, height]` box of the set pixels, `None` for an empty
/// mask.
pub fn bbox(mask: &[bool], height: usize, width: usize) -> Option<[usize; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}
