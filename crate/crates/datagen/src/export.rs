//! Annotation file in the RefCOCO layout, plus corpus statistics.
//!
//! The file is one JSON document:
//!
//! ```text
//! images:      [{id, file_name, height, width, source_id, x, y}]
//! annotations: [{id, image_id, category_id, segmentation: {size: [h, w], counts}, area, bbox: [x, y, w, h], iscrowd}]
//! refs:        [{ref_id, ann_id, image_id, file_name, split, category_id, category, sent_ids, sentences: [{sent_id, raw, sent, tokens}]}]
//! categories:  [{id, name, supercategory}]
//! ```
//!
//! `segmentation` is the column-major counts RLE of [`crate::rle::Rle`];
//! `area` is its popcount.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::words;
use crate::error::{DatagenError, Result};
use crate::rle::Rle;
use crate::split::Split;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u8,
    pub segmentation: Rle,
    pub area: u64,
    pub bbox: [usize; 4],
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: u64,
    pub raw: String,
    /// Lowercased, punctuation-free form of `raw`.
    pub sent: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(sent_id: u64, raw: &str) -> Self {
        let tokens = words(raw);
        Self {
            sent_id,
            raw: raw.to_string(),
            sent: tokens.join(" "),
            tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefEntry {
    pub ref_id: u64,
    pub ann_id: u64,
    pub image_id: u64,
    pub file_name: String,
    pub split: Split,
    pub category_id: u8,
    pub category: String,
    pub sent_ids: Vec<u64>,
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u8,
    pub name: String,
    pub supercategory: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub refs: Vec<RefEntry>,
    pub categories: Vec<CategoryEntry>,
}

impl AnnotationFile {
    /// Checks id uniqueness and that every reference resolves.
    pub fn validate(&self) -> Result<()> {
        let mut refs = BTreeSet::new();
        for r in &self.refs {
            if !refs.insert(r.ref_id) {
                return Err(DatagenError::Export(format!(
                    "duplicate ref_id {}",
                    r.ref_id
                )));
            }
        }
        let images: HashMap<u64, &ImageEntry> = self.images.iter().map(|i| (i.id, i)).collect();
        let anns: HashMap<u64, &AnnotationEntry> =
            self.annotations.iter().map(|a| (a.id, a)).collect();
        if images.len() != self.images.len() || anns.len() != self.annotations.len() {
            return Err(DatagenError::Export(
                "duplicate image or annotation id".into(),
            ));
        }
        for r in &self.refs {
            let ann = anns.get(&r.ann_id).ok_or_else(|| {
                DatagenError::Export(format!(
                    "ref {} points at missing annotation {}",
                    r.ref_id, r.ann_id
                ))
            })?;
            if ann.image_id != r.image_id || !images.contains_key(&r.image_id) {
                return Err(DatagenError::Export(format!(
                    "ref {} disagrees with its annotation's image",
                    r.ref_id
                )));
            }
        }
        Ok(())
    }

    pub fn annotation(&self, id: u64) -> Option<&AnnotationEntry> {
        self.annotations.iter().find(|a| a.id == id)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes =
            serde_json::to_vec_pretty(self).map_err(|e| DatagenError::Export(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

pub fn write_annotations(file: &AnnotationFile, path: &Path) -> Result<()> {
    file.validate()?;
    fs::write(path, file.to_json()?).map_err(|e| DatagenError::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let bytes = fs::read(path).map_err(|e| DatagenError::io(path, e))?;
    let file: AnnotationFile = serde_json::from_slice(&bytes)
        .map_err(|e| DatagenError::Export(format!("{}: {e}", path.display())))?;
    file.validate()?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub refs: usize,
    pub category_counts: BTreeMap<String, usize>,
    /// Most frequent tokens, ties broken alphabetically.
    pub top_words: Vec<(String, usize)>,
}

pub fn compute_stats(file: &AnnotationFile, top_k: usize) -> Stats {
    let mut category_counts = BTreeMap::new();
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &file.refs {
        *category_counts.entry(r.category.clone()).or_insert(0) += 1;
        for s in &r.sentences {
            for t in &s.tokens {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut top: Vec<(String, usize)> = freq.into_iter().map(|(w, n)| (w.to_string(), n)).collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(top_k);
    Stats {
        refs: file.refs.len(),
        category_counts,
        top_words: top,
    }
}

impl Stats {
    pub fn render(&self) -> String {
        let mut s = format!("refs {}\n\n# category counts\n", self.refs);
        for (c, n) in &self.category_counts {
            let _ = writeln!(s, "{c}\t{n}");
        }
        s.push_str("\n# top words\n");
        for (w, n) in &self.top_words {
            let _ = writeln!(s, "{w}\t{n}");
        }
        s
    }
}
