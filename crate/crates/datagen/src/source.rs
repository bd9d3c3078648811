//! Labelled source imagery and the class table.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DatagenError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    /// Palette color for RGB masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    /// Terms the caption prompt forbids for this class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicting: Vec<String>,
}

/// Class id to name mapping, loaded from a TOML file of `[[classes]]`
/// tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let t = Self { classes };
        t.validate()?;
        Ok(t)
    }

    pub fn from_names(names: &[(u8, &str)]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|&(id, name)| ClassEntry {
                    id,
                    name: name.into(),
                    color: None,
                    conflicting: Vec::new(),
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DatagenError::io(path, e))?;
        let t: Self = toml::from_str(&text)
            .map_err(|e| DatagenError::Config(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if c.name.trim().is_empty() {
                return Err(DatagenError::Config(format!("class {} has no name", c.id)));
            }
            if !ids.insert(c.id) {
                return Err(DatagenError::Config(format!("duplicate class id {}", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(DatagenError::Config(format!(
                    "duplicate class name {}",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u8) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn id_of_color(&self, rgb: [u8; 3]) -> Option<u8> {
        self.classes
            .iter()
            .find(|c| c.color == Some(rgb))
            .map(|c| c.id)
    }
}

/// One labelled source image: RGB pixels and per-pixel class ids, both
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMaskImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SemanticMaskImage {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
        table: &ClassTable,
    ) -> Result<Self> {
        let id = id.into();
        if pixels.len() != width * height * 3 || labels.len() != width * height {
            return Err(DatagenError::ingest(
                &id,
                format!(
                    "image and mask sizes disagree with {width}x{height} ({} pixel bytes, {} labels)",
                    pixels.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| table.get(l).is_none()) {
            return Err(DatagenError::ingest(
                &id,
                format!("mask value {bad} has no class-table entry"),
            ));
        }
        Ok(Self {
            id,
            width,
            height,
            pixels,
            labels,
        })
    }
}

/// Reads `<dir>/images/<id>.png` paired with `<dir>/masks/<id>.png`, sorted
/// by id. Masks are either 8-bit grey class ids, or RGB mapped through the
/// class table's palette.
pub fn load_sources(dir: &Path, table: &ClassTable) -> Result<Vec<SemanticMaskImage>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [dir, &images, &masks] {
        if !d.is_dir() {
            return Err(DatagenError::ingest(d, "directory not found"));
        }
    }
    let mut ids: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| DatagenError::io(&images, e))? {
        let path = entry.map_err(|e| DatagenError::io(&images, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            ids.push((stem.to_string(), path));
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|(id, image_path)| {
            let mask_path = masks.join(format!("{id}.png"));
            if !mask_path.is_file() {
                return Err(DatagenError::ingest(&mask_path, "mask file missing"));
            }
            let img = image::open(&image_path)
                .map_err(|e| DatagenError::ingest(&image_path, e.to_string()))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let labels = read_mask(&mask_path, table, w, h)?;
            SemanticMaskImage::new(id, w, h, img.into_raw(), labels, table)
        })
        .collect()
}

fn read_mask(path: &Path, table: &ClassTable, w: usize, h: usize) -> Result<Vec<u8>> {
    let dynamic = image::open(path).map_err(|e| DatagenError::ingest(path, e.to_string()))?;
    if (dynamic.width() as usize, dynamic.height() as usize) != (w, h) {
        return Err(DatagenError::ingest(
            path,
            format!(
                "mask is {}x{} but image is {w}x{h}",
                dynamic.width(),
                dynamic.height()
            ),
        ));
    }
    match dynamic {
        image::DynamicImage::ImageLuma8(g) => Ok(g.into_raw()),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                table.id_of_color(p.0).ok_or_else(|| {
                    DatagenError::ingest(path, format!("color {:?} not in the class palette", p.0))
                })
            })
            .collect(),
    }
}
