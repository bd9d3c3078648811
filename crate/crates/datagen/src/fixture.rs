//! A synthetic 2048 x 2048 labelled scene with one patch per filter case.
//!
//! Patches in (x, y) order:
//! - (0, 0): four quadrants of building, road, tree and vehicle, 0.25 each.
//! - (1024, 0): 734003 building pixels (just under 0.70), rest road. Kept.
//! - (0, 1024): 734004 building pixels (just over 0.70), rest road. Dominant.
//! - (1024, 1024): 838861 building pixels (0.80), rest tree. Dominant.

use std::fs;
use std::path::Path;

use crate::error::{DatagenError, Result};
use crate::source::{ClassEntry, ClassTable, SemanticMaskImage};

pub const FIXTURE_SIZE: usize = 2048;
pub const UNDER_BOUNDARY: usize = 734_003;
pub const OVER_BOUNDARY: usize = 734_004;
pub const EIGHTY_PERCENT: usize = 838_861;

pub fn fixture_classes() -> ClassTable {
    let entry = |id, name: &str, color, conflicting: &[&str]| ClassEntry {
        id,
        name: name.into(),
        color: Some(color),
        conflicting: conflicting.iter().map(|s| s.to_string()).collect(),
    };
    ClassTable::new(vec![
        entry(0, "background", [0, 0, 0], &[]),
        entry(1, "building", [128, 0, 0], &["road", "tree"]),
        entry(2, "road", [128, 64, 128], &["building", "river"]),
        entry(3, "tree", [0, 128, 0], &["grass"]),
        entry(4, "vehicle", [64, 0, 128], &["building"]),
    ])
    .expect("fixture class table is valid")
}

fn fill_patch(labels: &mut [u8], px: usize, py: usize, f: impl Fn(usize, usize) -> u8) {
    let s = FIXTURE_SIZE / 2;
    for y in 0..s {
        for x in 0..s {
            labels[(py * s + y) * FIXTURE_SIZE + px * s + x] = f(x, y);
        }
    }
}

pub fn fixture_labels() -> Vec<u8> {
    let s = FIXTURE_SIZE / 2;
    let mut labels = vec![0u8; FIXTURE_SIZE * FIXTURE_SIZE];
    fill_patch(&mut labels, 0, 0, |x, y| match (x < s / 2, y < s / 2) {
        (true, true) => 1,
        (false, true) => 2,
        (true, false) => 3,
        (false, false) => 4,
    });
    let first = |n: usize, rest: u8| move |x: usize, y: usize| if y * s + x < n { 1 } else { rest };
    fill_patch(&mut labels, 1, 0, first(UNDER_BOUNDARY, 2));
    fill_patch(&mut labels, 0, 1, first(OVER_BOUNDARY, 2));
    fill_patch(&mut labels, 1, 1, first(EIGHTY_PERCENT, 3));
    labels
}

/// Palette color plus a small deterministic texture.
pub fn fixture_pixels(labels: &[u8], table: &ClassTable) -> Vec<u8> {
    let mut px = Vec::with_capacity(labels.len() * 3);
    for (i, &l) in labels.iter().enumerate() {
        let base = table.get(l).and_then(|c| c.color).unwrap_or([0, 0, 0]);
        let (x, y) = (i % FIXTURE_SIZE, i / FIXTURE_SIZE);
        let t = ((x ^ y) & 15) as u8;
        px.extend(base.iter().map(|&c| c.saturating_add(t)));
    }
    px
}

pub fn fixture_source(id: &str) -> (ClassTable, SemanticMaskImage) {
    let table = fixture_classes();
    let labels = fixture_labels();
    let pixels = fixture_pixels(&labels, &table);
    let src = SemanticMaskImage::new(id, FIXTURE_SIZE, FIXTURE_SIZE, pixels, labels, &table)
        .expect("fixture is consistent");
    (table, src)
}

pub fn class_table_toml(table: &ClassTable) -> Result<String> {
    toml::to_string(table).map_err(|e| DatagenError::Config(e.to_string()))
}

/// Writes `images/<id>.png`, `masks/<id>.png` (grey class ids) and
/// `classes.toml` under `dir`.
pub fn write_fixture(dir: &Path, id: &str) -> Result<()> {
    let (table, src) = fixture_source(id);
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| DatagenError::io(&d, e))?;
    }
    let n = FIXTURE_SIZE as u32;
    let save_err =
        |p: &Path, e: image::ImageError| DatagenError::Export(format!("{}: {e}", p.display()));
    let img_path = dir.join("images").join(format!("{id}.png"));
    image::RgbImage::from_raw(n, n, src.pixels)
        .expect("buffer size")
        .save(&img_path)
        .map_err(|e| save_err(&img_path, e))?;
    let mask_path = dir.join("masks").join(format!("{id}.png"));
    image::GrayImage::from_raw(n, n, src.labels)
        .expect("buffer size")
        .save(&mask_path)
        .map_err(|e| save_err(&mask_path, e))?;
    let cls = dir.join("classes.toml");
    fs::write(&cls, class_table_toml(&table)?).map_err(|e| DatagenError::io(&cls, e))
}
