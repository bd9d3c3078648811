//! crop, filter, caption, refine and export, end to end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::{
    generate_caption, CaptionOutcome, CaptionProvider, HttpProviderConfig, PromptConfig,
};
use crate::error::{DatagenError, Result};
use crate::export::{
    compute_stats, write_annotations, AnnotationEntry, AnnotationFile, CategoryEntry, ImageEntry,
    RefEntry, Sentence,
};
use crate::patch::{crop_patches, filter_patch, FilterConfig, PatchRecord, Verdict, PATCH_SIZE};
use crate::refine::{refine_description, Refined, DEFAULT_BLACKLIST};
use crate::rle::{bbox, Rle};
use crate::source::{ClassTable, SemanticMaskImage};
use crate::split::{assign_split, SplitRatios};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Stub,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub filter: FilterConfig,
    pub prompt: PromptConfig,
    pub blacklist: Vec<String>,
    pub split: SplitRatios,
    pub provider: ProviderKind,
    pub http: HttpProviderConfig,
    /// Worker threads for patch processing; 0 uses the rayon default.
    pub threads: usize,
    pub top_k_words: usize,
    /// Also write each kept patch as a PNG under `patches/`.
    pub write_patches: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: PATCH_SIZE,
            filter: FilterConfig::default(),
            prompt: PromptConfig::default(),
            blacklist: DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect(),
            split: SplitRatios::default(),
            provider: ProviderKind::Stub,
            http: HttpProviderConfig::default(),
            threads: 0,
            top_k_words: 20,
            write_patches: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub file_name: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sources: usize,
    pub patches: usize,
    pub kept: usize,
    /// Discarded patch count per reason.
    pub discarded: BTreeMap<String, usize>,
    pub verdicts: Vec<PatchVerdict>,
    pub captions_requested: usize,
    /// Samples whose captions never met the word limit and category rule.
    pub caption_rejected: usize,
    /// Samples left empty or category-less by refinement.
    pub refine_rejected: usize,
    pub refs: usize,
}

impl PipelineReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "sources {}  patches {}  kept {}  discarded {}",
            self.sources,
            self.patches,
            self.kept,
            self.patches - self.kept
        );
        for (reason, n) in &self.discarded {
            s.push_str(&format!("  {reason} {n}"));
        }
        s.push_str(&format!(
            "\ncaptions {}  rejected {}  refined away {}  refs {}",
            self.captions_requested, self.caption_rejected, self.refine_rejected, self.refs
        ));
        s
    }
}

pub struct PipelineOutput {
    pub annotations: AnnotationFile,
    pub report: PipelineReport,
    /// Kept patches in export order, with their PNG bytes.
    pub patches: Vec<(PatchRecord, Vec<u8>)>,
}

pub fn encode_png(patch: &PatchRecord) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(patch.size as u32, patch.size as u32, patch.pixels.clone())
        .ok_or_else(|| DatagenError::Export(format!("{}: bad pixel buffer", patch.file_name())))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| DatagenError::Export(format!("{}: {e}", patch.file_name())))?;
    Ok(out.into_inner())
}

struct Job {
    patch: usize,
    class: u8,
    category: String,
}

enum JobResult {
    Ref(String),
    CaptionRejected,
    RefineRejected,
}

/// Runs the pipeline over in-memory sources.
pub fn process_sources(
    mut sources: Vec<SemanticMaskImage>,
    table: &ClassTable,
    cfg: &PipelineConfig,
    provider: &dyn CaptionProvider,
) -> Result<PipelineOutput> {
    cfg.split.validate()?;
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    let mut report = PipelineReport {
        sources: sources.len(),
        ..Default::default()
    };

    let mut kept = Vec::new();
    for src in &sources {
        let mut patches = crop_patches(src, table, cfg.patch_size)?;
        patches.sort_by_key(|p| (p.y, p.x));
        for mut p in patches {
            p.verdict = filter_patch(&p.class_distribution, &cfg.filter);
            report.patches += 1;
            report.verdicts.push(PatchVerdict {
                file_name: p.file_name(),
                verdict: p.verdict.clone(),
            });
            match &p.verdict {
                Verdict::Kept => kept.push(p),
                Verdict::Discarded(reason) => {
                    *report.discarded.entry(reason.to_string()).or_insert(0) += 1
                }
            }
        }
    }
    report.kept = kept.len();

    let pngs: Vec<Vec<u8>> = kept.par_iter().map(encode_png).collect::<Result<_>>()?;

    let total = |p: &PatchRecord| (p.size * p.size) as f64;
    let mut jobs = Vec::new();
    for (i, p) in kept.iter().enumerate() {
        for (&class, &n) in &p.class_pixels {
            if n as f64 / total(p) > cfg.filter.min_fraction {
                let category = table.get(class).map(|c| c.name.clone()).ok_or_else(|| {
                    DatagenError::Config(format!("class id {class} not in table"))
                })?;
                jobs.push(Job {
                    patch: i,
                    class,
                    category,
                });
            }
        }
    }
    report.captions_requested = jobs.len();

    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            let p = &kept[job.patch];
            let key = format!("{}_{}_{}", p.source_id, p.x, p.y);
            let outcome = generate_caption(
                provider,
                &pngs[job.patch],
                &key,
                &job.category,
                table,
                &cfg.prompt,
            )?;
            Ok(match outcome {
                CaptionOutcome::Rejected { .. } => JobResult::CaptionRejected,
                CaptionOutcome::Accepted(text) => {
                    match refine_description(&text, &job.category, &cfg.blacklist) {
                        Refined::Text(t) => JobResult::Ref(t),
                        Refined::Rejected(why) => {
                            log::info!("{key}/{}: {why}", job.category);
                            JobResult::RefineRejected
                        }
                    }
                }
            })
        })
        .collect::<Result<_>>()?;

    let mut file = AnnotationFile {
        categories: table
            .classes
            .iter()
            .map(|c| CategoryEntry {
                id: c.id,
                name: c.name.clone(),
                supercategory: c.name.clone(),
            })
            .collect(),
        ..Default::default()
    };
    let mut image_ids: BTreeMap<usize, u64> = BTreeMap::new();
    let mut next_id = 1u64;
    for (job, result) in jobs.iter().zip(results) {
        let text = match result {
            JobResult::Ref(t) => t,
            JobResult::CaptionRejected => {
                report.caption_rejected += 1;
                continue;
            }
            JobResult::RefineRejected => {
                report.refine_rejected += 1;
                continue;
            }
        };
        let p = &kept[job.patch];
        let image_id = *image_ids.entry(job.patch).or_insert_with(|| {
            let id = file.images.len() as u64 + 1;
            file.images.push(ImageEntry {
                id,
                file_name: p.file_name(),
                height: p.size,
                width: p.size,
                source_id: p.source_id.clone(),
                x: p.x,
                y: p.y,
            });
            id
        });
        let mask = p.class_mask(job.class);
        let seg = Rle::encode(&mask, p.size, p.size);
        let id = next_id;
        next_id += 1;
        file.annotations.push(AnnotationEntry {
            id,
            image_id,
            category_id: job.class,
            area: seg.area(),
            bbox: bbox(&mask, p.size, p.size).expect("category is present in the patch"),
            segmentation: seg,
            iscrowd: 0,
        });
        file.refs.push(RefEntry {
            ref_id: id,
            ann_id: id,
            image_id,
            file_name: p.file_name(),
            split: assign_split(&p.source_id, &cfg.split, cfg.seed),
            category_id: job.class,
            category: job.category.clone(),
            sent_ids: vec![id],
            sentences: vec![Sentence::new(id, &text)],
        });
    }
    report.refs = file.refs.len();
    file.validate()?;

    let patches = kept
        .into_iter()
        .zip(pngs)
        .enumerate()
        .filter(|(i, _)| image_ids.contains_key(i))
        .map(|(_, p)| p)
        .collect();
    Ok(PipelineOutput {
        annotations: file,
        report,
        patches,
    })
}

#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub annotations: PathBuf,
    pub stats: PathBuf,
    pub report: PathBuf,
    pub patches: PathBuf,
}

impl OutputPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            annotations: out.join("annotations.json"),
            stats: out.join("stats.txt"),
            report: out.join("datagen_report.json"),
            patches: out.join("patches"),
        }
    }
}

/// Writes the annotation file, statistics, report and kept patches.
pub fn write_outputs(
    output: &PipelineOutput,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<OutputPaths> {
    let paths = OutputPaths::new(out);
    fs::create_dir_all(out).map_err(|e| DatagenError::io(out, e))?;
    write_annotations(&output.annotations, &paths.annotations)?;
    let stats = compute_stats(&output.annotations, cfg.top_k_words);
    fs::write(&paths.stats, stats.render()).map_err(|e| DatagenError::io(&paths.stats, e))?;
    let report = serde_json::to_vec_pretty(&output.report)
        .map_err(|e| DatagenError::Export(e.to_string()))?;
    fs::write(&paths.report, report).map_err(|e| DatagenError::io(&paths.report, e))?;
    if cfg.write_patches {
        fs::create_dir_all(&paths.patches).map_err(|e| DatagenError::io(&paths.patches, e))?;
        for (p, png) in &output.patches {
            let path = paths.patches.join(p.file_name());
            fs::write(&path, png).map_err(|e| DatagenError::io(&path, e))?;
        }
    }
    Ok(paths)
}

/// Loads sources from `input`, runs the pipeline on a pool of
/// `cfg.threads` workers and writes everything under `out`.
pub fn run_pipeline(
    input: &Path,
    table: &ClassTable,
    out: &Path,
    cfg: &PipelineConfig,
    provider: &dyn CaptionProvider,
) -> Result<(PipelineReport, OutputPaths)> {
    let sources = crate::source::load_sources(input, table)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| DatagenError::Config(format!("thread pool: {e}")))?;
    let output = pool.install(|| process_sources(sources, table, cfg, provider))?;
    let paths = write_outputs(&output, out, cfg)?;
    Ok((output.report, paths))
}
