//! Builds referring-segmentation datasets from labelled aerial imagery.
//!
//! Source images are tiled into patches, patches dominated by one class or
//! lacking variety are dropped, a caption provider describes each present
//! class, captions are cleaned of uninformative clauses, and the result is
//! exported in the RefCOCO annotation layout.

pub mod caption;
pub mod error;
pub mod export;
pub mod fixture;
pub mod patch;
pub mod pipeline;
pub mod refine;
pub mod rle;
pub mod source;
pub mod split;

pub use caption::{
    build_prompt, generate_caption, CaptionOutcome, CaptionProvider, CaptionRequest, HttpProvider,
    HttpProviderConfig, PromptConfig, StubProvider, MAX_WORDS,
};
pub use error::{DatagenError, Result};
pub use export::{read_annotations, write_annotations, AnnotationFile};
pub use patch::{
    crop_patches, filter_patch, DiscardReason, FilterConfig, PatchRecord, Verdict, PATCH_SIZE,
};
pub use pipeline::{process_sources, run_pipeline, PipelineConfig, PipelineReport, ProviderKind};
pub use refine::{refine_description, Refined, DEFAULT_BLACKLIST};
pub use rle::Rle;
pub use source::{load_sources, ClassEntry, ClassTable, SemanticMaskImage};
pub use split::{assign_split, Split, SplitRatios};
