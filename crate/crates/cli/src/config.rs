//! Run configuration: built-in defaults, then the `--config` file, then
//! command-line flags. The effective configuration is written to
//! `<out>/run_config.toml`; passing that file back as `--config` repeats
//! the run.

use std::fs;
use std::path::{Path, PathBuf};

use aeroreformer::model::{ModelConfig, TrainOptions};
use aeroreformer_datagen::PipelineConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub datagen: DatagenSection,
    pub gradcheck: GradcheckSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub forward: ForwardSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            datagen: DatagenSection::default(),
            gradcheck: GradcheckSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            forward: ForwardSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenSection {
    /// Directory holding `images/` and `masks/`.
    pub input: Option<PathBuf>,
    /// Class table; defaults to `<input>/classes.toml`.
    pub classes: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSection {
    pub seeds: u64,
    /// Case names to run; empty runs every case.
    pub only: Vec<String>,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            only: Vec::new(),
            tolerance: aeroreformer::suite::TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub model: ModelConfig,
    pub optim: TrainOptions,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::smoke(),
            optim: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Directory of `<ref_id>.png` prediction masks (nonzero is foreground).
    pub pred: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Restrict to one split (`train`, `val` or `test`).
    pub split: Option<String>,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardSection {
    pub model: ModelConfig,
    /// Parameters written by `train-demo`; fresh initialization if unset.
    pub checkpoint: Option<PathBuf>,
    /// RGB image of the model's input size; a synthetic sample if unset.
    pub image: Option<PathBuf>,
    pub tokens: Vec<usize>,
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::smoke(),
            checkpoint: None,
            image: None,
            tokens: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, out: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("run_config.toml");
        let text = toml::to_string(self).context("serializing run config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
