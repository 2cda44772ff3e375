//! The configuration document written into every output directory.

use std::path::{Path, PathBuf};

use analogy_core::config::TrainConfig;
use analogy_core::inference::{Direction, NoiseMode};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "run.toml";
pub const OUT_DIR_ENV: &str = "ANALOGY_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    pub direction: Direction,
    pub inject: i64,
    pub early: Option<i64>,
    pub seed: u64,
    pub noise: NoiseMode,
    pub count: usize,
    /// Refinement bundle applied to translations, with its insertion scale.
    pub refine_checkpoint: Option<PathBuf>,
    pub refine_insert: i64,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self {
            direction: Direction::AToB,
            inject: -2,
            early: None,
            seed: 0,
            noise: NoiseMode::Random,
            count: 4,
            refine_checkpoint: None,
            refine_insert: -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub extractor_seed: u64,
    pub extractor_depth: usize,
    pub extractor_dim: usize,
    /// Parameter file with trained extractor weights; overrides the seeded one.
    pub extractor_weights: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { extractor_seed: 0, extractor_depth: 5, extractor_dim: 32, extractor_weights: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSettings {
    pub quantize_colors: Option<usize>,
    /// Reuse the first frame's normalisation statistics for every frame.
    pub freeze_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: String,
    pub img_a: Option<PathBuf>,
    pub img_b: Option<PathBuf>,
    /// Directory of A frames for video training or translation.
    pub frames: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub inference: InferenceSettings,
    pub video: VideoSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            img_a: None,
            img_b: None,
            frames: None,
            out_dir: default_out_dir(),
            checkpoint: None,
            train: TrainConfig::default(),
            inference: InferenceSettings::default(),
            video: VideoSettings { quantize_colors: None, freeze_norm: true },
            eval: EvalSettings::default(),
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let s = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&s).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FILE_NAME), self.to_toml())
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        for p in [&self.img_a, &self.img_b, &self.checkpoint, &self.inference.refine_checkpoint, &self.eval.extractor_weights]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(format!("{} does not exist", p.display()));
            }
        }
        if let Some(f) = &self.frames {
            if !f.is_dir() {
                return Err(format!("{} is not a directory", f.display()));
            }
        }
        if self.inference.count == 0 {
            return Err("count must be positive".into());
        }
        if self.video.quantize_colors == Some(0) {
            return Err("quantize_colors must be positive".into());
        }
        if self.eval.extractor_depth == 0 || self.eval.extractor_dim == 0 {
            return Err("extractor depth and dimension must be positive".into());
        }
        Ok(())
    }
}
