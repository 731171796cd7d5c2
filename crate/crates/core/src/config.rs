//! The single JSON document that drives a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionConfig;
use crate::rdt::RdtConfig;
use crate::signal::{PipelineConfig, SegmentationConfig};
use crate::synth::{self, BreathModel, CorpusConfig, MicromotionEvent, RadarParams, SceneConfig, Split};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config does not match the schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A hand-written scene. Radar settings come from the top-level `radar`
/// section; the seed defaults to one derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_split")]
    pub split: Split,
    pub breath: BreathModel,
    #[serde(default)]
    pub events: Vec<MicromotionEvent>,
    pub range_m: f64,
    pub snr_db: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Segments per batched sampling call.
    pub batch_size: usize,
    pub bpf_low_hz: f64,
    pub bpf_high_hz: f64,
    /// Sampling seed; `None` uses the master seed.
    pub seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 64, bpf_low_hz: crate::eval::RATE_BAND_HZ.0, bpf_high_hz: crate::eval::RATE_BAND_HZ.1, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    /// Write the raw radar cubes next to the segment tables.
    pub write_cubes: bool,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint: "model.ckpt".into(),
            output_dir: "out".into(),
            write_cubes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub radar: RadarParams,
    /// Explicit scenes. When empty, the random corpus is drawn instead.
    pub scene: Vec<SceneSpec>,
    pub corpus: CorpusConfig,
    pub segmentation: SegmentationConfig,
    pub pipeline: PipelineConfig,
    pub diffusion: DiffusionConfig,
    pub model: RdtConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            radar: RadarParams::default(),
            scene: Vec::new(),
            corpus: CorpusConfig::default(),
            segmentation: SegmentationConfig::default(),
            pipeline: PipelineConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: RdtConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let fs = self.radar.frame_rate_hz();
        if !(fs.is_finite() && fs > 0.0) {
            return Err(ConfigError::Invalid("radar.frame_period_s must be positive".into()));
        }
        self.segmentation.hop_samples(fs).map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        if self.model.seq_len != self.segmentation.segment_len {
            return Err(ConfigError::Invalid(format!(
                "model.seq_len {} differs from segmentation.segment_len {}",
                self.model.seq_len, self.segmentation.segment_len
            )));
        }
        self.diffusion.respaced().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        let (lo, hi) = (self.eval.bpf_low_hz, self.eval.bpf_high_hz);
        if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
            return Err(ConfigError::Invalid(format!("band-pass band [{lo}, {hi}] Hz is not inside (0, {})", fs / 2.0)));
        }
        if self.eval.batch_size == 0 {
            return Err(ConfigError::Invalid("eval.batch_size must be at least 1".into()));
        }
        let c = &self.corpus;
        if self.scene.is_empty() && (c.train_scenes == 0 || c.test_scenes == 0) {
            return Err(ConfigError::Invalid("the corpus needs at least one train and one test scene".into()));
        }
        if !(c.snr_db_min <= c.snr_db_max) {
            return Err(ConfigError::Invalid("corpus.snr_db_min exceeds snr_db_max".into()));
        }
        for (i, s) in self.scenes(Split::Train).iter().chain(&self.scenes(Split::Test)).enumerate() {
            s.validate().map_err(|e| ConfigError::Invalid(format!("scene {i}: {e}")))?;
        }
        Ok(())
    }

    /// Scenes of `split`, either the explicit ones or the drawn corpus.
    pub fn scenes(&self, split: Split) -> Vec<SceneConfig> {
        if self.scene.is_empty() {
            return synth::corpus_scenes(self.seed, split, &self.corpus, &self.radar);
        }
        self.scene
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, s)| SceneConfig {
                breath: s.breath,
                events: s.events.clone(),
                range_m: s.range_m,
                snr_db: s.snr_db,
                duration_s: s.duration_s,
                radar: self.radar,
                seed: s.seed.unwrap_or_else(|| synth::scene_seed(self.seed, split, i)),
            })
            .collect()
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }
}
