//! Pipeline configuration: one JSON file drives every subcommand so a full
//! run is reproducible from the config plus a seed. Fields left out of the
//! file fall back to desk-scale defaults sized for minute-scale runs.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::segvit::ModelConfig;
use crate::trainer::TrainSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_species: usize,
    pub tiles_per_species: usize,
    pub tile_px: usize,
    pub n_transects: usize,
    pub quadrats_per_transect: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub fg_density: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_species: 16,
            tiles_per_species: 8,
            tile_px: 64,
            n_transects: 5,
            quadrats_per_transect: 8,
            grid_rows: 24,
            grid_cols: 24,
            fg_density: 0.65,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_px: usize,
    pub feature_dim: usize,
    pub projection_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_px: 64,
            feature_dim: 32,
            projection_seed: 1234,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            depth: 1,
            heads: 2,
            model_dim: 32,
            mlp_ratio: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub patience: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = TrainSchedule::default();
        Self {
            lr_start: d.lr_start,
            lr_peak: d.lr_peak,
            lr_final: d.lr_final,
            warmup_epochs: d.warmup_epochs,
            total_epochs: d.total_epochs,
            wd_start: d.wd_start,
            wd_end: d.wd_end,
            effective_batch: d.effective_batch,
            micro_batch: d.micro_batch,
            patience: d.patience,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub t: f64,
    pub prob: f64,
    /// window size for heuristic 2; absent selects heuristic 1
    pub grid_k: Option<usize>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            t: 0.7,
            prob: 0.5,
            grid_k: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub backbone: BackboneConfig,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub inference: InferenceSection,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            backbone: BackboneConfig::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            inference: InferenceSection::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse {
                line: e.line(),
                msg: format!("{}: {e}", path.display()),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.schedule().validate()?;
        if let Some(k) = self.inference.grid_k {
            if k % 2 == 0 || k > self.corpus.grid_rows.min(self.corpus.grid_cols) {
                return Err(Error::Argument(format!(
                    "grid_k {k} must be odd and fit the {}x{} plot grid",
                    self.corpus.grid_rows, self.corpus.grid_cols
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.model.depth,
            heads: self.model.heads,
            model_dim: self.model.model_dim,
            backbone_dim: self.backbone.feature_dim,
            k_cls: self.corpus.n_species,
            proto_dim: self.backbone.feature_dim,
            mlp_ratio: self.model.mlp_ratio,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr_start: self.schedule.lr_start,
            lr_peak: self.schedule.lr_peak,
            lr_final: self.schedule.lr_final,
            warmup_epochs: self.schedule.warmup_epochs,
            total_epochs: self.schedule.total_epochs,
            wd_start: self.schedule.wd_start,
            wd_end: self.schedule.wd_end,
            effective_batch: self.schedule.effective_batch,
            micro_batch: self.schedule.micro_batch,
            patience: self.schedule.patience,
        }
    }

    pub fn plot_px(&self) -> (usize, usize) {
        (
            self.corpus.grid_rows * self.corpus.tile_px,
            self.corpus.grid_cols * self.corpus.tile_px,
        )
    }

    pub fn inference_config(&self, t: f64, prob: f64, grid_k: Option<usize>) -> InferenceConfig {
        let (h, w) = self.plot_px();
        InferenceConfig {
            t,
            prob,
            grid_k,
            input_h: h,
            input_w: w,
            patch_px: self.corpus.tile_px,
        }
    }
}
