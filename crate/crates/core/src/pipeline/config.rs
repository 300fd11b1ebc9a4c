use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datagen::MixSpec;
use crate::error::{Error, Result};
use crate::language::MIN_NEGATIVES;
use crate::matchloss::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Decoder,
    EndToEnd,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Detector => "detector",
            Stage::Decoder => "decoder",
            Stage::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the stage's own parameters.
    pub lr: f64,
    /// Peak learning rate of the detector and text tower while the decoder
    /// stage fine-tunes them.
    pub backbone_lr: f64,
    pub warmup_steps: usize,
    pub droplayer_rate: f64,
    pub freeze_text: bool,
    pub freeze_detector: bool,
    /// Dataset sampling probabilities; empty means uniform.
    pub mix: MixSpec,
    pub seed: u64,
    /// Per-example global gradient norm bound.
    pub clip_norm: f64,
    pub negatives: usize,
    /// Draw a prompt template per label and image; otherwise always use the
    /// first template.
    pub sample_templates: bool,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
    /// Dataset files, used by the command-line tool.
    pub datasets: Vec<PathBuf>,
    /// Checkpoint to start from, used by the command-line tool.
    pub init_checkpoint: Option<PathBuf>,
    /// Assert the freeze and clipping contracts after every step.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Detector,
            steps: 10_000,
            batch_size: 64,
            lr: 1e-4,
            backbone_lr: 2e-6,
            warmup_steps: 1000,
            droplayer_rate: 0.0,
            freeze_text: true,
            freeze_detector: true,
            mix: MixSpec::default(),
            seed: 0,
            clip_norm: 1.0,
            negatives: MIN_NEGATIVES,
            sample_templates: true,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            datasets: Vec::new(),
            init_checkpoint: None,
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    /// Decoder stage for a single dataset: detector and text tower frozen.
    pub fn dataset_specific_decoder() -> Self {
        Self {
            stage: Stage::Decoder,
            lr: 1e-4,
            batch_size: 64,
            freeze_text: true,
            freeze_detector: true,
            ..Self::default()
        }
    }

    /// Decoder stage over a dataset mixture: backbone fine-tuned at a small
    /// learning rate.
    pub fn unified_decoder(mix: MixSpec) -> Self {
        Self {
            stage: Stage::Decoder,
            lr: 1e-4,
            backbone_lr: 2e-6,
            batch_size: 64,
            freeze_text: false,
            freeze_detector: false,
            mix,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.backbone_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.droplayer_rate) {
            return Err(Error::Config("droplayer_rate must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !self.mix.0.is_empty() {
            self.mix.validate()?;
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Peak learning rate of a parameter group, or `None` when the group is
    /// frozen in this stage.
    pub fn group_lr(&self, group: &str) -> Option<f64> {
        match (self.stage, group) {
            (_, "text") if self.freeze_text => None,
            (Stage::Detector, "decoder") => None,
            (Stage::Detector, _) => Some(self.lr),
            (Stage::Decoder, "decoder") => Some(self.lr),
            (Stage::Decoder, "detector") if self.freeze_detector => None,
            (Stage::Decoder, _) => Some(self.backbone_lr),
            (Stage::EndToEnd, _) => Some(self.lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_groups() {
        let d = TrainConfig::dataset_specific_decoder();
        assert_eq!((d.lr, d.batch_size), (1e-4, 64));
        assert_eq!(d.group_lr("detector"), None);
        assert_eq!(d.group_lr("text"), None);
        assert_eq!(d.group_lr("decoder"), Some(1e-4));
        let mix = MixSpec([("a".to_string(), 0.5), ("b".to_string(), 0.1), ("c".to_string(), 0.4)].into());
        let u = TrainConfig::unified_decoder(mix);
        assert_eq!(u.group_lr("detector"), Some(2e-6));
        assert_eq!(u.group_lr("text"), Some(2e-6));
        u.validate().unwrap();
        let det = TrainConfig::default();
        assert_eq!(det.group_lr("text"), None);
        assert_eq!(det.group_lr("decoder"), None);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = TrainConfig { warmup_steps: 20, steps: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"stage": "decoder", "steps": 3, "warmup_steps": 1}"#).unwrap();
        assert_eq!(ok.stage, Stage::Decoder);
    }
}
