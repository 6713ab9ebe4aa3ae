//! The single JSON run configuration and its flag overrides.

use serde::{Deserialize, Serialize};
use sosdet::detect::{DetectConfig, LevelSet};
use sosdet::eval::EvalConfig;
use sosdet::net::ModelConfig;
use sosdet::raster::{PyramidConfig, TilerConfig};
use sosdet::synth::SceneSpec;
use sosdet::train::{LossConfig, TrainConfig};

/// Detection settings that are not shared with training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
    pub levels: LevelSet,
}

impl Default for DetectSection {
    fn default() -> Self {
        let d = DetectConfig::default();
        Self {
            score_threshold: d.score_threshold,
            nms_iou: d.nms_iou,
            batch_size: d.batch_size,
            levels: d.levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces `scene.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub scene: SceneSpec,
    pub pyramid: PyramidConfig,
    pub tiler: TilerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub detect: DetectSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scene: SceneSpec::default(),
            pyramid: PyramidConfig::default(),
            tiler: TilerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            detect: DetectSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the seed override and checks every section.
    pub fn resolve(mut self, seed_flag: Option<u64>) -> Result<Self, String> {
        if let Some(s) = seed_flag {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.scene.seed = s;
            self.train.seed = s;
        }
        if self.scene.class_count != self.model.foreground_classes {
            return Err(format!(
                "scene.class_count ({}) differs from model.foreground_classes ({})",
                self.scene.class_count, self.model.foreground_classes
            ));
        }
        if self.pyramid.patch_side != self.model.anchors.input_side
            || self.tiler.patch_width != self.model.anchors.input_side
            || self.tiler.patch_height != self.model.anchors.input_side
        {
            return Err("pyramid.patch_side and tiler patch sides must equal model.anchors.input_side".into());
        }
        self.scene.validate()?;
        self.pyramid.validate()?;
        self.tiler.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.detect_config().validate()?;
        self.eval.validate()?;
        Ok(self)
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            score_threshold: self.detect.score_threshold,
            nms_iou: self.detect.nms_iou,
            batch_size: self.detect.batch_size,
            pyramid: self.pyramid,
            tiler: self.tiler,
            levels: self.detect.levels.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
