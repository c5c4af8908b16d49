use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::graphmatch::MAX_EXACT_PARTS;
use crate::align::{AlignmentVariant, MatchMode};
use crate::error::{Error, Result};
use crate::losses::KlDirection;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One experiment. Every field has a default, and the whole value is written
/// verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alignment: AlignmentVariant,
    pub jitter: bool,
    pub jitter_strength: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_reg: f64,
    pub lambda_part: f64,
    pub tau: f64,
    pub kl_direction: KlDirection,
    pub ema_rate: f64,
    pub num_parts: usize,
    pub match_mode: MatchMode,
    pub widths: [usize; 3],
    pub d_repr: usize,
    pub window: usize,
    pub nms_iou: f64,
    pub heads: usize,
    pub expansion: usize,
    pub synth: SynthSpec,
    pub precision: Precision,
    /// Fill `wall_time` in metrics records. Off by default so that metrics
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            seed: 0,
            alignment: m.alignment,
            jitter: false,
            jitter_strength: 0.4,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            lambda_reg: m.lambda_reg,
            lambda_part: m.lambda_part,
            tau: m.tau,
            kl_direction: m.kl_direction,
            ema_rate: 0.1,
            num_parts: m.num_parts,
            match_mode: m.match_mode,
            widths: m.widths,
            d_repr: m.d_repr,
            window: m.window,
            nms_iou: m.nms_iou,
            heads: m.heads,
            expansion: m.expansion,
            synth: SynthSpec::default(),
            precision: Precision::F32,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            image_size: self.synth.image_size,
            widths: self.widths,
            d_repr: self.d_repr,
            num_classes: self.synth.num_classes,
            num_parts: self.num_parts,
            window: self.window,
            nms_iou: self.nms_iou,
            alignment: self.alignment,
            heads: self.heads,
            expansion: self.expansion,
            tau: self.tau,
            kl_direction: self.kl_direction,
            lambda_reg: self.lambda_reg,
            lambda_part: self.lambda_part,
            match_mode: self.match_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::Config("jitter strength must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::Config("ema rate must lie in [0, 1]".into()));
        }
        self.synth.validate()?;
        self.model_config().validate()?;
        if self.alignment == AlignmentVariant::GraphMatch
            && self.match_mode == MatchMode::Exact
            && self.num_parts > MAX_EXACT_PARTS
        {
            return Err(Error::TooManyParts {
                n: self.num_parts,
                max: MAX_EXACT_PARTS,
            });
        }
        Ok(())
    }
}
