use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::AssignConfig;
use crate::error::{Error, Result};
use crate::head::PostprocessConfig;
use crate::neck::NECK_WIDTHS;

/// Named neck widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 128 channels.
    Accuracy,
    /// 64 channels.
    Latency,
}

impl Profile {
    pub fn neck_channels(self) -> usize {
        match self {
            Profile::Accuracy => 128,
            Profile::Latency => 64,
        }
    }
}

/// How 8-bit pixels are turned into network input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by 255, no mean or std whitening.
    #[default]
    Scale01,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub neck_channels: usize,
    pub top_k: usize,
    pub lambda: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Accuracy)
    }
}

/// On-disk form: every field optional, `profile` as shorthand for `neck_channels`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profile: Option<Profile>,
    input_size: Option<usize>,
    num_classes: Option<usize>,
    neck_channels: Option<usize>,
    top_k: Option<usize>,
    lambda: Option<f64>,
    score_thresh: Option<f64>,
    nms_thresh: Option<f64>,
    max_dets: Option<usize>,
    normalization: Option<Normalization>,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let post = PostprocessConfig::default();
        let assign = AssignConfig::default();
        ModelConfig {
            input_size: 400,
            num_classes: 1,
            neck_channels: profile.neck_channels(),
            top_k: assign.top_k,
            lambda: assign.lambda,
            score_thresh: post.score_thresh,
            nms_thresh: post.nms_thresh,
            max_dets: post.max_dets,
            normalization: Normalization::Scale01,
        }
    }

    pub fn with_neck(mut self, channels: usize) -> Self {
        self.neck_channels = channels;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            score_thresh: self.score_thresh,
            nms_thresh: self.nms_thresh,
            max_dets: self.max_dets,
        }
    }

    pub fn assign(&self) -> AssignConfig {
        AssignConfig {
            lambda: self.lambda,
            top_k: self.top_k,
            num_levels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 {
            return Err(Error::Validation(format!("input_size must be at least 32, got {}", self.input_size)));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be at least 1".into()));
        }
        if !NECK_WIDTHS.contains(&self.neck_channels) {
            return Err(Error::Validation(format!(
                "neck_channels must be one of {NECK_WIDTHS:?}, got {}",
                self.neck_channels
            )));
        }
        self.assign().validate()?;
        self.postprocess().validate()
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let file: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string(),
        })?;
        let base = Self::for_profile(file.profile.unwrap_or(Profile::Accuracy));
        if let (Some(p), Some(c)) = (file.profile, file.neck_channels) {
            if p.neck_channels() != c {
                return Err(Error::Validation(format!(
                    "profile {p:?} implies neck_channels {} but {c} was given",
                    p.neck_channels()
                )));
            }
        }
        let cfg = ModelConfig {
            input_size: file.input_size.unwrap_or(base.input_size),
            num_classes: file.num_classes.unwrap_or(base.num_classes),
            neck_channels: file.neck_channels.unwrap_or(base.neck_channels),
            top_k: file.top_k.unwrap_or(base.top_k),
            lambda: file.lambda.unwrap_or(base.lambda),
            score_thresh: file.score_thresh.unwrap_or(base.score_thresh),
            nms_thresh: file.nms_thresh.unwrap_or(base.nms_thresh),
            max_dets: file.max_dets.unwrap_or(base.max_dets),
            normalization: file.normalization.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        Self::from_json(&value.to_string(), "embedded config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}
