//! Declarative run configuration: a TOML file fully validated before any
//! compute. Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ViewSpec;
use crate::error::{AptError, Result};
use crate::model::ArchSpec;
use crate::prompt::{DepthPlacement, TuningMode, DEFAULT_PROMPT_DROPOUT};
use crate::trainer::OptimConfig;

fn default_mlp_ratio() -> f64 {
    4.0
}

/// Backbone selection: a named preset, or every field spelled out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "tiny" | "toy" | "vit-small-video" | "vit-base-video"
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tubelet_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tubelet_p: Option<usize>,
}

pub fn preset_arch(name: &str, num_classes: usize) -> Result<ArchSpec> {
    match name {
        "tiny" => Ok(ArchSpec::tiny(num_classes)),
        "toy" => Ok(ArchSpec::toy(num_classes)),
        "vit-small-video" => Ok(ArchSpec::vit_small_video(num_classes)),
        "vit-base-video" => Ok(ArchSpec::vit_base_video(num_classes)),
        other => Err(AptError::config(format!(
            "unknown preset {other:?}; expected tiny, toy, vit-small-video or vit-base-video"
        ))),
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Result<ArchSpec> {
        let arch = if let Some(preset) = &self.preset {
            let base = preset_arch(preset, self.num_classes)?;
            // Presets fix every dimension; explicit fields are a conflict.
            if self.embed_dim.is_some()
                || self.num_heads.is_some()
                || self.depth.is_some()
                || self.frames.is_some()
                || self.height.is_some()
                || self.width.is_some()
                || self.channels.is_some()
                || self.tubelet_t.is_some()
                || self.tubelet_p.is_some()
            {
                return Err(AptError::config(
                    "model.preset cannot be combined with explicit dimension fields".to_string(),
                ));
            }
            base
        } else {
            let require = |field: Option<usize>, name: &str| {
                field.ok_or_else(|| {
                    AptError::config(format!("model.{name} is required when no preset is set"))
                })
            };
            ArchSpec {
                embed_dim: require(self.embed_dim, "embed_dim")?,
                num_heads: require(self.num_heads, "num_heads")?,
                depth: require(self.depth, "depth")?,
                mlp_ratio: self.mlp_ratio,
                frames: require(self.frames, "frames")?,
                height: require(self.height, "height")?,
                width: require(self.width, "width")?,
                channels: require(self.channels, "channels")?,
                tubelet_t: require(self.tubelet_t, "tubelet_t")?,
                tubelet_p: require(self.tubelet_p, "tubelet_p")?,
                num_classes: self.num_classes,
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn default_placement() -> String {
    "all".to_string()
}

fn default_dropout() -> f64 {
    DEFAULT_PROMPT_DROPOUT
}

fn default_reparam() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    /// "full" | "linear-probe" | "vpt-deep" | "apt"
    pub kind: String,
    #[serde(default)]
    pub n_p: usize,
    #[serde(default = "default_placement")]
    pub placement: String,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_reparam")]
    pub reparam: bool,
}

impl ModeConfig {
    pub fn mode(&self) -> Result<TuningMode> {
        match self.kind.as_str() {
            "full" => Ok(TuningMode::Full),
            "linear-probe" => Ok(TuningMode::LinearProbe),
            "vpt-deep" => Ok(TuningMode::VptDeep { n_p: self.n_p }),
            "apt" => Ok(TuningMode::Apt {
                n_p: self.n_p,
                placement: self.placement.parse::<DepthPlacement>()?,
                dropout_rate: self.dropout,
                reparam: self.reparam,
            }),
            other => Err(AptError::config(format!(
                "unknown mode.kind {other:?}; expected full, linear-probe, vpt-deep or apt"
            ))),
        }
    }
}

fn default_noise_sigma() -> f64 {
    0.05
}

/// Data source: generated on the fly (counts) or loaded from APTD files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<String>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let synthetic = self.train_samples.is_some() || self.test_samples.is_some();
        let from_files = self.train_path.is_some() || self.test_path.is_some();
        if synthetic && from_files {
            return Err(AptError::config(
                "data: choose either sample counts or APTD paths, not both".to_string(),
            ));
        }
        if !synthetic && !from_files {
            return Err(AptError::config(
                "data: set train_samples/test_samples or train_path/test_path".to_string(),
            ));
        }
        if synthetic && (self.train_samples.unwrap_or(0) == 0) {
            return Err(AptError::config("data.train_samples must be >= 1".to_string()));
        }
        if from_files && self.train_path.is_none() {
            return Err(AptError::config("data.train_path is required".to_string()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(AptError::config("data.noise_sigma must be finite and >= 0".to_string()));
        }
        Ok(())
    }
}

fn default_temporal_clips() -> usize {
    1
}

fn default_spatial_views() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_temporal_clips")]
    pub temporal_clips: usize,
    #[serde(default = "default_spatial_views")]
    pub spatial_views: usize,
    /// Evaluate every N epochs; 0 = final epoch only.
    #[serde(default)]
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { temporal_clips: 1, spatial_views: 1, every: 0 }
    }
}

impl EvalConfig {
    pub fn views(&self) -> ViewSpec {
        ViewSpec {
            temporal_clips: self.temporal_clips,
            spatial_views: self.spatial_views,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub mode: ModeConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| AptError::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AptError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.model.arch()?;
        let mode = self.mode.mode()?;
        mode.validate(&arch)?;
        self.optim.validate()?;
        self.data.validate()?;
        self.eval.views().validate()?;
        if self.out_dir.is_empty() {
            return Err(AptError::config("out_dir must not be empty".to_string()));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        self.model.arch()
    }

    pub fn tuning_mode(&self) -> Result<TuningMode> {
        self.mode.mode()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| AptError::config(format!("config serialize: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY_APT: &str = r#"
seed = 7
out_dir = "out"

[model]
preset = "toy"
num_classes = 4

[mode]
kind = "apt"
n_p = 16
placement = "all"
dropout = 0.1
reparam = true

[optim]
base_lr = 0.01
betas = [0.9, 0.999]
eps = 1e-8
wd_prompts = 1e-5
wd_head = 1e-5
warmup_epochs = 1
total_epochs = 5
batch_size = 32

[data]
train_samples = 64
test_samples = 16
noise_sigma = 0.05

[eval]
temporal_clips = 1
spatial_views = 1
every = 0
"#;

    #[test]
    fn parses_and_validates_toy_config() {
        let cfg = RunConfig::from_str(TOY_APT).unwrap();
        assert_eq!(cfg.arch().unwrap(), ArchSpec::toy(4));
        let mode = cfg.tuning_mode().unwrap();
        assert_eq!(mode.n_p(), 16);
        assert_eq!(mode.label(), "apt");
        assert_eq!(cfg.eval.views().total_views(), 1);
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = RunConfig::from_str(TOY_APT).unwrap();
        let text = cfg.to_toml().unwrap();
        let cfg2 = RunConfig::from_str(&text).unwrap();
        let text2 = cfg2.to_toml().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = TOY_APT.replace("dropout = 0.1", "dropout = 0.1\ntypo_key = 3");
        let err = RunConfig::from_str(&bad).unwrap_err();
        assert!(matches!(err, AptError::Config(_)));
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn rejects_bad_mode_and_placement() {
        let bad = TOY_APT.replace("kind = \"apt\"", "kind = \"adapters\"");
        assert!(RunConfig::from_str(&bad).is_err());
        let bad = TOY_APT.replace("placement = \"all\"", "placement = \"deepestX\"");
        assert!(RunConfig::from_str(&bad).is_err());
        // Placement deeper than the backbone.
        let bad = TOY_APT.replace("placement = \"all\"", "placement = \"deepest:9\"");
        assert!(RunConfig::from_str(&bad).is_err());
    }

    #[test]
    fn rejects_conflicting_data_sources() {
        let bad = TOY_APT.replace(
            "train_samples = 64",
            "train_samples = 64\ntrain_path = \"x.aptd\"",
        );
        assert!(RunConfig::from_str(&bad).is_err());
    }

    #[test]
    fn preset_conflicts_with_explicit_dims() {
        let bad = TOY_APT.replace("preset = \"toy\"", "preset = \"toy\"\nembed_dim = 128");
        assert!(RunConfig::from_str(&bad).is_err());
    }

    #[test]
    fn custom_arch_requires_all_fields() {
        let custom = TOY_APT.replace(
            "preset = \"toy\"",
            "embed_dim = 16\nnum_heads = 2\ndepth = 2\nframes = 4\nheight = 8\nwidth = 8\nchannels = 1\ntubelet_t = 1\ntubelet_p = 4",
        );
        let cfg = RunConfig::from_str(&custom).unwrap();
        assert_eq!(cfg.arch().unwrap().embed_dim, 16);
        let missing = TOY_APT.replace("preset = \"toy\"", "embed_dim = 16");
        assert!(RunConfig::from_str(&missing).is_err());
    }

    #[test]
    fn presets_by_name() {
        assert_eq!(preset_arch("tiny", 4).unwrap(), ArchSpec::tiny(4));
        assert_eq!(
            preset_arch("vit-small-video", 174).unwrap(),
            ArchSpec::vit_small_video(174)
        );
        assert_eq!(
            preset_arch("vit-base-video", 101).unwrap(),
            ArchSpec::vit_base_video(101)
        );
        assert!(preset_arch("vit-huge", 10).is_err());
    }
}
