use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{AggregationMode, AggregatorConfig, BranchWeightMode, DEFAULT_D_AGG};
use crate::backbone::{ClipVariant, SdVariant, DEFAULT_IMAGE_SIZE, DEFAULT_TIMESTEP};
use crate::error::{Error, Result};
use crate::heads::{DEFAULT_CONTRASTIVE_TAU, DEFAULT_FLOW_TEMPERATURE, DEFAULT_MARGIN, DEFAULT_STEEPNESS, DEFAULT_THRESHOLD};
use crate::injection::InjectionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Category-level zero-shot retrieval.
    #[default]
    ZsSbir,
    /// Instance-level retrieval with hard negatives.
    FgSbir,
    Recognition,
    Correspondence,
    Segmentation,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::ZsSbir,
        Task::FgSbir,
        Task::Recognition,
        Task::Correspondence,
        Task::Segmentation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ZsSbir => "zs_sbir",
            Task::FgSbir => "fg_sbir",
            Task::Recognition => "recognition",
            Task::Correspondence => "correspondence",
            Task::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Deterministic stand-in with the released tap widths.
    #[default]
    Mock,
    /// Deterministic stand-in with narrow widths, for quick runs.
    MockTiny,
    /// Released weights read from `weights_dir`.
    Pretrained,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mock" => Ok(BackboneKind::Mock),
            "mock-tiny" => Ok(BackboneKind::MockTiny),
            "pretrained" => Ok(BackboneKind::Pretrained),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Everything a training or evaluation run depends on. Stored as TOML;
/// missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub task: Task,
    pub backbone: BackboneKind,
    pub sd_variant: SdVariant,
    pub clip_variant: ClipVariant,
    pub weights_dir: Option<PathBuf>,
    pub image_size: usize,
    pub timestep: usize,
    /// Condition the UNet on "a photo of <class>" instead of the empty prompt.
    pub class_prompt: bool,

    pub margin: f64,
    pub contrastive_tau: f64,
    pub learnable_tau: bool,
    pub flow_temperature: f64,
    pub epe_squared: bool,
    pub seg_steepness: f64,
    pub seg_threshold: f64,
    pub d_agg: usize,
    pub alpha_init: f64,
    pub alpha_softmax: bool,

    pub no_aggregation_net: bool,
    pub frozen_equal_weights: bool,
    pub no_1d_convs: bool,
    pub inject_level4: bool,
    /// Disable injection altogether (plain diffusion features).
    pub no_injection: bool,

    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: Task::default(),
            backbone: BackboneKind::default(),
            sd_variant: SdVariant::default(),
            clip_variant: ClipVariant::default(),
            weights_dir: None,
            image_size: DEFAULT_IMAGE_SIZE,
            timestep: DEFAULT_TIMESTEP,
            class_prompt: false,
            margin: DEFAULT_MARGIN,
            contrastive_tau: DEFAULT_CONTRASTIVE_TAU,
            learnable_tau: false,
            flow_temperature: DEFAULT_FLOW_TEMPERATURE,
            epe_squared: true,
            seg_steepness: DEFAULT_STEEPNESS,
            seg_threshold: DEFAULT_THRESHOLD,
            d_agg: DEFAULT_D_AGG,
            alpha_init: 1.0,
            alpha_softmax: false,
            no_aggregation_net: false,
            frozen_equal_weights: false,
            no_1d_convs: false,
            inject_level4: true,
            no_injection: false,
            seed: 0,
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 1,
            max_steps: None,
        }
    }
}

impl TaskConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if self.timestep == 0 {
            return fail("timestep is 1-based".into());
        }
        if self.margin < 0.0 {
            return fail(format!("margin {} is negative", self.margin));
        }
        for (name, v) in [
            ("contrastive_tau", self.contrastive_tau),
            ("flow_temperature", self.flow_temperature),
            ("seg_steepness", self.seg_steepness),
        ] {
            if !(v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.d_agg == 0 || self.batch_size == 0 {
            return fail("d_agg and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) {
            return fail(format!("learning rate {} is negative", self.learning_rate));
        }
        if self.backbone == BackboneKind::Pretrained && self.weights_dir.is_none() {
            return fail("the pretrained backbone needs weights_dir".into());
        }
        if self.no_injection && self.no_1d_convs {
            return fail("no_injection and no_1d_convs are mutually exclusive".into());
        }
        Ok(())
    }

    pub fn injection_mode(&self) -> InjectionMode {
        if self.no_injection {
            InjectionMode::Disabled
        } else if self.no_1d_convs {
            InjectionMode::Interpolation
        } else {
            InjectionMode::Learned
        }
    }

    pub fn aggregator_config(&self) -> AggregatorConfig {
        AggregatorConfig {
            d_agg: self.d_agg,
            mode: if self.no_aggregation_net {
                AggregationMode::Fixed
            } else {
                AggregationMode::Learned
            },
            weights: if self.frozen_equal_weights {
                BranchWeightMode::FrozenEqual
            } else {
                BranchWeightMode::Learned
            },
            alpha_init: self.alpha_init,
            alpha_softmax: self.alpha_softmax,
        }
    }

    /// Digest of the fields that determine extracted features, before any
    /// learned parameters are taken into account.
    pub fn extraction_digest(&self) -> String {
        let fields = format!(
            "{:?}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.backbone,
            self.sd_variant,
            self.clip_variant,
            self.image_size,
            self.timestep,
            self.class_prompt,
            self.d_agg,
            self.alpha_softmax,
            self.no_aggregation_net,
            self.frozen_equal_weights,
            self.no_1d_convs,
            self.inject_level4,
            self.no_injection,
            self.seed,
            self.weights_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        hex::encode(Sha256::digest(fields.as_bytes()))
    }

    /// Whether a checkpoint trained under `other` can be evaluated under
    /// `self`: same task and the same parameter layout.
    pub fn check_compatible(&self, other: &TaskConfig) -> Result<()> {
        let mismatch = |what: &str| Err(Error::Config(format!("checkpoint {what} differs from the evaluation config")));
        if self.task != other.task {
            return Err(Error::Config(format!(
                "checkpoint was trained for {} but evaluation asks for {}",
                other.task, self.task
            )));
        }
        if self.backbone != other.backbone || self.sd_variant != other.sd_variant || self.clip_variant != other.clip_variant {
            return mismatch("backbone");
        }
        if self.d_agg != other.d_agg
            || self.no_aggregation_net != other.no_aggregation_net
            || self.frozen_equal_weights != other.frozen_equal_weights
            || self.no_1d_convs != other.no_1d_convs
            || self.no_injection != other.no_injection
            || self.inject_level4 != other.inject_level4
            || self.learnable_tau != other.learnable_tau
        {
            return mismatch("architecture");
        }
        Ok(())
    }
}
