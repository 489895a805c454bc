//! Frozen backbone abstraction.
//!
//! A [`Backbone`] bundles the two frozen networks the extractor reads from:
//! a latent-diffusion model (latent encoder + denoising UNet whose four
//! upsampling stages are tapped) and a vision-language image encoder
//! (penultimate-layer patch tokens). Two implementations exist:
//! [`MockBackbone`], a seeded random-projection stand-in with the same
//! shape contract, and [`PretrainedBackbone`], which binds released
//! weights through candle.

mod mock;
mod pretrained;
mod schedule;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use mock::{MockBackbone, MockConfig};
pub use pretrained::{
    null_prompt_ids, random_weights, tiny_config, vision_config, PretrainedBackbone, PretrainedConfig,
    TextEncoderConfig,
};
pub use schedule::{
    add_noise, build_noise_schedule, forward_diffuse, sample_noise, NoiseSchedule, ScheduleParams,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Number of tapped UNet upsampling stages.
pub const TAP_LEVELS: usize = 4;

/// Default extraction timestep.
pub const DEFAULT_TIMESTEP: usize = 195;

/// Default pipeline input resolution: the only size for which the latent
/// grid (input / 8) coincides with the 60×60 aggregation grid.
pub const DEFAULT_IMAGE_SIZE: usize = 480;

/// Channel widths of the four tapped upsampling stages.
pub const UNET_TAP_CHANNELS: [usize; TAP_LEVELS] = [1280, 1280, 640, 320];

/// Spatial downsampling of each tap relative to the input image.
pub const TAP_STRIDES: [usize; TAP_LEVELS] = [32, 16, 8, 8];

/// RGB images in `[0, 1]`, stored channel-first as `[B, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let (b, c, h, w) = data.dims4().map_err(|_| {
            Error::InvalidArgument(format!("image batch must be [B, 3, H, W], got {:?}", data.dims()))
        })?;
        if b == 0 {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        if c != 3 {
            return Err(Error::shape("image channels", &[b, 3, h, w], data.dims()));
        }
        if h != w {
            return Err(Error::InvalidArgument(format!("images must be square, got {h}x{w}")));
        }
        if h % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {h} is not divisible by 32"
            )));
        }
        let flat = data.flatten_all()?;
        let lo = flat.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = flat.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "image values must lie in [0, 1], found [{lo}, {hi}]"
            )));
        }
        Ok(Self { data })
    }

    /// Builds a batch from interleaved `[B, H, W, 3]` values.
    pub fn from_nhwc(values: Vec<f32>, batch: usize, size: usize, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        let t = Tensor::from_vec(values, (batch, size, size, 3), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Self::new(t)
    }

    /// Concatenates single images (each `[3, H, W]` or `[1, 3, H, W]`).
    pub fn stack(images: &[Tensor]) -> Result<Self> {
        let items: Vec<Tensor> = images
            .iter()
            .map(|t| if t.rank() == 3 { t.unsqueeze(0) } else { Ok(t.clone()) })
            .collect::<std::result::Result<_, _>>()?;
        Self::new(Tensor::cat(&items, 0)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn image_size(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }
}

/// Latent codes `[B, c_lat, H/8, W/8]`.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    data: Tensor,
}

impl LatentBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.dims()[2], self.data.dims()[3])
    }
}

/// The four tapped upsampling-stage activations of one denoising pass.
#[derive(Clone, Debug)]
pub struct UNetFeatureSet {
    levels: [FeatureGrid; TAP_LEVELS],
    timestep: usize,
}

impl UNetFeatureSet {
    pub fn new(levels: [FeatureGrid; TAP_LEVELS], timestep: usize) -> Self {
        Self { levels, timestep }
    }

    /// Level `n` in `1..=4`.
    pub fn level(&self, n: usize) -> Result<&FeatureGrid> {
        if !(1..=TAP_LEVELS).contains(&n) {
            return Err(Error::InvalidArgument(format!("UNet level {n} outside 1..=4")));
        }
        Ok(&self.levels[n - 1])
    }

    pub fn levels(&self) -> &[FeatureGrid; TAP_LEVELS] {
        &self.levels
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn all_finite(&self) -> Result<bool> {
        for l in &self.levels {
            if !l.all_finite()? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Penultimate-layer patch tokens of the image encoder, class token removed.
#[derive(Clone, Debug)]
pub struct PatchFeatureGrid {
    grid: FeatureGrid,
}

impl PatchFeatureGrid {
    pub fn new(grid: FeatureGrid) -> Result<Self> {
        if grid.height() != grid.width() {
            return Err(Error::InvalidArgument("patch grid must be square".into()));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.grid
    }

    pub fn side(&self) -> usize {
        self.grid.height()
    }

    pub fn dim(&self) -> usize {
        self.grid.channels()
    }
}

/// Conditioning text for the denoising pass. The empty string is the null
/// prompt used for all feature extraction by default.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    text: String,
}

impl PromptTokens {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    /// The pilot-study style class prompt.
    pub fn class_prompt(class: &str) -> Self {
        Self::new(format!("a photo of {class}"))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn is_null(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// Called once per tapped level with `(level, raw_feature)`; returns the
/// feature that replaces the tap for the rest of the forward pass.
pub type InjectionHook<'a> = dyn FnMut(usize, &Tensor) -> Result<Tensor> + 'a;

pub(crate) fn apply_hook(hook: &mut Option<&mut InjectionHook<'_>>, level: usize, raw: Tensor) -> Result<Tensor> {
    match hook {
        None => Ok(raw),
        Some(h) => {
            let out = h(level, &raw)?;
            if out.dims() != raw.dims() {
                return Err(Error::shape(
                    format!("injection hook output at level {level}"),
                    raw.dims(),
                    out.dims(),
                ));
            }
            Ok(out)
        }
    }
}

/// Frozen feature source. A handle must not be shared between threads
/// concurrently; batch instead.
pub trait Backbone: Send {
    fn name(&self) -> String;

    fn schedule(&self) -> &NoiseSchedule;

    fn latent_channels(&self) -> usize;

    fn tap_channels(&self) -> [usize; TAP_LEVELS];

    fn patch_dim(&self) -> usize;

    /// Side of the patch grid produced by [`Backbone::extract_patch_features`].
    fn patch_grid(&self) -> usize;

    fn encode_latent(&self, images: &ImageBatch) -> Result<LatentBatch>;

    /// One denoising forward pass at timestep `t`, returning the four
    /// upsampling-stage outputs after `hook` has been applied to each.
    fn extract_unet_features(
        &self,
        z_t: &LatentBatch,
        t: usize,
        prompt: &PromptTokens,
        hook: Option<&mut InjectionHook<'_>>,
    ) -> Result<UNetFeatureSet>;

    fn extract_patch_features(&self, images: &ImageBatch) -> Result<PatchFeatureGrid>;

    /// Digest of every frozen parameter.
    fn parameter_digest(&self) -> Result<String>;

    /// Total number of encode/extract calls served so far.
    fn call_count(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum SdVariant {
    #[serde(rename = "v1.4")]
    V1_4,
    #[serde(rename = "v1.5")]
    V1_5,
    #[default]
    #[serde(rename = "v2.1")]
    V2_1,
}

impl SdVariant {
    pub const ALL: [SdVariant; 3] = [SdVariant::V1_4, SdVariant::V1_5, SdVariant::V2_1];

    pub fn tap_channels(self) -> [usize; TAP_LEVELS] {
        UNET_TAP_CHANNELS
    }

    pub fn latent_channels(self) -> usize {
        4
    }
}

impl fmt::Display for SdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SdVariant::V1_4 => "v1.4",
            SdVariant::V1_5 => "v1.5",
            SdVariant::V2_1 => "v2.1",
        })
    }
}

impl FromStr for SdVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1.4" | "1.4" => Ok(SdVariant::V1_4),
            "v1.5" | "1.5" => Ok(SdVariant::V1_5),
            "v2.1" | "2.1" => Ok(SdVariant::V2_1),
            other => Err(Error::Config(format!("unknown diffusion variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ClipVariant {
    #[serde(rename = "ViT-B/16")]
    VitB16,
    #[serde(rename = "ViT-B/32")]
    VitB32,
    #[default]
    #[serde(rename = "ViT-L/14")]
    VitL14,
}

impl ClipVariant {
    pub const ALL: [ClipVariant; 3] = [ClipVariant::VitB16, ClipVariant::VitB32, ClipVariant::VitL14];

    pub fn patch_size(self) -> usize {
        match self {
            ClipVariant::VitB16 => 16,
            ClipVariant::VitB32 => 32,
            ClipVariant::VitL14 => 14,
        }
    }

    pub fn embed_dim(self) -> usize {
        match self {
            ClipVariant::VitB16 | ClipVariant::VitB32 => 768,
            ClipVariant::VitL14 => 1024,
        }
    }

    /// Native input resolution of the released encoders.
    pub fn input_size(self) -> usize {
        224
    }

    pub fn grid_side(self) -> usize {
        self.input_size() / self.patch_size()
    }
}

impl fmt::Display for ClipVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipVariant::VitB16 => "ViT-B/16",
            ClipVariant::VitB32 => "ViT-B/32",
            ClipVariant::VitL14 => "ViT-L/14",
        })
    }
}

impl FromStr for ClipVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['_', ' '], "-").as_str() {
            "VIT-B/16" | "VIT-B-16" => Ok(ClipVariant::VitB16),
            "VIT-B/32" | "VIT-B-32" => Ok(ClipVariant::VitB32),
            "VIT-L/14" | "VIT-L-14" => Ok(ClipVariant::VitL14),
            other => Err(Error::Config(format!("unknown image-encoder variant {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn image_batch_validation() {
        let dev = Device::Cpu;
        assert!(ImageBatch::new(Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap()).is_ok());
        assert!(ImageBatch::new(Tensor::zeros((1, 3, 100, 100), DType::F32, &dev).unwrap()).is_err());
        assert!(ImageBatch::new(Tensor::zeros((1, 1, 64, 64), DType::F32, &dev).unwrap()).is_err());
        assert!(ImageBatch::new(Tensor::ones((1, 3, 64, 64), DType::F32, &dev).unwrap().affine(2.0, 0.0).unwrap()).is_err());
    }

    #[test]
    fn variant_parsing_roundtrips() {
        for v in SdVariant::ALL {
            assert_eq!(v.to_string().parse::<SdVariant>().unwrap(), v);
        }
        for v in ClipVariant::ALL {
            assert_eq!(v.to_string().parse::<ClipVariant>().unwrap(), v);
        }
        assert_eq!(ClipVariant::VitL14.grid_side(), 16);
        assert!("v3".parse::<SdVariant>().is_err());
    }
}
