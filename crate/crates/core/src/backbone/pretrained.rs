//! Adapter over released latent-diffusion and vision-language weights.
//!
//! The UNet is reassembled from candle-transformers' public blocks so the
//! four upsampling-stage outputs can be tapped (and replaced by the
//! injection hook) inside the forward pass. Only the encoder half of the
//! autoencoder is built.
//!
//! Expected weight directory:
//!
//! ```text
//! <dir>/unet.safetensors          diffusers UNet2DConditionModel keys
//! <dir>/vae.safetensors           diffusers AutoencoderKL keys (decoder optional)
//! <dir>/text_encoder.safetensors  CLIP text model keys
//! <dir>/image_encoder.safetensors CLIP vision model keys
//! <dir>/tokenizer.json            only needed for non-null prompts
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::text_model::{
    Activation, ClipTextConfig, ClipTextTransformer as GenericTextTransformer,
};
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use candle_transformers::models::stable_diffusion::clip::{
    ClipTextTransformer as SdTextTransformer, Config as SdTextConfig,
};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::unet_2d::{BlockConfig, UNet2DConditionModelConfig};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    CrossAttnDownBlock2D, CrossAttnDownBlock2DConfig, CrossAttnUpBlock2D, CrossAttnUpBlock2DConfig,
    DownBlock2D, DownBlock2DConfig, DownEncoderBlock2D, DownEncoderBlock2DConfig, UNetMidBlock2D,
    UNetMidBlock2DConfig, UNetMidBlock2DCrossAttn, UNetMidBlock2DCrossAttnConfig, UpBlock2D,
    UpBlock2DConfig,
};

use super::{
    apply_hook, build_noise_schedule, Backbone, ClipVariant, ImageBatch, InjectionHook, LatentBatch,
    NoiseSchedule, PatchFeatureGrid, PromptTokens, ScheduleParams, SdVariant, UNetFeatureSet,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS, TAP_LEVELS,
};
use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, FeatureGrid};
use crate::params::tensor_digest;

pub const UNET_FILE: &str = "unet.safetensors";
pub const VAE_FILE: &str = "vae.safetensors";
pub const TEXT_FILE: &str = "text_encoder.safetensors";
pub const IMAGE_FILE: &str = "image_encoder.safetensors";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];
const BOS_TOKEN: u32 = 49406;
const EOS_TOKEN: u32 = 49407;
const MAX_TOKENS: usize = 77;

/// Text-encoder architecture. The released variants use the diffusion
/// crate's CLIP text model (which supports both activation kinds); custom
/// configurations use the generic CLIP text model.
#[derive(Clone, Debug)]
pub enum TextEncoderConfig {
    V1,
    V2_1,
    Custom(ClipTextConfig),
}

#[derive(Clone, Debug)]
pub struct PretrainedConfig {
    pub unet: UNet2DConditionModelConfig,
    pub vae_blocks: Vec<usize>,
    pub vae_layers_per_block: usize,
    pub vae_norm_groups: usize,
    pub latent_channels: usize,
    pub latent_scale: f64,
    pub text: TextEncoderConfig,
    pub max_tokens: usize,
    pub pad_token: u32,
    pub vision: ClipVisionConfig,
    pub schedule: ScheduleParams,
    pub steps: usize,
}

fn block(out_channels: usize, use_cross_attn: Option<usize>, attention_head_dim: usize) -> BlockConfig {
    BlockConfig {
        out_channels,
        use_cross_attn,
        attention_head_dim,
    }
}

fn unet_config(heads: [usize; 4], cross_attention_dim: usize, use_linear_projection: bool) -> UNet2DConditionModelConfig {
    UNet2DConditionModelConfig {
        blocks: vec![
            block(320, Some(1), heads[0]),
            block(640, Some(1), heads[1]),
            block(1280, Some(1), heads[2]),
            block(1280, None, heads[3]),
        ],
        center_input_sample: false,
        cross_attention_dim,
        downsample_padding: 1,
        flip_sin_to_cos: true,
        freq_shift: 0.,
        layers_per_block: 2,
        mid_block_scale_factor: 1.,
        norm_eps: 1e-5,
        norm_num_groups: 32,
        sliced_attention_size: None,
        use_linear_projection,
    }
}

pub fn vision_config(variant: ClipVariant) -> ClipVisionConfig {
    match variant {
        ClipVariant::VitB32 => ClipVisionConfig::vit_base_patch32(),
        ClipVariant::VitB16 => ClipVisionConfig {
            patch_size: 16,
            ..ClipVisionConfig::vit_base_patch32()
        },
        ClipVariant::VitL14 => ClipVisionConfig {
            image_size: 224,
            ..ClipVisionConfig::clip_vit_large_patch14_336()
        },
    }
}

impl PretrainedConfig {
    pub fn for_variants(sd: SdVariant, clip: ClipVariant) -> Self {
        let (unet, text, pad_token) = match sd {
            SdVariant::V1_4 | SdVariant::V1_5 => (unet_config([8; 4], 768, false), TextEncoderConfig::V1, EOS_TOKEN),
            // The 2.x tokenizer pads with "!", id 0.
            SdVariant::V2_1 => (unet_config([5, 10, 20, 20], 1024, true), TextEncoderConfig::V2_1, 0),
        };
        Self {
            unet,
            vae_blocks: vec![128, 256, 512, 512],
            vae_layers_per_block: 2,
            vae_norm_groups: 32,
            latent_channels: 4,
            latent_scale: 0.18215,
            text,
            max_tokens: MAX_TOKENS,
            pad_token,
            vision: vision_config(clip),
            schedule: ScheduleParams::ScaledLinearBeta {
                beta_start: DEFAULT_BETA_START,
                beta_end: DEFAULT_BETA_END,
            },
            steps: DEFAULT_STEPS,
        }
    }

    fn tap_channels(&self) -> Result<[usize; TAP_LEVELS]> {
        let b = &self.unet.blocks;
        if b.len() != TAP_LEVELS {
            return Err(Error::Weights(format!(
                "tapping needs a 4-stage UNet, config has {}",
                b.len()
            )));
        }
        Ok([b[3].out_channels, b[2].out_channels, b[1].out_channels, b[0].out_channels])
    }
}

enum Down {
    Basic(DownBlock2D),
    CrossAttn(CrossAttnDownBlock2D),
}

enum Up {
    Basic(UpBlock2D),
    CrossAttn(CrossAttnUpBlock2D),
}

impl Up {
    fn n_resnets(&self) -> usize {
        match self {
            Up::Basic(b) => b.resnets.len(),
            Up::CrossAttn(b) => b.upblock.resnets.len(),
        }
    }
}

/// The UNet minus its output head, with the up-block outputs exposed.
struct TappedUNet {
    conv_in: candle_nn::Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down: Vec<Down>,
    mid: UNetMidBlock2DCrossAttn,
    up: Vec<Up>,
}

impl TappedUNet {
    fn new(vs: VarBuilder, in_channels: usize, config: &UNet2DConditionModelConfig) -> Result<Self> {
        let n = config.blocks.len();
        let b0 = config.blocks[0].out_channels;
        let bl = config.blocks[n - 1];
        let time_embed_dim = b0 * 4;
        let conv_cfg = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_in = candle_nn::conv2d(in_channels, b0, 3, conv_cfg, vs.pp("conv_in"))?;
        let time_proj = Timesteps::new(b0, config.flip_sin_to_cos, config.freq_shift);
        let time_embedding = TimestepEmbedding::new(vs.pp("time_embedding"), b0, time_embed_dim)?;

        let vs_down = vs.pp("down_blocks");
        let mut down = Vec::with_capacity(n);
        for i in 0..n {
            let bc = config.blocks[i];
            let in_ch = if i > 0 { config.blocks[i - 1].out_channels } else { b0 };
            let db_cfg = DownBlock2DConfig {
                num_layers: config.layers_per_block,
                resnet_eps: config.norm_eps,
                resnet_groups: config.norm_num_groups,
                add_downsample: i < n - 1,
                downsample_padding: config.downsample_padding,
                ..Default::default()
            };
            down.push(match bc.use_cross_attn {
                Some(layers) => Down::CrossAttn(CrossAttnDownBlock2D::new(
                    vs_down.pp(i.to_string()),
                    in_ch,
                    bc.out_channels,
                    Some(time_embed_dim),
                    false,
                    CrossAttnDownBlock2DConfig {
                        downblock: db_cfg,
                        attn_num_head_channels: bc.attention_head_dim,
                        cross_attention_dim: config.cross_attention_dim,
                        sliced_attention_size: config.sliced_attention_size,
                        use_linear_projection: config.use_linear_projection,
                        transformer_layers_per_block: layers,
                    },
                )?),
                None => Down::Basic(DownBlock2D::new(
                    vs_down.pp(i.to_string()),
                    in_ch,
                    bc.out_channels,
                    Some(time_embed_dim),
                    db_cfg,
                )?),
            });
        }

        let mid = UNetMidBlock2DCrossAttn::new(
            vs.pp("mid_block"),
            bl.out_channels,
            Some(time_embed_dim),
            false,
            UNetMidBlock2DCrossAttnConfig {
                resnet_eps: config.norm_eps,
                output_scale_factor: config.mid_block_scale_factor,
                cross_attn_dim: config.cross_attention_dim,
                attn_num_head_channels: bl.attention_head_dim,
                resnet_groups: Some(config.norm_num_groups),
                use_linear_projection: config.use_linear_projection,
                transformer_layers_per_block: bl.use_cross_attn.unwrap_or(1),
                ..Default::default()
            },
        )?;

        let vs_up = vs.pp("up_blocks");
        let mut up = Vec::with_capacity(n);
        for i in 0..n {
            let bc = config.blocks[n - 1 - i];
            let prev_out = if i > 0 { config.blocks[n - i].out_channels } else { bl.out_channels };
            let in_ch = config.blocks[if i == n - 1 { 0 } else { n - i - 2 }].out_channels;
            let ub_cfg = UpBlock2DConfig {
                num_layers: config.layers_per_block + 1,
                resnet_eps: config.norm_eps,
                resnet_groups: config.norm_num_groups,
                add_upsample: i < n - 1,
                ..Default::default()
            };
            up.push(match bc.use_cross_attn {
                Some(layers) => Up::CrossAttn(CrossAttnUpBlock2D::new(
                    vs_up.pp(i.to_string()),
                    in_ch,
                    prev_out,
                    bc.out_channels,
                    Some(time_embed_dim),
                    false,
                    CrossAttnUpBlock2DConfig {
                        upblock: ub_cfg,
                        attn_num_head_channels: bc.attention_head_dim,
                        cross_attention_dim: config.cross_attention_dim,
                        sliced_attention_size: config.sliced_attention_size,
                        use_linear_projection: config.use_linear_projection,
                        transformer_layers_per_block: layers,
                    },
                )?),
                None => Up::Basic(UpBlock2D::new(
                    vs_up.pp(i.to_string()),
                    in_ch,
                    prev_out,
                    bc.out_channels,
                    Some(time_embed_dim),
                    ub_cfg,
                )?),
            });
        }
        Ok(Self {
            conv_in,
            time_proj,
            time_embedding,
            down,
            mid,
            up,
        })
    }

    /// Runs down, mid and up stages; returns each up-block output after the
    /// hook. Mirrors the reference forward, including the explicit
    /// upsample sizes needed when the latent side is not a multiple of 8.
    fn forward_taps(
        &self,
        xs: &Tensor,
        timestep: f64,
        context: &Tensor,
        hook: &mut Option<&mut InjectionHook<'_>>,
    ) -> Result<Vec<Tensor>> {
        let (b, _, h, w) = xs.dims4()?;
        let n = self.up.len();
        let factor = 1usize << (n - 1);
        let forward_upsample_size = h % factor != 0 || w % factor != 0;
        let emb = (Tensor::ones(b, xs.dtype(), xs.device())? * timestep)?;
        let emb = self.time_embedding.forward(&self.time_proj.forward(&emb)?)?;
        let xs = self.conv_in.forward(xs)?;
        let mut residuals = vec![xs.clone()];
        let mut xs = xs;
        for d in &self.down {
            let (next, res) = match d {
                Down::Basic(bk) => bk.forward(&xs, Some(&emb))?,
                Down::CrossAttn(bk) => bk.forward(&xs, Some(&emb), Some(context))?,
            };
            residuals.extend(res);
            xs = next;
        }
        let mut xs = self.mid.forward(&xs, Some(&emb), Some(context))?;
        let mut taps = Vec::with_capacity(n);
        let mut upsample_size = None;
        for (i, u) in self.up.iter().enumerate() {
            let res = residuals.split_off(residuals.len() - u.n_resnets());
            if i < n - 1 && forward_upsample_size {
                let (_, _, rh, rw) = residuals
                    .last()
                    .ok_or_else(|| Error::Weights("residual stack exhausted".into()))?
                    .dims4()?;
                upsample_size = Some((rh, rw));
            }
            let raw = match u {
                Up::Basic(bk) => bk.forward(&xs, &res, Some(&emb), upsample_size)?,
                Up::CrossAttn(bk) => bk.forward(&xs, &res, Some(&emb), upsample_size, Some(context))?,
            };
            xs = apply_hook(hook, i + 1, raw)?;
            taps.push(xs.clone());
        }
        Ok(taps)
    }
}

/// Encoder half of the KL autoencoder.
struct LatentEncoder {
    conv_in: candle_nn::Conv2d,
    down: Vec<DownEncoderBlock2D>,
    mid: UNetMidBlock2D,
    norm_out: candle_nn::GroupNorm,
    conv_out: candle_nn::Conv2d,
    quant_conv: candle_nn::Conv2d,
}

impl LatentEncoder {
    fn new(vs: VarBuilder, cfg: &PretrainedConfig) -> Result<Self> {
        let enc = vs.pp("encoder");
        let blocks = &cfg.vae_blocks;
        let pad1 = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_in = candle_nn::conv2d(3, blocks[0], 3, pad1, enc.pp("conv_in"))?;
        let mut down = Vec::new();
        for (i, &out) in blocks.iter().enumerate() {
            let in_ch = if i > 0 { blocks[i - 1] } else { blocks[0] };
            down.push(DownEncoderBlock2D::new(
                enc.pp("down_blocks").pp(i.to_string()),
                in_ch,
                out,
                DownEncoderBlock2DConfig {
                    num_layers: cfg.vae_layers_per_block,
                    resnet_eps: 1e-6,
                    resnet_groups: cfg.vae_norm_groups,
                    add_downsample: i + 1 != blocks.len(),
                    downsample_padding: 0,
                    ..Default::default()
                },
            )?);
        }
        let last = *blocks.last().expect("non-empty autoencoder blocks");
        let mid = UNetMidBlock2D::new(
            enc.pp("mid_block"),
            last,
            None,
            UNetMidBlock2DConfig {
                resnet_eps: 1e-6,
                output_scale_factor: 1.,
                attn_num_head_channels: None,
                resnet_groups: Some(cfg.vae_norm_groups),
                ..Default::default()
            },
        )?;
        let norm_out = candle_nn::group_norm(cfg.vae_norm_groups, last, 1e-6, enc.pp("conv_norm_out"))?;
        let c2 = 2 * cfg.latent_channels;
        let conv_out = candle_nn::conv2d(last, c2, 3, pad1, enc.pp("conv_out"))?;
        let quant_conv = candle_nn::conv2d(c2, c2, 1, Default::default(), vs.pp("quant_conv"))?;
        Ok(Self {
            conv_in,
            down,
            mid,
            norm_out,
            conv_out,
            quant_conv,
        })
    }

    /// Mean of the posterior (the deterministic encoding).
    fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let mut xs = x.apply(&self.conv_in)?;
        for d in &self.down {
            xs = xs.apply(d)?;
        }
        let xs = self.mid.forward(&xs, None)?.apply(&self.norm_out)?;
        let xs = candle_nn::ops::silu(&xs)?.apply(&self.conv_out)?.apply(&self.quant_conv)?;
        let c = xs.dims()[1] / 2;
        Ok(xs.narrow(1, 0, c)?)
    }
}

enum TextEncoder {
    Sd(SdTextTransformer),
    Generic(GenericTextTransformer),
}

impl TextEncoder {
    fn new(vs: VarBuilder, cfg: &TextEncoderConfig) -> Result<Self> {
        // The diffusion text model prefixes "text_model" itself.
        let root = if vs.contains_tensor("text_model.embeddings.token_embedding.weight") {
            vs.clone()
        } else {
            return Err(Error::Weights("text encoder weights lack the text_model prefix".into()));
        };
        Ok(match cfg {
            TextEncoderConfig::V1 => TextEncoder::Sd(SdTextTransformer::new(root, &SdTextConfig::v1_5())?),
            TextEncoderConfig::V2_1 => TextEncoder::Sd(SdTextTransformer::new(root, &SdTextConfig::v2_1())?),
            TextEncoderConfig::Custom(c) => TextEncoder::Generic(GenericTextTransformer::new(root.pp("text_model"), c)?),
        })
    }

    fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(match self {
            TextEncoder::Sd(m) => m.forward_with_mask(ids, usize::MAX)?,
            TextEncoder::Generic(m) => m.forward_with_mask(ids, usize::MAX)?,
        })
    }
}

pub struct PretrainedBackbone {
    config: PretrainedConfig,
    label: String,
    schedule: NoiseSchedule,
    unet: TappedUNet,
    vae: LatentEncoder,
    text: TextEncoder,
    vision: ClipVisionTransformer,
    tokenizer: Option<tokenizers::Tokenizer>,
    null_context: Tensor,
    frozen: Vec<(String, Tensor)>,
    dtype: DType,
    device: Device,
    calls: AtomicUsize,
}

fn load_file(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Weights(format!("missing weight file {}", path.display())));
    }
    Ok(candle_core::safetensors::load(path, device)?)
}

/// Strips a leading `vision_model.` so both bare and full-CLIP checkpoints load.
fn strip_vision_prefix(map: HashMap<String, Tensor>) -> HashMap<String, Tensor> {
    if map.keys().any(|k| k.starts_with("vision_model.")) {
        map.into_iter()
            .filter_map(|(k, v)| k.strip_prefix("vision_model.").map(|s| (s.to_string(), v)))
            .collect()
    } else {
        map
    }
}

impl PretrainedBackbone {
    /// Loads every component from a weight directory (layout in the module docs).
    pub fn from_dir(dir: impl AsRef<Path>, config: PretrainedConfig, dtype: DType, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let unet = load_file(&dir.join(UNET_FILE), device)?;
        let vae = load_file(&dir.join(VAE_FILE), device)?;
        let text = load_file(&dir.join(TEXT_FILE), device)?;
        let vision = strip_vision_prefix(load_file(&dir.join(IMAGE_FILE), device)?);
        let tok_path: PathBuf = dir.join(TOKENIZER_FILE);
        let tokenizer = if tok_path.exists() {
            Some(
                tokenizers::Tokenizer::from_file(&tok_path)
                    .map_err(|e| Error::Weights(format!("{}: {e}", tok_path.display())))?,
            )
        } else {
            None
        };
        let label = format!("pretrained:{}", dir.display());
        Self::from_tensors(label, [unet, vae, text, vision], tokenizer, config, dtype, device)
    }

    /// Builds from in-memory tensor maps in the order unet, vae, text, vision.
    pub fn from_tensors(
        label: String,
        maps: [HashMap<String, Tensor>; 4],
        tokenizer: Option<tokenizers::Tokenizer>,
        config: PretrainedConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut frozen = Vec::new();
        for (prefix, map) in ["unet", "vae", "text", "vision"].iter().zip(maps.iter()) {
            for (k, v) in map {
                frozen.push((format!("{prefix}.{k}"), v.clone()));
            }
        }
        frozen.sort_by(|a, b| a.0.cmp(&b.0));
        let [unet_map, vae_map, text_map, vision_map] = maps;
        config.tap_channels()?;
        let unet = TappedUNet::new(
            VarBuilder::from_tensors(unet_map, dtype, device),
            config.latent_channels,
            &config.unet,
        )
        .map_err(|e| Error::Weights(format!("UNet: {e}")))?;
        let vae = LatentEncoder::new(VarBuilder::from_tensors(vae_map, dtype, device), &config)
            .map_err(|e| Error::Weights(format!("autoencoder: {e}")))?;
        let text = TextEncoder::new(VarBuilder::from_tensors(text_map, dtype, device), &config.text)
            .map_err(|e| Error::Weights(format!("text encoder: {e}")))?;
        let vision = ClipVisionTransformer::new(VarBuilder::from_tensors(vision_map, dtype, device), &config.vision)
            .map_err(|e| Error::Weights(format!("image encoder: {e}")))?;
        let schedule = build_noise_schedule(config.steps, &config.schedule)?;
        let null_ids = null_prompt_ids(config.max_tokens, config.pad_token);
        let ids = Tensor::new(null_ids.as_slice(), device)?.unsqueeze(0)?;
        let null_context = text.forward(&ids)?;
        Ok(Self {
            config,
            label,
            schedule,
            unet,
            vae,
            text,
            vision,
            tokenizer,
            null_context,
            frozen,
            dtype,
            device: device.clone(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &PretrainedConfig {
        &self.config
    }

    fn context(&self, prompt: &PromptTokens, batch: usize) -> Result<Tensor> {
        let ctx = if prompt.is_null() {
            self.null_context.clone()
        } else {
            let tok = self.tokenizer.as_ref().ok_or_else(|| {
                Error::Weights(format!("prompt {:?} needs {TOKENIZER_FILE} in the weight directory", prompt.text()))
            })?;
            let enc = tok
                .encode(prompt.text(), true)
                .map_err(|e| Error::Weights(format!("tokenizer: {e}")))?;
            let mut ids: Vec<u32> = enc.get_ids().to_vec();
            ids.truncate(self.config.max_tokens);
            ids.resize(self.config.max_tokens, self.config.pad_token);
            let ids = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
            self.text.forward(&ids)?
        };
        Ok(ctx.to_dtype(self.dtype)?.repeat((batch, 1, 1))?)
    }
}

/// `[BOS, EOS, pad, …]`, the tokenization of the empty string.
pub fn null_prompt_ids(len: usize, pad: u32) -> Vec<u32> {
    let mut ids = vec![pad; len.max(2)];
    ids[0] = BOS_TOKEN;
    ids[1] = EOS_TOKEN;
    ids
}

impl Backbone for PretrainedBackbone {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn tap_channels(&self) -> [usize; TAP_LEVELS] {
        self.config.tap_channels().expect("validated at construction")
    }

    fn patch_dim(&self) -> usize {
        self.config.vision.embed_dim
    }

    fn patch_grid(&self) -> usize {
        self.config.vision.image_size / self.config.vision.patch_size
    }

    fn encode_latent(&self, images: &ImageBatch) -> Result<LatentBatch> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let x = images.tensor().to_dtype(self.dtype)?.affine(2.0, -1.0)?;
        let z = self.vae.encode_mean(&x)?.affine(self.config.latent_scale, 0.0)?;
        LatentBatch::new(z)
    }

    fn extract_unet_features(
        &self,
        z_t: &LatentBatch,
        t: usize,
        prompt: &PromptTokens,
        mut hook: Option<&mut InjectionHook<'_>>,
    ) -> Result<UNetFeatureSet> {
        self.schedule.check_timestep(t)?;
        if z_t.channels() != self.config.latent_channels {
            return Err(Error::shape("latent channels", &[self.config.latent_channels], &[z_t.channels()]));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let context = self.context(prompt, z_t.batch_size())?;
        // Schedule index t (1-based) is the model's 0-based timestep t-1.
        let taps = self.unet.forward_taps(
            &z_t.tensor().to_dtype(self.dtype)?,
            (t - 1) as f64,
            &context,
            &mut hook,
        )?;
        let grids: Vec<FeatureGrid> = taps.into_iter().map(FeatureGrid::new).collect::<Result<_>>()?;
        let levels: [FeatureGrid; TAP_LEVELS] = grids
            .try_into()
            .map_err(|_| Error::Weights("UNet produced the wrong number of taps".into()))?;
        Ok(UNetFeatureSet::new(levels, t))
    }

    fn extract_patch_features(&self, images: &ImageBatch) -> Result<PatchFeatureGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let size = self.config.vision.image_size;
        let x = resize_bilinear(&images.tensor().to_dtype(self.dtype)?, size, size)?;
        let mean = Tensor::new(&CLIP_MEAN, &self.device)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&CLIP_STD, &self.device)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let hidden = self.vision.output_hidden_states(&x)?;
        // Per-layer states followed by the pooled output.
        let layers = hidden.len() - 1;
        if layers < 2 {
            return Err(Error::Weights("image encoder needs at least two layers".into()));
        }
        let penultimate = &hidden[layers - 2];
        let (b, tokens, d) = penultimate.dims3()?;
        let g = self.patch_grid();
        if tokens != g * g + 1 {
            return Err(Error::shape("image encoder tokens", &[b, g * g + 1, d], &[b, tokens, d]));
        }
        let patches = penultimate
            .narrow(1, 1, g * g)?
            .reshape((b, g, g, d))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        PatchFeatureGrid::new(FeatureGrid::new(patches)?)
    }

    fn parameter_digest(&self) -> Result<String> {
        tensor_digest(self.frozen.iter().map(|(k, t)| (k.as_str(), t)))
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// A miniature random-weight configuration with the released layout, used
/// to exercise the adapter without downloading weights.
pub fn tiny_config() -> PretrainedConfig {
    let mut unet = unet_config([1, 1, 1, 1], 32, false);
    for (b, c) in unet.blocks.iter_mut().zip([32, 32, 64, 64]) {
        b.out_channels = c;
    }
    unet.layers_per_block = 1;
    PretrainedConfig {
        unet,
        vae_blocks: vec![32, 32, 32, 32],
        vae_layers_per_block: 1,
        vae_norm_groups: 32,
        latent_channels: 4,
        latent_scale: 0.18215,
        text: TextEncoderConfig::Custom(ClipTextConfig {
            vocab_size: 49408,
            embed_dim: 32,
            activation: Activation::QuickGelu,
            intermediate_size: 64,
            max_position_embeddings: MAX_TOKENS,
            pad_with: None,
            num_hidden_layers: 2,
            num_attention_heads: 2,
            projection_dim: 32,
        }),
        max_tokens: MAX_TOKENS,
        pad_token: EOS_TOKEN,
        vision: ClipVisionConfig {
            embed_dim: 32,
            activation: Activation::QuickGelu,
            intermediate_size: 64,
            num_hidden_layers: 3,
            num_attention_heads: 2,
            projection_dim: 32,
            num_channels: 3,
            image_size: 224,
            patch_size: 14,
        },
        schedule: ScheduleParams::ScaledLinearBeta {
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        },
        steps: DEFAULT_STEPS,
    }
}

/// Random weights for `config`, one tensor map per component, produced by
/// constructing each component against a fresh variable map.
pub fn random_weights(config: &PretrainedConfig, device: &Device) -> Result<[HashMap<String, Tensor>; 4]> {
    use candle_nn::VarMap;
    let dump = |vm: &VarMap| -> HashMap<String, Tensor> {
        vm.data()
            .lock()
            .expect("var map lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    };
    let dt = DType::F32;
    let unet = VarMap::new();
    TappedUNet::new(VarBuilder::from_varmap(&unet, dt, device), config.latent_channels, &config.unet)?;
    let vae = VarMap::new();
    LatentEncoder::new(VarBuilder::from_varmap(&vae, dt, device), config)?;
    let text = VarMap::new();
    match &config.text {
        TextEncoderConfig::Custom(c) => {
            GenericTextTransformer::new(VarBuilder::from_varmap(&text, dt, device).pp("text_model"), c)?;
        }
        TextEncoderConfig::V1 => {
            SdTextTransformer::new(VarBuilder::from_varmap(&text, dt, device), &SdTextConfig::v1_5())?;
        }
        TextEncoderConfig::V2_1 => {
            SdTextTransformer::new(VarBuilder::from_varmap(&text, dt, device), &SdTextConfig::v2_1())?;
        }
    }
    let vision = VarMap::new();
    ClipVisionTransformer::new(VarBuilder::from_varmap(&vision, dt, device), &config.vision)?;
    Ok([dump(&unet), dump(&vae), dump(&text), dump(&vision)])
}
