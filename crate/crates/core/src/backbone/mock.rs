//! Seeded stand-in backbone with the pretrained shape contract.
//!
//! Every stage is a fixed random projection of average-pooled inputs
//! followed by `tanh`, so outputs are deterministic, bounded and sensitive
//! to every input pixel. The UNet taps are chained (each level receives a
//! pointwise projection of the previous, post-hook level) so an injection
//! at one level propagates to the later ones, as in a real decoder.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    apply_hook, build_noise_schedule, Backbone, ImageBatch, InjectionHook, LatentBatch, NoiseSchedule,
    PatchFeatureGrid, PromptTokens, ScheduleParams, UNetFeatureSet, DEFAULT_STEPS, TAP_LEVELS,
    UNET_TAP_CHANNELS,
};
use crate::error::{Error, Result};
use crate::grid::{avg_pool, pointwise, resize_bilinear, FeatureGrid};
use crate::params::tensor_digest;

/// Pooling applied to the latent before each tap so that tap `n` sits at
/// 1/32, 1/16, 1/8, 1/8 of the input resolution.
const TAP_POOL: [usize; TAP_LEVELS] = [4, 2, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    pub latent_channels: usize,
    pub tap_channels: [usize; TAP_LEVELS],
    pub patch_dim: usize,
    pub patch_size: usize,
    pub encoder_input: usize,
    pub schedule: ScheduleParams,
    pub steps: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_channels: 4,
            tap_channels: UNET_TAP_CHANNELS,
            patch_dim: 1024,
            patch_size: 14,
            encoder_input: 224,
            schedule: ScheduleParams::default(),
            steps: DEFAULT_STEPS,
        }
    }
}

impl MockConfig {
    /// Narrow widths for fast training tests; shapes keep the same ratios.
    pub fn tiny(seed: u64) -> Self {
        Self {
            seed,
            tap_channels: [32, 32, 16, 16],
            patch_dim: 16,
            ..Self::default()
        }
    }
}

struct Weights {
    latent_kernel: Tensor,
    latent_bias: Tensor,
    tap_kernels: Vec<Tensor>,
    tap_biases: Vec<Tensor>,
    skip: Vec<Tensor>,
    time_freq: Vec<Tensor>,
    time_phase: Vec<Tensor>,
    patch_kernel: Tensor,
    patch_bias: Tensor,
}

pub struct MockBackbone {
    config: MockConfig,
    schedule: NoiseSchedule,
    weights: Weights,
    dtype: DType,
    device: Device,
    calls: AtomicUsize,
}

struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Ok(Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

impl MockBackbone {
    pub fn new(config: MockConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.patch_size < 2 || config.patch_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mock patch size must be even, got {}",
                config.patch_size
            )));
        }
        if config.encoder_input % config.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder input {} not divisible by patch size {}",
                config.encoder_input, config.patch_size
            )));
        }
        if config.latent_channels == 0 || config.patch_dim == 0 || config.tap_channels.contains(&0) {
            return Err(Error::InvalidArgument("mock widths must be positive".into()));
        }
        let schedule = build_noise_schedule(config.steps, &config.schedule)?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            dtype,
            device: device.clone(),
        };
        let c_lat = config.latent_channels;
        let latent_kernel = init.normal(&[c_lat, 3, 2, 2], 2.0 / 12f64.sqrt())?;
        let latent_bias = init.normal(&[c_lat], 0.1)?;
        let mut tap_kernels = Vec::new();
        let mut tap_biases = Vec::new();
        let mut skip = Vec::new();
        let mut time_freq = Vec::new();
        let mut time_phase = Vec::new();
        for (n, &c) in config.tap_channels.iter().enumerate() {
            tap_kernels.push(init.normal(&[c, c_lat, 3, 3], 1.5 / ((9 * c_lat) as f64).sqrt())?);
            tap_biases.push(init.normal(&[c], 0.1)?);
            if n > 0 {
                let c_prev = config.tap_channels[n - 1];
                skip.push(init.normal(&[c, c_prev], 1.0 / (c_prev as f64).sqrt())?);
            }
            time_freq.push(init.uniform(&[c], 1e-3, 5e-2)?);
            time_phase.push(init.uniform(&[c], 0.0, std::f64::consts::TAU)?);
        }
        let patch_kernel = init.normal(&[config.patch_dim, 3, 2, 2], 2.0 / 12f64.sqrt())?;
        let patch_bias = init.normal(&[config.patch_dim], 0.1)?;
        Ok(Self {
            config,
            schedule,
            weights: Weights {
                latent_kernel,
                latent_bias,
                tap_kernels,
                tap_biases,
                skip,
                time_freq,
                time_phase,
                patch_kernel,
                patch_bias,
            },
            dtype,
            device: device.clone(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Per-channel `0.1·sin(freq·t + phase)` bias, shaped `[1, C, 1, 1]`.
    fn timestep_bias(&self, level: usize, t: usize) -> Result<Tensor> {
        let f = &self.weights.time_freq[level];
        let p = &self.weights.time_phase[level];
        let b = f.affine(t as f64, 0.0)?.add(p)?.sin()?.affine(0.1, 0.0)?;
        Ok(b.reshape((1, b.dims1()?, 1, 1))?)
    }

    /// A text-derived per-channel bias; zero for the null prompt.
    fn prompt_bias(&self, level: usize, prompt: &PromptTokens) -> Result<Option<Tensor>> {
        if prompt.is_null() {
            return Ok(None);
        }
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update((level as u64).to_le_bytes());
        h.update(prompt.text().as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"));
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: self.dtype,
            device: self.device.clone(),
        };
        let c = self.config.tap_channels[level];
        Ok(Some(init.normal(&[1, c, 1, 1], 0.1)?))
    }

    fn check_images(&self, images: &ImageBatch) -> Result<Tensor> {
        Ok(images.tensor().to_dtype(self.dtype)?)
    }
}

impl Backbone for MockBackbone {
    fn name(&self) -> String {
        format!("mock-{}", self.config.seed)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn tap_channels(&self) -> [usize; TAP_LEVELS] {
        self.config.tap_channels
    }

    fn patch_dim(&self) -> usize {
        self.config.patch_dim
    }

    fn patch_grid(&self) -> usize {
        self.config.encoder_input / self.config.patch_size
    }

    fn encode_latent(&self, images: &ImageBatch) -> Result<LatentBatch> {
        self.tick();
        let x = self.check_images(images)?.affine(2.0, -1.0)?;
        let pooled = avg_pool(&x, 4)?;
        let z = pooled
            .conv2d(&self.weights.latent_kernel, 0, 2, 1, 1)?
            .broadcast_add(&self.weights.latent_bias.reshape((1, (), 1, 1))?)?
            .tanh()?;
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
            return Err(Error::shape(
                "latent channels",
                &[self.config.latent_channels],
                &[z_t.channels()],
            ));
        }
        let (h, w) = z_t.spatial();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent grid {h}x{w} must be divisible by 4"
            )));
        }
        self.tick();
        let z = z_t.tensor().to_dtype(self.dtype)?;
        let mut taps: Vec<FeatureGrid> = Vec::with_capacity(TAP_LEVELS);
        let mut prev: Option<Tensor> = None;
        for level in 0..TAP_LEVELS {
            let pooled = avg_pool(&z, TAP_POOL[level])?;
            let mut pre = pooled
                .conv2d(&self.weights.tap_kernels[level], 1, 1, 1, 1)?
                .broadcast_add(&self.weights.tap_biases[level].reshape((1, (), 1, 1))?)?
                .broadcast_add(&self.timestep_bias(level, t)?)?;
            if let Some(bias) = self.prompt_bias(level, prompt)? {
                pre = pre.broadcast_add(&bias)?;
            }
            if let Some(p) = &prev {
                let (_, _, th, tw) = pre.dims4()?;
                let up = resize_bilinear(p, th, tw)?;
                pre = (pre + pointwise(&up, &self.weights.skip[level - 1], None)?)?;
            }
            let raw = pre.tanh()?;
            let out = apply_hook(&mut hook, level + 1, raw)?;
            prev = Some(out.clone());
            taps.push(FeatureGrid::new(out)?);
        }
        let levels: [FeatureGrid; TAP_LEVELS] = taps
            .try_into()
            .map_err(|_| Error::InvalidArgument("tap count".into()))?;
        Ok(UNetFeatureSet::new(levels, t))
    }

    fn extract_patch_features(&self, images: &ImageBatch) -> Result<PatchFeatureGrid> {
        self.tick();
        let size = self.config.encoder_input;
        let x = resize_bilinear(&self.check_images(images)?, size, size)?.affine(2.0, -1.0)?;
        let pooled = avg_pool(&x, self.config.patch_size / 2)?;
        let f = pooled
            .conv2d(&self.weights.patch_kernel, 0, 2, 1, 1)?
            .broadcast_add(&self.weights.patch_bias.reshape((1, (), 1, 1))?)?;
        let global = f.mean_keepdim(2)?.mean_keepdim(3)?;
        let global = global.broadcast_as(f.shape())?.affine(0.5, 0.0)?;
        let f = (f + global)?.tanh()?;
        PatchFeatureGrid::new(FeatureGrid::new(f)?)
    }

    fn parameter_digest(&self) -> Result<String> {
        let w = &self.weights;
        let mut named: Vec<(String, &Tensor)> = vec![
            ("latent.kernel".into(), &w.latent_kernel),
            ("latent.bias".into(), &w.latent_bias),
            ("patch.kernel".into(), &w.patch_kernel),
            ("patch.bias".into(), &w.patch_bias),
        ];
        for n in 0..TAP_LEVELS {
            named.push((format!("tap{n}.kernel"), &w.tap_kernels[n]));
            named.push((format!("tap{n}.bias"), &w.tap_biases[n]));
            named.push((format!("tap{n}.freq"), &w.time_freq[n]));
            named.push((format!("tap{n}.phase"), &w.time_phase[n]));
        }
        for (n, s) in w.skip.iter().enumerate() {
            named.push((format!("skip{}", n + 1), s));
        }
        tensor_digest(named.iter().map(|(k, t)| (k.as_str(), *t)))
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}
