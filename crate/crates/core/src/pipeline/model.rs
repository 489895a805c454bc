use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::config::{BackboneKind, Task, TaskConfig};
use crate::aggregator::{Aggregator, FusedFeatureMap};
use crate::backbone::{
    add_noise, sample_noise, Backbone, ImageBatch, LatentBatch, MockBackbone, MockConfig, PatchFeatureGrid,
    PretrainedBackbone, PretrainedConfig, PromptTokens,
};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::heads::LinearClassifier;
use crate::injection::{AdapterInit, AdapterStack};
use crate::params::ParamStore;

/// Backbone described by `config`: the mock (seeded with `config.seed`) or
/// released weights from `config.weights_dir`.
pub fn build_backbone(config: &TaskConfig, dtype: DType, device: &Device) -> Result<Box<dyn Backbone>> {
    Ok(match config.backbone {
        BackboneKind::Mock => Box::new(MockBackbone::new(
            MockConfig {
                seed: config.seed,
                ..MockConfig::default()
            },
            dtype,
            device,
        )?),
        BackboneKind::MockTiny => Box::new(MockBackbone::new(MockConfig::tiny(config.seed), dtype, device)?),
        BackboneKind::Pretrained => {
            let dir = config
                .weights_dir
                .as_ref()
                .ok_or_else(|| Error::Config("the pretrained backbone needs weights_dir".into()))?;
            Box::new(PretrainedBackbone::from_dir(
                dir,
                PretrainedConfig::for_variants(config.sd_variant, config.clip_variant),
                dtype,
                device,
            )?)
        }
    })
}

/// Stable per-sample noise seed.
pub fn noise_seed(seed: u64, key: &str) -> u64 {
    let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(key.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Frozen-backbone outputs that do not depend on trainable parameters:
/// the noisy latent and the patch features of each image.
#[derive(Clone, Debug)]
pub struct FrozenInputs {
    pub z_t: LatentBatch,
    pub f_v: PatchFeatureGrid,
    pub prompts: Vec<PromptTokens>,
}

impl FrozenInputs {
    pub fn batch_size(&self) -> usize {
        self.z_t.batch_size()
    }

    /// Concatenates single-sample inputs into one batch.
    pub fn concat(items: &[&FrozenInputs]) -> Result<FrozenInputs> {
        let z: Vec<&Tensor> = items.iter().map(|i| i.z_t.tensor()).collect();
        let v: Vec<&Tensor> = items.iter().map(|i| i.f_v.grid().tensor()).collect();
        Ok(FrozenInputs {
            z_t: LatentBatch::new(Tensor::cat(&z, 0)?)?,
            f_v: PatchFeatureGrid::new(FeatureGrid::new(Tensor::cat(&v, 0)?)?)?,
            prompts: items.iter().flat_map(|i| i.prompts.iter().cloned()).collect(),
        })
    }
}

/// Trainable part of the pipeline: adapters, aggregator, branch weights and
/// task-specific head parameters, all registered in one [`ParamStore`].
pub struct SketchModel {
    config: TaskConfig,
    num_classes: usize,
    params: ParamStore,
    adapters: AdapterStack,
    aggregator: Aggregator,
    classifier: Option<LinearClassifier>,
    log_tau: Option<Tensor>,
}

impl SketchModel {
    pub fn new(config: &TaskConfig, backbone: &dyn Backbone, num_classes: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_adapter_init(config, backbone, num_classes, AdapterInit::Scaled, dtype, device)
    }

    pub fn with_adapter_init(
        config: &TaskConfig,
        backbone: &dyn Backbone,
        num_classes: usize,
        init: AdapterInit,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed, dtype, device);
        let taps = backbone.tap_channels();
        let adapters = AdapterStack::new(
            &mut params,
            backbone.patch_dim(),
            taps,
            config.injection_mode(),
            config.inject_level4,
            init,
        )?;
        let aggregator = Aggregator::new(&mut params, [taps[0], taps[1], taps[2]], config.aggregator_config())?;
        let classifier = match config.task {
            Task::Recognition => Some(LinearClassifier::new(&mut params, config.d_agg, num_classes)?),
            _ => None,
        };
        let log_tau = match (config.task, config.learnable_tau) {
            (Task::Correspondence, true) => Some(params.constant("head.log_tau", &[], config.contrastive_tau.ln())?),
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            num_classes,
            params,
            adapters,
            aggregator,
            classifier,
            log_tau,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn adapters(&self) -> &AdapterStack {
        &self.adapters
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn classifier(&self) -> Option<&LinearClassifier> {
        self.classifier.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Contrastive temperature as a scalar tensor (learnable when enabled).
    pub fn tau(&self) -> Result<Tensor> {
        match &self.log_tau {
            Some(l) => Ok(l.exp()?),
            None => Ok(Tensor::new(self.config.contrastive_tau, self.device())?.to_dtype(self.dtype())?),
        }
    }

    pub fn load_params(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.params.load(tensors)
    }

    /// Encodes, noises and patch-embeds `images`. `keys` identify the
    /// samples so that each one always receives the same noise.
    pub fn prepare(&self, backbone: &dyn Backbone, images: &ImageBatch, keys: &[String], classes: &[&str]) -> Result<FrozenInputs> {
        let b = images.batch_size();
        if keys.len() != b {
            return Err(Error::shape("sample keys", &[b], &[keys.len()]));
        }
        let images = ImageBatch::new(images.tensor().to_dtype(self.dtype())?)?;
        let z0 = backbone.encode_latent(&images)?;
        let seeds: Vec<u64> = keys.iter().map(|k| noise_seed(self.config.seed, k)).collect();
        let eps = sample_noise(z0.tensor().dims(), &seeds, self.dtype(), self.device())?;
        let z_t = add_noise(&z0, self.config.timestep, &eps, backbone.schedule())?;
        let f_v = backbone.extract_patch_features(&images)?;
        let prompts = if self.config.class_prompt {
            if classes.len() != b {
                return Err(Error::shape("class names", &[b], &[classes.len()]));
            }
            classes.iter().map(|c| PromptTokens::class_prompt(c)).collect()
        } else {
            vec![PromptTokens::null(); b]
        };
        Ok(FrozenInputs {
            z_t: LatentBatch::new(z_t.tensor().detach())?,
            f_v: PatchFeatureGrid::new(f_v.grid().detach())?,
            prompts,
        })
    }

    /// Injected UNet pass and aggregation for prepared inputs.
    pub fn forward(&self, backbone: &dyn Backbone, inputs: &FrozenInputs) -> Result<FusedFeatureMap> {
        let same_prompt = inputs.prompts.windows(2).all(|w| w[0] == w[1]);
        if same_prompt {
            let prompt = inputs.prompts.first().cloned().unwrap_or_else(PromptTokens::null);
            return self.forward_with_prompt(backbone, &inputs.z_t, &inputs.f_v, &prompt);
        }
        let mut maps = Vec::with_capacity(inputs.batch_size());
        for i in 0..inputs.batch_size() {
            let z = LatentBatch::new(inputs.z_t.tensor().narrow(0, i, 1)?)?;
            let v = PatchFeatureGrid::new(inputs.f_v.grid().sample(i)?)?;
            maps.push(self.forward_with_prompt(backbone, &z, &v, &inputs.prompts[i])?.tensor().clone());
        }
        FusedFeatureMap::new(Tensor::cat(&maps, 0)?)
    }

    fn forward_with_prompt(
        &self,
        backbone: &dyn Backbone,
        z_t: &LatentBatch,
        f_v: &PatchFeatureGrid,
        prompt: &PromptTokens,
    ) -> Result<FusedFeatureMap> {
        let mut hook = self.adapters.hook(f_v);
        let taps = backbone.extract_unet_features(z_t, self.config.timestep, prompt, Some(&mut *hook))?;
        self.aggregator.forward(&taps)
    }

    /// `prepare` followed by `forward`.
    pub fn extract(&self, backbone: &dyn Backbone, images: &ImageBatch, keys: &[String], classes: &[&str]) -> Result<FusedFeatureMap> {
        let inputs = self.prepare(backbone, images, keys, classes)?;
        self.forward(backbone, &inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(task: Task) -> TaskConfig {
        TaskConfig {
            task,
            backbone: BackboneKind::MockTiny,
            d_agg: 8,
            image_size: 64,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn parameter_sets_per_task() {
        let dev = Device::Cpu;
        let c = tiny_config(Task::Recognition);
        let bb = build_backbone(&c, DType::F32, &dev).unwrap();
        let m = SketchModel::new(&c, bb.as_ref(), 5, DType::F32, &dev).unwrap();
        assert_eq!(m.params().names_with_prefix("head.cls.").len(), 2);
        let mut c = tiny_config(Task::Correspondence);
        c.learnable_tau = true;
        let m = SketchModel::new(&c, bb.as_ref(), 5, DType::F32, &dev).unwrap();
        assert!(m.params().get("head.log_tau").is_some());
        assert!((m.tau().unwrap().to_scalar::<f32>().unwrap() - 0.07).abs() < 1e-6);
    }

    #[test]
    fn extraction_shape_and_noise_determinism() {
        let dev = Device::Cpu;
        let c = tiny_config(Task::ZsSbir);
        let bb = build_backbone(&c, DType::F32, &dev).unwrap();
        let m = SketchModel::new(&c, bb.as_ref(), 1, DType::F32, &dev).unwrap();
        let img = ImageBatch::new(Tensor::full(0.5f32, (2, 3, 64, 64), &dev).unwrap()).unwrap();
        let keys = vec!["a".to_string(), "b".to_string()];
        let f = m.extract(bb.as_ref(), &img, &keys, &[]).unwrap();
        assert_eq!(f.grid().hwc(), (60, 60, 8));
        // Same image, different keys: different noise, different features.
        let a = f.sample(0).unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = f.sample(1).unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(a, b);
        // A sample's features do not depend on its batch companions.
        let single = ImageBatch::new(Tensor::full(0.5f32, (1, 3, 64, 64), &dev).unwrap()).unwrap();
        let g = m.extract(bb.as_ref(), &single, &keys[1..], &[]).unwrap();
        let g = g.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in g.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn noise_seed_is_stable() {
        assert_eq!(noise_seed(3, "photo/x"), noise_seed(3, "photo/x"));
        assert_ne!(noise_seed(3, "photo/x"), noise_seed(4, "photo/x"));
    }
}
