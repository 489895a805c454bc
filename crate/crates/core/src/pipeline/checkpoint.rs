use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::config::TaskConfig;
use super::model::SketchModel;
use crate::backbone::Backbone;
use crate::error::{Error, Result};

const META_CONFIG: &str = "config";
const META_CLASSES: &str = "num_classes";
const META_DIGEST: &str = "params_digest";

/// Trainable parameters plus the config and class count they belong to.
pub struct Checkpoint {
    pub config: TaskConfig,
    pub num_classes: usize,
    pub params_digest: String,
    pub tensors: HashMap<String, Tensor>,
}

/// Writes every trainable parameter as safetensors, with the TOML config
/// in the header metadata. The file is replaced atomically.
pub fn save_checkpoint(path: &Path, model: &SketchModel) -> Result<()> {
    let snapshot = model.params().snapshot()?;
    let metadata = HashMap::from([
        (META_CONFIG.to_string(), model.config().to_toml()?),
        (META_CLASSES.to_string(), model.num_classes().to_string()),
        (META_DIGEST.to_string(), model.params().digest()?),
    ]);
    let bytes = safetensors::serialize(snapshot.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks {k}", path.display())))
    };
    let config = TaskConfig::from_toml(&get(META_CONFIG)?)?;
    let num_classes = get(META_CLASSES)?
        .parse()
        .map_err(|_| Error::Checkpoint("bad class count".into()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok(Checkpoint {
        config,
        num_classes,
        params_digest: get(META_DIGEST)?,
        tensors,
    })
}

/// Rebuilds the model a checkpoint was saved from, for evaluation under
/// `config`. Fails if the two configs disagree on task or parameter layout.
pub fn restore_model(
    checkpoint: &Checkpoint,
    config: &TaskConfig,
    backbone: &dyn Backbone,
    dtype: DType,
    device: &Device,
) -> Result<SketchModel> {
    config.check_compatible(&checkpoint.config)?;
    let model = SketchModel::new(config, backbone, checkpoint.num_classes, dtype, device)?;
    model.load_params(&checkpoint.tensors)?;
    let same_dtype = checkpoint.tensors.values().all(|t| t.dtype() == dtype);
    if same_dtype && model.params().digest()? != checkpoint.params_digest {
        return Err(Error::Checkpoint("restored parameters do not match the stored digest".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::{BackboneKind, Task};
    use crate::pipeline::model::build_backbone;

    #[test]
    fn roundtrip_restores_parameters() {
        let dev = Device::Cpu;
        let config = TaskConfig {
            task: Task::Recognition,
            backbone: BackboneKind::MockTiny,
            d_agg: 8,
            ..TaskConfig::default()
        };
        let bb = build_backbone(&config, DType::F32, &dev).unwrap();
        let a = SketchModel::new(&config, bb.as_ref(), 3, DType::F32, &dev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &a).unwrap();
        let ck = load_checkpoint(&path, &dev).unwrap();
        assert_eq!(ck.config, config);
        assert_eq!(ck.num_classes, 3);
        let mut other = config.clone();
        other.seed = 99;
        let b = SketchModel::new(&other, bb.as_ref(), 3, DType::F32, &dev).unwrap();
        assert_ne!(a.params().digest().unwrap(), b.params().digest().unwrap());
        b.load_params(&ck.tensors).unwrap();
        assert_eq!(b.params().digest().unwrap(), ck.params_digest);
    }
}
