//! On-disk cache of fused feature maps.
//!
//! Record layout (little-endian):
//!
//! ```text
//! b"SKFC" | version u32 | digest [u8; 32] | timestep u32
//! | id_len u32 | id bytes | rank u32 | dims u32 × rank | f32 payload
//! ```
//!
//! The digest covers the extraction config, the trainable parameters and
//! the frozen backbone, so a record is reused only when all three match.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::model::SketchModel;
use super::samples::Sample;
use crate::aggregator::FusedFeatureMap;
use crate::backbone::{Backbone, ImageBatch};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SKFC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub sample_id: String,
    pub timestep: u32,
    pub digest: [u8; 32],
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl CacheRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.sample_id.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.timestep.to_le_bytes());
        out.extend_from_slice(&(self.sample_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.sample_id.as_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or("truncated record")?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let digest: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let timestep = u32_at(take(4)?);
        let id_len = u32_at(take(4)?) as usize;
        let sample_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| "sample id is not UTF-8")?;
        let rank = u32_at(take(4)?) as usize;
        let shape = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = take(4 * n)?;
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            sample_id,
            timestep,
            digest,
            shape,
            values,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File for a sample key; the readable prefix is sanitized and a hash
    /// suffix keeps distinct keys distinct.
    pub fn record_path(&self, key: &str) -> PathBuf {
        let safe: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .take(64)
            .collect();
        let h = hex::encode(&Sha256::digest(key.as_bytes())[..6]);
        self.dir.join(format!("{safe}-{h}.skfc"))
    }

    /// The cached record if it exists and was written under `digest`.
    pub fn load(&self, key: &str, digest: &[u8; 32]) -> Result<Option<CacheRecord>> {
        let path = self.record_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        match CacheRecord::decode(&bytes) {
            Ok(r) if &r.digest == digest && r.sample_id == key => Ok(Some(r)),
            Ok(_) => {
                log::info!("cache record {} is stale; recomputing", path.display());
                Ok(None)
            }
            Err(m) => {
                log::warn!("cache record {} unreadable ({m}); recomputing", path.display());
                Ok(None)
            }
        }
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial record.
    pub fn store(&self, record: &CacheRecord) -> Result<()> {
        let path = self.record_path(&record.sample_id);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, record.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Digest under which features of `model` on `backbone` are cached.
pub fn feature_digest(model: &SketchModel, backbone: &dyn Backbone) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(model.config().extraction_digest().as_bytes());
    h.update(model.params().digest()?.as_bytes());
    h.update(backbone.parameter_digest()?.as_bytes());
    Ok(h.finalize().into())
}

fn record_to_map(r: CacheRecord, dtype: DType, device: &Device) -> Result<FusedFeatureMap> {
    let t = Tensor::from_vec(r.values, r.shape, device)?.to_dtype(dtype)?;
    FusedFeatureMap::new(t)
}

/// Fused maps (batch of one each) for `samples`, reading and filling the
/// cache when one is given. `keys` must be unique per sample.
pub fn extract_and_cache(
    model: &SketchModel,
    backbone: &dyn Backbone,
    samples: &[(&Sample, String, &str)],
    cache: Option<&FeatureCache>,
) -> Result<(Vec<FusedFeatureMap>, CacheStats)> {
    let digest = match cache {
        Some(_) => Some(feature_digest(model, backbone)?),
        None => None,
    };
    let mut out: Vec<Option<FusedFeatureMap>> = vec![None; samples.len()];
    let mut stats = CacheStats::default();
    let mut todo = Vec::new();
    for (i, (_, key, _)) in samples.iter().enumerate() {
        if let (Some(c), Some(d)) = (cache, &digest) {
            if let Some(r) = c.load(key, d)? {
                out[i] = Some(record_to_map(r, model.dtype(), model.device())?);
                stats.hits += 1;
                continue;
            }
        }
        todo.push(i);
    }
    stats.misses = todo.len();
    for chunk in todo.chunks(model.config().batch_size.max(1)) {
        let images: Vec<Tensor> = chunk.iter().map(|&i| samples[i].0.image.clone()).collect();
        let batch = ImageBatch::stack(&images)?;
        let keys: Vec<String> = chunk.iter().map(|&i| samples[i].1.clone()).collect();
        let classes: Vec<&str> = chunk.iter().map(|&i| samples[i].2).collect();
        let fused = model.extract(backbone, &batch, &keys, &classes)?.detach();
        for (j, &i) in chunk.iter().enumerate() {
            let map = fused.sample(j)?;
            if let (Some(c), Some(d)) = (cache, &digest) {
                c.store(&CacheRecord {
                    sample_id: keys[j].clone(),
                    timestep: model.config().timestep as u32,
                    digest: *d,
                    shape: map.tensor().dims().to_vec(),
                    values: map.tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })?;
            }
            out[i] = Some(map);
        }
    }
    Ok((out.into_iter().map(|m| m.expect("filled")).collect(), stats))
}
