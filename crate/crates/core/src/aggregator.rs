//! Multi-level aggregation into the fused 60×60 feature map.
//!
//! Each of the first three taps is projected to `d_agg` channels with a
//! 1×1 convolution, resized to 60×60 and refined by a level-specific
//! residual block; the three results are summed with scalar branch
//! weights α. The projection is linear per pixel, so it commutes with the
//! bilinear resize and is applied on the (smaller) native grid.

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use crate::backbone::UNetFeatureSet;
use crate::error::{Error, Result};
use crate::grid::{conv3x3_same, linear_interp_weights, pointwise, resize_bilinear, FeatureGrid};
use crate::params::ParamStore;

/// Side of the fused grid.
pub const FUSED_GRID: usize = 60;

/// Number of aggregated levels (the fourth tap is not aggregated).
pub const AGG_LEVELS: usize = 3;

pub const DEFAULT_D_AGG: usize = 768;

/// The universal `[B, d_agg, 60, 60]` feature every head consumes.
#[derive(Clone, Debug)]
pub struct FusedFeatureMap(FeatureGrid);

impl FusedFeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let g = FeatureGrid::new(t)?;
        if g.height() != FUSED_GRID || g.width() != FUSED_GRID {
            return Err(Error::shape(
                "fused map",
                &[g.batch(), g.channels(), FUSED_GRID, FUSED_GRID],
                g.tensor().dims(),
            ));
        }
        Ok(Self(g))
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.0
    }

    pub fn tensor(&self) -> &Tensor {
        self.0.tensor()
    }

    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn batch(&self) -> usize {
        self.0.batch()
    }

    pub fn sample(&self, b: usize) -> Result<Self> {
        Ok(Self(self.0.sample(b)?))
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

/// Largest divisor of `channels` not exceeding 32.
pub fn norm_groups(channels: usize) -> usize {
    (1..=32.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    /// Learned projection plus residual block per level.
    Learned,
    /// Fixed channel interpolation, no learned parameters.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchWeightMode {
    Learned,
    /// Constant, equal, non-trainable weights.
    FrozenEqual,
}

#[derive(Clone, Debug)]
pub struct AggregatorConfig {
    pub d_agg: usize,
    pub mode: AggregationMode,
    pub weights: BranchWeightMode,
    pub alpha_init: f64,
    pub alpha_softmax: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            d_agg: DEFAULT_D_AGG,
            mode: AggregationMode::Learned,
            weights: BranchWeightMode::Learned,
            alpha_init: 1.0,
            alpha_softmax: false,
        }
    }
}

struct ConvNorm {
    weight: Tensor,
    bias: Tensor,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(params: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let std = (2.0 / (9 * d) as f64).sqrt();
        let weight = params.normal(&format!("{prefix}.conv.weight"), &[d, d, 3, 3], std)?;
        let bias = params.zeros(&format!("{prefix}.conv.bias"), &[d])?;
        let gamma = params.constant(&format!("{prefix}.norm.weight"), &[d], 1.0)?;
        let beta = params.zeros(&format!("{prefix}.norm.bias"), &[d])?;
        let norm = GroupNorm::new(gamma, beta, d, norm_groups(d), 1e-5)?;
        Ok(Self { weight, bias, norm })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv3x3_same(x, &self.weight, Some(&self.bias))?;
        Ok(self.norm.forward(&y)?.relu()?)
    }
}

/// `h + N2(N1(h))` with `N = relu ∘ groupnorm ∘ conv3×3`.
struct ResBlock {
    first: ConvNorm,
    second: ConvNorm,
}

impl ResBlock {
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let r = self.second.forward(&self.first.forward(h)?)?;
        Ok((h + r)?)
    }
}

struct Level {
    proj_weight: Tensor,
    proj_bias: Option<Tensor>,
    block: Option<ResBlock>,
}

pub struct Aggregator {
    config: AggregatorConfig,
    levels: Vec<Level>,
    alpha: Tensor,
}

impl Aggregator {
    /// `in_channels` are the widths of taps 1–3.
    pub fn new(params: &mut ParamStore, in_channels: [usize; AGG_LEVELS], config: AggregatorConfig) -> Result<Self> {
        let d = config.d_agg;
        if d == 0 {
            return Err(Error::InvalidArgument("d_agg must be positive".into()));
        }
        let mut levels = Vec::with_capacity(AGG_LEVELS);
        for (i, &c) in in_channels.iter().enumerate() {
            let n = i + 1;
            levels.push(match config.mode {
                AggregationMode::Learned => {
                    let proj_weight =
                        params.normal(&format!("agg.{n}.proj.weight"), &[d, c], (1.0 / c as f64).sqrt())?;
                    let proj_bias = params.zeros(&format!("agg.{n}.proj.bias"), &[d])?;
                    let first = ConvNorm::new(params, &format!("agg.{n}.block.0"), d)?;
                    let second = ConvNorm::new(params, &format!("agg.{n}.block.1"), d)?;
                    Level {
                        proj_weight,
                        proj_bias: Some(proj_bias),
                        block: Some(ResBlock { first, second }),
                    }
                }
                AggregationMode::Fixed => {
                    let w = linear_interp_weights(c, d);
                    Level {
                        proj_weight: Tensor::from_vec(w, (d, c), params.device())?.to_dtype(params.dtype())?,
                        proj_bias: None,
                        block: None,
                    }
                }
            });
        }
        let alpha = match config.weights {
            BranchWeightMode::Learned => params.constant("agg.alpha", &[AGG_LEVELS], config.alpha_init)?,
            BranchWeightMode::FrozenEqual => {
                Tensor::ones(AGG_LEVELS, params.dtype(), params.device())?
            }
        };
        Ok(Self { config, levels, alpha })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// Projection, resize to 60×60 and the level's residual block.
    pub fn aggregate_level(&self, f: &FeatureGrid, level: usize) -> Result<Tensor> {
        if !(1..=AGG_LEVELS).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "level {level} is not aggregated (only 1..=3)"
            )));
        }
        let l = &self.levels[level - 1];
        let expected = l.proj_weight.dims()[1];
        if f.channels() != expected {
            return Err(Error::shape(
                format!("aggregation input at level {level}"),
                &[expected],
                &[f.channels()],
            ));
        }
        let h = pointwise(f.tensor(), &l.proj_weight, l.proj_bias.as_ref())?;
        let h = resize_bilinear(&h, FUSED_GRID, FUSED_GRID)?;
        match &l.block {
            Some(b) => b.forward(&h),
            None => Ok(h),
        }
    }

    /// The α actually applied (softmax-normalized when configured).
    pub fn effective_alpha(&self) -> Result<Tensor> {
        if self.config.alpha_softmax {
            Ok(candle_nn::ops::softmax(&self.alpha, 0)?)
        } else {
            Ok(self.alpha.clone())
        }
    }

    pub fn alpha_values(&self) -> Result<Vec<f64>> {
        Ok(self
            .effective_alpha()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn forward(&self, features: &UNetFeatureSet) -> Result<FusedFeatureMap> {
        let mut grids = Vec::with_capacity(AGG_LEVELS);
        for n in 1..=AGG_LEVELS {
            grids.push(self.aggregate_level(features.level(n)?, n)?);
        }
        fuse(&grids, &self.effective_alpha()?)
    }
}

/// `Σ_n α_n · grid_n`.
pub fn fuse(grids: &[Tensor], alpha: &Tensor) -> Result<FusedFeatureMap> {
    if grids.len() != AGG_LEVELS || alpha.dims() != [AGG_LEVELS] {
        return Err(Error::InvalidArgument(format!(
            "fusion takes {AGG_LEVELS} grids and {AGG_LEVELS} weights, got {} and {:?}",
            grids.len(),
            alpha.dims()
        )));
    }
    let dims = grids[0].dims();
    for g in &grids[1..] {
        if g.dims() != dims {
            return Err(Error::shape("fusion", dims, g.dims()));
        }
    }
    let mut acc: Option<Tensor> = None;
    for (n, g) in grids.iter().enumerate() {
        let a = alpha.narrow(0, n, 1)?.reshape((1, 1, 1, 1))?;
        let term = g.broadcast_mul(&a)?;
        acc = Some(match acc {
            None => term,
            Some(s) => (s + term)?,
        });
    }
    FusedFeatureMap::new(acc.expect("three grids"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn group_choice() {
        assert_eq!(norm_groups(768), 32);
        assert_eq!(norm_groups(16), 16);
        assert_eq!(norm_groups(40), 20);
        assert_eq!(norm_groups(7), 7);
        assert_eq!(norm_groups(37), 1);
    }

    #[test]
    fn level_shape_and_level4_rejected() {
        let mut p = ParamStore::new(0, DType::F32, &Device::Cpu);
        let cfg = AggregatorConfig {
            d_agg: 8,
            ..Default::default()
        };
        let agg = Aggregator::new(&mut p, [12, 12, 6], cfg).unwrap();
        let f = FeatureGrid::new(Tensor::ones((1, 12, 15, 15), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(agg.aggregate_level(&f, 1).unwrap().dims(), &[1, 8, 60, 60]);
        assert!(agg.aggregate_level(&f, 4).is_err());
        assert!(agg.aggregate_level(&f, 3).is_err());
    }

    #[test]
    fn zeroed_convs_leave_pure_skip_path() {
        let dev = Device::Cpu;
        let mut p = ParamStore::new(3, DType::F64, &dev);
        let cfg = AggregatorConfig {
            d_agg: 4,
            ..Default::default()
        };
        let agg = Aggregator::new(&mut p, [3, 3, 3], cfg).unwrap();
        for name in p.names_with_prefix("agg.1.block.") {
            if name.ends_with("conv.weight") {
                let v = p.get(&name).unwrap();
                v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::rand(0f64, 1.0, (1, 3, 5, 5), &dev).unwrap();
        let out = agg.aggregate_level(&FeatureGrid::new(x.clone()).unwrap(), 1).unwrap();
        let w = p.get("agg.1.proj.weight").unwrap().as_tensor().clone();
        let skip = resize_bilinear(&pointwise(&x, &w, None).unwrap(), 60, 60).unwrap();
        for (a, b) in flat(&out).iter().zip(flat(&skip)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let dev = Device::Cpu;
        let g = |v: [f64; 2]| Tensor::new(&v, &dev).unwrap().reshape((1, 2, 1, 1)).unwrap().repeat((1, 1, 60, 60)).unwrap();
        let grids = vec![g([1.0, 2.0]), g([3.0, -1.0]), g([0.0, 4.0])];
        let at = |a: [f64; 3]| flat(fuse(&grids, &Tensor::new(&a, &dev).unwrap()).unwrap().tensor());
        let sel = at([1.0, 0.0, 0.0]);
        assert_eq!(sel, flat(&grids[0]));
        assert!(at([0.0, 0.0, 0.0]).iter().all(|v| *v == 0.0));
        let mix = at([0.5, 0.25, 0.25]);
        assert!((mix[0] - (0.5 * 1.0 + 0.25 * 3.0)).abs() < 1e-12);
        assert!((mix[3600] - (0.5 * 2.0 - 0.25 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ablation_parameter_sets() {
        let dev = Device::Cpu;
        let mut p = ParamStore::new(0, DType::F32, &dev);
        let cfg = AggregatorConfig {
            d_agg: 8,
            mode: AggregationMode::Fixed,
            ..Default::default()
        };
        Aggregator::new(&mut p, [4, 4, 4], cfg).unwrap();
        assert_eq!(p.names(), vec!["agg.alpha".to_string()]);
        let mut q = ParamStore::new(0, DType::F32, &dev);
        let cfg = AggregatorConfig {
            d_agg: 8,
            weights: BranchWeightMode::FrozenEqual,
            ..Default::default()
        };
        let a = Aggregator::new(&mut q, [4, 4, 4], cfg).unwrap();
        assert!(q.get("agg.alpha").is_none());
        assert_eq!(a.alpha_values().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn softmax_alpha_sums_to_one() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let cfg = AggregatorConfig {
            d_agg: 4,
            alpha_softmax: true,
            ..Default::default()
        };
        let a = Aggregator::new(&mut p, [4, 4, 4], cfg).unwrap();
        let v = a.alpha_values().unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
