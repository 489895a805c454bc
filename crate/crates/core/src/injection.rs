//! Per-level channel adapters that add patch features to the UNet taps.
//!
//! Adapter `n` is a kernel-size-1 convolution over channels mapping the
//! patch-feature width `d_v` to the width of tap `n`, followed by bilinear
//! alignment to the tap's spatial grid. Both steps are linear and the
//! interpolation weights of every output pixel sum to one, so running the
//! channel map on the small patch grid and resizing afterwards gives the
//! same result as resizing first, at a fraction of the cost.

use candle_core::Tensor;

use crate::backbone::{InjectionHook, PatchFeatureGrid, TAP_LEVELS};
use crate::error::{Error, Result};
use crate::grid::{linear_interp_weights, pointwise, resize_bilinear, FeatureGrid};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InjectionMode {
    /// Learned per-level channel convolutions.
    Learned,
    /// Fixed linear interpolation along the channel axis; no parameters.
    Interpolation,
    /// No injection at all.
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdapterInit {
    /// Weights ~ N(0, 1/d_v), bias 0.
    Scaled,
    Zero,
}

struct Adapter {
    weight: Tensor,
    bias: Option<Tensor>,
}

pub struct AdapterStack {
    mode: InjectionMode,
    patch_dim: usize,
    channels: [usize; TAP_LEVELS],
    inject_level4: bool,
    adapters: Vec<Adapter>,
}

/// Parameter name of adapter `level` (1-based).
pub fn adapter_param_names(level: usize) -> [String; 2] {
    [format!("adapter.{level}.weight"), format!("adapter.{level}.bias")]
}

impl AdapterStack {
    pub fn new(
        params: &mut ParamStore,
        patch_dim: usize,
        channels: [usize; TAP_LEVELS],
        mode: InjectionMode,
        inject_level4: bool,
        init: AdapterInit,
    ) -> Result<Self> {
        let mut adapters = Vec::new();
        let n_active = if inject_level4 { TAP_LEVELS } else { TAP_LEVELS - 1 };
        match mode {
            InjectionMode::Learned => {
                for (i, &c) in channels.iter().enumerate().take(n_active) {
                    let [wn, bn] = adapter_param_names(i + 1);
                    let weight = match init {
                        AdapterInit::Scaled => params.normal(&wn, &[c, patch_dim], 1.0 / (patch_dim as f64).sqrt())?,
                        AdapterInit::Zero => params.zeros(&wn, &[c, patch_dim])?,
                    };
                    let bias = params.zeros(&bn, &[c])?;
                    adapters.push(Adapter {
                        weight,
                        bias: Some(bias),
                    });
                }
            }
            InjectionMode::Interpolation => {
                for &c in channels.iter().take(n_active) {
                    let w = linear_interp_weights(patch_dim, c);
                    let weight = Tensor::from_vec(w, (c, patch_dim), params.device())?.to_dtype(params.dtype())?;
                    adapters.push(Adapter { weight, bias: None });
                }
            }
            InjectionMode::Disabled => {}
        }
        Ok(Self {
            mode,
            patch_dim,
            channels,
            inject_level4,
            adapters,
        })
    }

    pub fn mode(&self) -> InjectionMode {
        self.mode
    }

    /// Whether `level` (1-based) receives an injection.
    pub fn is_active(&self, level: usize) -> bool {
        (1..=self.adapters.len()).contains(&level)
    }

    /// Maps `f_v` to tap `level`'s width and resizes it to `target`.
    pub fn adapt(&self, f_v: &PatchFeatureGrid, level: usize, target: (usize, usize)) -> Result<FeatureGrid> {
        if !(1..=TAP_LEVELS).contains(&level) {
            return Err(Error::InvalidArgument(format!("adapter level {level} outside 1..=4")));
        }
        if f_v.dim() != self.patch_dim {
            return Err(Error::shape(
                format!("adapter {level} input channels"),
                &[self.patch_dim],
                &[f_v.dim()],
            ));
        }
        let adapter = self.adapters.get(level - 1).ok_or_else(|| {
            Error::InvalidArgument(format!("no adapter for level {level} (mode {:?})", self.mode))
        })?;
        let mixed = pointwise(f_v.grid().tensor(), &adapter.weight, adapter.bias.as_ref())?;
        FeatureGrid::new(resize_bilinear(&mixed, target.0, target.1)?)
    }

    /// Channel width adapter `level` produces.
    pub fn output_channels(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    /// The hook that performs `f̂ = f + C(f_v)` inside the backbone pass.
    pub fn hook<'a>(&'a self, f_v: &'a PatchFeatureGrid) -> Box<InjectionHook<'a>> {
        Box::new(move |level: usize, raw: &Tensor| -> Result<Tensor> {
            if !self.is_active(level) {
                return Ok(raw.clone());
            }
            let (_, c, h, w) = raw.dims4()?;
            if c != self.output_channels(level) {
                return Err(Error::shape(
                    format!("adapter {level} output channels"),
                    &[self.output_channels(level)],
                    &[c],
                ));
            }
            let adapted = self.adapt(f_v, level, (h, w))?;
            inject(raw, adapted.tensor())
        })
    }

    pub fn inject_level4(&self) -> bool {
        self.inject_level4
    }
}

/// Elementwise `f_u + adapted`.
pub fn inject(f_u: &Tensor, adapted: &Tensor) -> Result<Tensor> {
    if f_u.dims() != adapted.dims() {
        return Err(Error::shape("injection", f_u.dims(), adapted.dims()));
    }
    Ok((f_u + adapted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn grid(values: Vec<f64>, c: usize, h: usize, w: usize) -> PatchFeatureGrid {
        let t = Tensor::from_vec(values, (1, c, h, w), &Device::Cpu).unwrap();
        PatchFeatureGrid::new(FeatureGrid::new(t).unwrap()).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn adapt_shape_contract() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let stack = AdapterStack::new(&mut p, 8, [12, 12, 6, 4], InjectionMode::Learned, true, AdapterInit::Scaled).unwrap();
        let fv = grid(vec![0.1; 8 * 16 * 16], 8, 16, 16);
        assert_eq!(stack.adapt(&fv, 3, (60, 60)).unwrap().hwc(), (60, 60, 6));
        assert_eq!(p.len(), 8);
    }

    #[test]
    fn zero_adapter_outputs_zero() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let stack = AdapterStack::new(&mut p, 3, [2, 2, 2, 2], InjectionMode::Learned, true, AdapterInit::Zero).unwrap();
        let fv = grid((0..27).map(|i| i as f64).collect(), 3, 3, 3);
        assert!(flat(stack.adapt(&fv, 1, (5, 5)).unwrap().tensor()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_pixel_matches_matrix_vector_product() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let stack = AdapterStack::new(&mut p, 2, [3, 3, 3, 3], InjectionMode::Learned, true, AdapterInit::Zero).unwrap();
        let w = [[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]];
        let b = [0.1, 0.2, 0.3];
        let wt = Tensor::new(&w, &Device::Cpu).unwrap();
        p.get("adapter.2.weight").unwrap().set(&wt).unwrap();
        p.get("adapter.2.bias").unwrap().set(&Tensor::new(&b, &Device::Cpu).unwrap()).unwrap();
        let x = [0.7, -1.3];
        let fv = grid(x.to_vec(), 2, 1, 1);
        let got = flat(stack.adapt(&fv, 2, (1, 1)).unwrap().tensor());
        for o in 0..3 {
            let mut acc = b[o];
            for i in 0..2 {
                acc += w[o][i] * x[i];
            }
            assert!((got[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn inject_is_elementwise_sum() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &dev).unwrap();
        let b = Tensor::new(&[[[[0.5f64, -2.0], [0.0, 1.0]]]], &dev).unwrap();
        assert_eq!(flat(&inject(&a, &b).unwrap()), vec![1.5, 0.0, 3.0, 5.0]);
        let z = a.zeros_like().unwrap();
        assert_eq!(flat(&inject(&a, &z).unwrap()), flat(&a));
        assert_eq!(flat(&inject(&z, &b).unwrap()), flat(&b));
        assert!(inject(&a, &b.narrow(3, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn level4_toggle_and_modes() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let s = AdapterStack::new(&mut p, 4, [4; 4], InjectionMode::Learned, false, AdapterInit::Scaled).unwrap();
        assert!(s.is_active(3) && !s.is_active(4));
        assert_eq!(p.len(), 6);
        let mut q = ParamStore::new(0, DType::F64, &Device::Cpu);
        let s = AdapterStack::new(&mut q, 4, [4; 4], InjectionMode::Interpolation, true, AdapterInit::Scaled).unwrap();
        assert!(q.is_empty() && s.is_active(4));
        let s = AdapterStack::new(&mut q, 4, [4; 4], InjectionMode::Disabled, true, AdapterInit::Scaled).unwrap();
        assert!(!s.is_active(1));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let s = AdapterStack::new(&mut p, 4, [4; 4], InjectionMode::Learned, true, AdapterInit::Scaled).unwrap();
        let fv = grid(vec![0.0; 5], 5, 1, 1);
        assert!(s.adapt(&fv, 1, (2, 2)).is_err());
        assert!(s.adapt(&grid(vec![0.0; 4], 4, 1, 1), 5, (2, 2)).is_err());
    }
}
