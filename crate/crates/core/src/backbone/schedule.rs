//! Forward-diffusion noise schedule and closed-form noising.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LatentBatch;
use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleParams {
    /// β_t linear in t from `beta_start` to `beta_end`.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// √β_t linear in t (the convention the released latent-diffusion
    /// checkpoints were trained with).
    ScaledLinearBeta { beta_start: f64, beta_end: f64 },
    /// Explicit per-step α_t.
    Alphas(Vec<f64>),
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams::LinearBeta {
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// ᾱ_t for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

fn interpolate(start: f64, end: f64, i: usize, steps: usize) -> f64 {
    if steps == 1 {
        start
    } else {
        start + (end - start) * i as f64 / (steps - 1) as f64
    }
}

pub fn build_noise_schedule(steps: usize, params: &ScheduleParams) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let alphas: Vec<f64> = match params {
        ScheduleParams::LinearBeta {
            beta_start,
            beta_end,
        } => (0..steps)
            .map(|i| 1.0 - interpolate(*beta_start, *beta_end, i, steps))
            .collect(),
        ScheduleParams::ScaledLinearBeta {
            beta_start,
            beta_end,
        } => (0..steps)
            .map(|i| {
                let s = interpolate(beta_start.sqrt(), beta_end.sqrt(), i, steps);
                1.0 - s * s
            })
            .collect(),
        ScheduleParams::Alphas(a) => {
            if a.len() != steps {
                return Err(Error::InvalidArgument(format!(
                    "{} alphas supplied for a {steps}-step schedule",
                    a.len()
                )));
            }
            a.clone()
        }
    };
    if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidArgument(format!("alpha {bad} outside (0, 1)")));
    }
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) || alpha_bars[steps - 1] <= 0.0 {
        return Err(Error::InvalidArgument(
            "cumulative alpha products are not strictly decreasing".into(),
        ));
    }
    Ok(NoiseSchedule { alphas, alpha_bars })
}

/// √ᾱ·z0 + √(1−ᾱ)·ε, elementwise.
pub fn forward_diffuse(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise", z0.dims(), eps.dims()));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let signal = z0.affine(alpha_bar.sqrt(), 0.0)?;
    let noise = eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?;
    Ok((signal + noise)?)
}

pub fn add_noise(z0: &LatentBatch, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentBatch> {
    let alpha_bar = schedule.alpha_bar(t)?;
    LatentBatch::new(forward_diffuse(z0.tensor(), eps, alpha_bar)?)
}

/// Standard-normal noise, one independent stream per batch entry so that a
/// sample's noise does not depend on how it was batched.
pub fn sample_noise(dims: &[usize], seeds: &[u64], dtype: DType, device: &Device) -> Result<Tensor> {
    if dims.is_empty() || dims[0] != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "noise shape {dims:?} does not match {} seeds",
            seeds.len()
        )));
    }
    let per: usize = dims[1..].iter().product();
    let mut values = Vec::with_capacity(per * seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        values.extend((0..per).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }));
    }
    Ok(Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)
}
