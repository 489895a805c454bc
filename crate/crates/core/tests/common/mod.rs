#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchfeat::Result;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

/// Relative error with a floor so vanishing gradients compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_var(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Var {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn eval(f: &dyn Fn() -> Result<Tensor>) -> f64 {
    f().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Largest relative error between the autodiff gradient of `f` and central
/// differences, over the listed flat coordinates of each variable (all of
/// them when `None`).
pub fn max_fd_error(vars: &[(&str, &Var, Option<Vec<usize>>)], f: &dyn Fn() -> Result<Tensor>, step: f64) -> f64 {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut worst = 0f64;
    for (name, var, coords) in vars {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = flat(var.as_tensor());
        let shape = var.dims().to_vec();
        let coords = coords.clone().unwrap_or_else(|| (0..base.len()).collect());
        for i in coords {
            let set = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
                var.set(&t).unwrap();
            };
            set(step);
            let up = eval(f);
            set(-step);
            let down = eval(f);
            set(0.0);
            let numeric = (up - down) / (2.0 * step);
            let e = relative_error(analytic[i], numeric);
            if e > worst {
                worst = e;
                if e > FD_TOLERANCE {
                    eprintln!("{name}[{i}]: analytic {} numeric {numeric} (rel {e:.2e})", analytic[i]);
                }
            }
        }
    }
    worst
}

/// `count` distinct coordinates below `n`.
pub fn sample_coords(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

pub mod grad;
pub mod oracle;
pub mod fixture;
