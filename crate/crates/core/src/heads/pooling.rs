use candle_core::Tensor;

use crate::aggregator::FusedFeatureMap;
use crate::error::Result;

/// Per-channel maximum over all spatial positions: `[B, d]`.
pub fn pool_global(f: &FusedFeatureMap) -> Result<Tensor> {
    Ok(f.tensor().flatten_from(2)?.max(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn constant_map_pools_to_constant() {
        let t = Tensor::full(0.7f64, (2, 3, 60, 60), &Device::Cpu).unwrap();
        let p = pool_global(&FusedFeatureMap::new(t).unwrap()).unwrap();
        assert_eq!(p.to_vec2::<f64>().unwrap(), vec![vec![0.7; 3]; 2]);
    }

    #[test]
    fn spikes_are_recovered() {
        let mut v = vec![-1.0f64; 2 * 3600];
        v[17] = 5.0;
        v[3600 + 3599] = 2.5;
        let t = Tensor::from_vec(v, (1, 2, 60, 60), &Device::Cpu).unwrap();
        let p = pool_global(&FusedFeatureMap::new(t).unwrap()).unwrap();
        assert_eq!(p.to_vec2::<f64>().unwrap(), vec![vec![5.0, 2.5]]);
    }
}
