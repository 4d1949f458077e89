use super::{ConvSpec, CounterRng, Tensor};

/// He-normal weights: N(0, sqrt(2 / fan_in)) with fan_in = Cin * kz * ky * kx.
///
/// Returned in conv layout `(Cout, Cin, kz, ky, kx)`; reshape for transpose
/// convolutions, which share the element count.
pub fn he_normal_init(spec: &ConvSpec, seed: u64) -> Tensor {
    let fan_in = spec.in_channels * spec.taps();
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = CounterRng::new(seed);
    let dims = spec.weight_dims();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(dims, data).expect("weight dims are valid")
}

pub fn zero_bias(spec: &ConvSpec) -> Tensor {
    Tensor::zeros(&[spec.out_channels]).expect("channel count >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_std_matches_fan_in() {
        let spec = ConvSpec::new(64, 64, [3, 3, 3]);
        let w = he_normal_init(&spec, 11);
        assert_eq!(w.len(), 64 * 64 * 27);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / (64.0 * 27.0)).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = ConvSpec::new(4, 8, [3, 1, 1]);
        assert_eq!(he_normal_init(&spec, 5), he_normal_init(&spec, 5));
        assert_ne!(he_normal_init(&spec, 5), he_normal_init(&spec, 6));
    }

    #[test]
    fn bias_is_zero() {
        let b = zero_bias(&ConvSpec::new(4, 8, [3, 3, 3]));
        assert_eq!(b.dims(), &[8]);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
}
