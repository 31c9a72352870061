//! Weight initialization. Draws are always made in 64-bit and cast to the
//! target scalar type, so an `f32` run and an `f64` run from the same seed
//! agree to `f32` precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Real, Tensor};

/// Standard deviation for a fan-in scaled normal draw with a rectifier of
/// the given negative slope: `gain / sqrt(fan_in)` with
/// `gain = sqrt(2 / (1 + slope^2))`. Slope 1 gives gain 1.
pub fn fan_in_std(fan_in: usize, neg_slope: f64) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::Config("fan_in must be >= 1".into()));
    }
    let gain = (2.0 / (1.0 + neg_slope * neg_slope)).sqrt();
    Ok(gain / (fan_in as f64).sqrt())
}

/// Fills a tensor of the given shape with normal draws of standard deviation
/// [`fan_in_std`], consuming the RNG in row-major element order.
pub fn kaiming_tensor<T: Real>(
    shape: Vec<usize>,
    fan_in: usize,
    neg_slope: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let std = fan_in_std(fan_in, neg_slope)?;
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("bad normal: {}", e)))?;
    let mut out = Tensor::zeros(shape)?;
    for v in out.data_mut() {
        *v = T::from_f64(dist.sample(rng));
    }
    Ok(out)
}

/// Convolution layer with fan-in scaled weights (`fan_in = in_c * k_h * k_w`)
/// and zero bias.
pub fn kaiming_conv<T: Real>(
    out_c: usize,
    in_c: usize,
    kernel: usize,
    neg_slope: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ConvParams<T>> {
    let fan_in = in_c * kernel * kernel;
    let weights = kaiming_tensor(vec![out_c, in_c, kernel, kernel], fan_in, neg_slope, rng)?;
    let padding = (kernel - 1) / 2;
    ConvParams::new(weights, vec![T::zero(); out_c], 1, padding)
}

/// Deterministic RNG for a given seed; all initialization in the crate goes
/// through this constructor.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_one_means_unit_gain() {
        assert!((fan_in_std(16, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((fan_in_std(1, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn slope_zero_recovers_sqrt_two_gain() {
        let std = fan_in_std(8, 0.0).unwrap();
        assert!((std - (2.0f64 / 8.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let a: Tensor<f64> =
            kaiming_tensor(vec![4, 4], 4, 1.0, &mut seeded_rng(7)).unwrap();
        let b: Tensor<f64> =
            kaiming_tensor(vec![4, 4], 4, 1.0, &mut seeded_rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_std_tracks_fan_in() {
        let fan_in = 64;
        let t: Tensor<f64> =
            kaiming_tensor(vec![200, 200], fan_in, 1.0, &mut seeded_rng(0)).unwrap();
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 1.0 / fan_in as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "var {} vs {}", var, expected);
    }

    #[test]
    fn f32_draws_match_f64_draws() {
        let a: Tensor<f32> = kaiming_tensor(vec![16], 4, 1.0, &mut seeded_rng(3)).unwrap();
        let b: Tensor<f64> = kaiming_tensor(vec![16], 4, 1.0, &mut seeded_rng(3)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
