//! Power normalization, SNR <-> noise-variance conversion, and the AWGN
//! channel. Real-valued symbols; SNR is defined per real dimension at unit
//! mean power, so `sigma2 = power / 10^(snr_db/10)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::scalar::{s, Scalar};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Noise variance for a given SNR in dB at the given mean symbol power.
pub fn snr_to_sigma2(snr_db: f64, power: f64) -> Result<f64> {
    if power <= 0.0 {
        return Err(Error::Domain(format!(
            "mean symbol power must be positive, got {power}"
        )));
    }
    Ok(power / 10f64.powf(snr_db / 10.0))
}

/// Scale a sequence to unit mean-square entry; returns the scale.
pub fn normalize_power<T: Scalar>(
    x: &FeatureSequence<T>,
) -> Result<(FeatureSequence<T>, T)> {
    let v = x.values();
    let n = s::<T>(v.len() as f64);
    let mean_sq = v.iter().map(|e| *e * *e).sum::<T>() / n;
    if mean_sq == T::zero() {
        return Err(Error::Degenerate(
            "cannot power-normalize an all-zero sequence".into(),
        ));
    }
    let scale = mean_sq.sqrt();
    let normalized = x.with_values(v.mapv(|e| e / scale))?;
    Ok((normalized, scale))
}

/// i.i.d. Gaussian noise matrix with per-entry variance `sigma2`.
///
/// Sampling happens in f64 so the draw stream is identical across scalar
/// types for the same seed.
pub fn gaussian_noise<T: Scalar>(
    rows: usize,
    cols: usize,
    sigma2: f64,
    seed: u64,
) -> Array2<T> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std = sigma2.sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        s::<T>(z * std)
    })
}

/// y = x + n with n ~ N(0, sigma2) per real entry; deterministic given seed.
pub fn awgn<T: Scalar>(
    x: &FeatureSequence<T>,
    sigma2: f64,
    seed: u64,
) -> Result<FeatureSequence<T>> {
    if sigma2 < 0.0 {
        return Err(Error::Domain(format!(
            "noise variance must be non-negative, got {sigma2}"
        )));
    }
    if sigma2 == 0.0 {
        return Ok(x.clone());
    }
    let noise = gaussian_noise::<T>(x.rows(), x.dim(), sigma2, seed);
    x.with_values(x.values() + &noise)
}

/// Uniform training SNR draw from [low_db, high_db]; deterministic given seed.
pub fn sample_training_snr(low_db: f64, high_db: f64, seed: u64) -> Result<f64> {
    if low_db > high_db {
        return Err(Error::Usage(format!(
            "inverted SNR range [{low_db}, {high_db}]"
        )));
    }
    if low_db == high_db {
        return Ok(low_db);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(rng.gen_range(low_db..=high_db))
}

impl<T: Scalar> Tape<T> {
    /// Power-normalized AWGN transmission of the kept rows of a stacked batch.
    ///
    /// Per segment: the mean-square power P of the kept rows (mask >= 0.5) is
    /// computed, and each row becomes `m_i * (x_i + sqrt(P) * n_i)` where n
    /// has per-entry variance sigma2. This is normalize -> AWGN -> rescale
    /// fused: the receiver sees features at their native scale with effective
    /// SNR = 1/sigma2. The kept-row structure inside the power term is hard
    /// side information; gradients flow through the symbol values and the
    /// mask multiplication.
    pub fn channel_transmit(
        &mut self,
        x: Var,
        mask: Var,
        lens: &[usize],
        noise: &Array2<T>,
    ) -> Var {
        let (rows, cols) = self.value(x).dim();
        assert_eq!(noise.dim(), (rows, cols));
        assert_eq!(self.value(mask).dim(), (rows, 1));
        let half = s::<T>(0.5);

        // Per-segment scale from kept rows.
        let mut scales: Vec<T> = Vec::with_capacity(lens.len());
        {
            let xv = self.value(x);
            let mv = self.value(mask);
            let mut at = 0;
            for &len in lens {
                let mut power = T::zero();
                let mut kept = 0usize;
                for i in at..at + len {
                    if mv[[i, 0]] >= half {
                        kept += 1;
                        for c in 0..cols {
                            power += xv[[i, c]] * xv[[i, c]];
                        }
                    }
                }
                let scale = if kept == 0 {
                    T::one()
                } else {
                    (power / s::<T>((kept * cols) as f64)).sqrt().max(s(1e-12))
                };
                scales.push(scale);
                at += len;
            }
        }

        // Scaled noise as a constant, then y = (x + n') * m.
        let mut scaled = noise.clone();
        let mut at = 0;
        for (si, &len) in lens.iter().enumerate() {
            let k = scales[si];
            scaled
                .slice_mut(ndarray::s![at..at + len, ..])
                .mapv_inplace(|v| v * k);
            at += len;
        }
        let n = self.constant(scaled);
        let noisy = self.add(x, n);
        self.mul_col(noisy, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    fn seq(values: Array2<f64>) -> FeatureSequence<f64> {
        FeatureSequence::new(values, Modality::Image).unwrap()
    }

    #[test]
    fn snr_conversion_matches_hand_values() {
        assert_relative_eq!(snr_to_sigma2(0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(snr_to_sigma2(10.0, 1.0).unwrap(), 0.1, max_relative = 1e-12);
        assert_relative_eq!(
            snr_to_sigma2(12.0, 1.0).unwrap(),
            0.06309573444801933,
            max_relative = 1e-12
        );
        assert!(snr_to_sigma2(0.0, 0.0).is_err());
        assert!(snr_to_sigma2(0.0, -1.0).is_err());
    }

    #[test]
    fn normalize_power_hand_case() {
        let x = seq(arr2(&[[2.0, 2.0], [2.0, 2.0]]));
        let (y, scale) = normalize_power(&x).unwrap();
        assert_relative_eq!(scale, 2.0);
        for v in y.values() {
            assert_relative_eq!(*v, 1.0);
        }
    }

    #[test]
    fn normalize_power_idempotent_and_degenerate() {
        let x = seq(arr2(&[[1.0, -1.0], [1.0, -1.0]]));
        let (y, scale) = normalize_power(&x).unwrap();
        assert_relative_eq!(scale, 1.0);
        assert_eq!(y.values(), x.values());
        let zero = seq(Array2::zeros((2, 2)));
        assert!(matches!(
            normalize_power(&zero),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn awgn_noiseless_is_identity_and_seeded() {
        let x = seq(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let y = awgn(&x, 0.0, 1).unwrap();
        assert_eq!(y.values(), x.values());
        let a = awgn(&x, 0.5, 42).unwrap();
        let b = awgn(&x, 0.5, 42).unwrap();
        assert_eq!(a.values(), b.values());
        let c = awgn(&x, 0.5, 43).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn awgn_empirical_variance_matches_sigma2() {
        let x = seq(Array2::zeros((1000, 100)));
        let y = awgn(&x, 0.5, 7).unwrap();
        let var = y.values().iter().map(|v| v * v).sum::<f64>() / 1e5;
        assert!(
            (0.49..=0.51).contains(&var),
            "empirical variance {var} outside [0.49, 0.51]"
        );
    }

    #[test]
    fn training_snr_bounds_and_mean() {
        for seed in 0..50 {
            let v = sample_training_snr(0.0, 12.0, seed).unwrap();
            assert!((0.0..=12.0).contains(&v));
        }
        assert_eq!(sample_training_snr(5.0, 5.0, 9).unwrap(), 5.0);
        assert!(sample_training_snr(3.0, 1.0, 0).is_err());
        let mean = (0..10_000)
            .map(|i| sample_training_snr(0.0, 12.0, i).unwrap())
            .sum::<f64>()
            / 1e4;
        assert!(
            (5.8..=6.2).contains(&mean),
            "mean {mean} outside 6 +/- 0.2"
        );
    }

    proptest::proptest! {
        /// Mean-square of a power-normalized sequence is 1 to 1e-9.
        #[test]
        fn normalized_mean_square_is_unit(
            rows in 1usize..8, cols in 1usize..8, scale in 0.01f64..50.0, seed in 0u64..1000
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0) * scale + 0.01);
            let x = seq(v);
            let (y, _) = normalize_power(&x).unwrap();
            let ms = y.values().iter().map(|e| e * e).sum::<f64>() / (rows * cols) as f64;
            proptest::prop_assert!((ms - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_transmit_noiseless_keeps_kept_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let m = tape.constant(arr2(&[[1.0], [0.0], [1.0]]));
        let noise = Array2::zeros((3, 2));
        let y = tape.channel_transmit(x, m, &[3], &noise);
        assert_eq!(
            tape.value(y),
            &arr2(&[[1.0, 2.0], [0.0, 0.0], [5.0, 6.0]])
        );
    }

    #[test]
    fn channel_transmit_noise_scales_with_signal_power() {
        // Signal power 4 (entries +-2) -> scale 2 -> received noise doubled.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[2.0, -2.0], [2.0, 2.0]]));
        let m = tape.constant(arr2(&[[1.0], [1.0]]));
        let noise = arr2(&[[0.1, 0.1], [-0.1, 0.1]]);
        let y = tape.channel_transmit(x, m, &[2], &noise);
        assert_eq!(
            tape.value(y),
            &arr2(&[[2.2, -1.8], [1.8, 2.2]])
        );
    }
}
