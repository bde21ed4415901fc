//! Adaptive augmentation driven by local-vs-reference statistics.
//!
//! Each image is compared against the EMA reference of the stream it
//! belongs to. A darker-than-reference image earns a brightness gain above
//! one, a flatter-than-reference image earns a contrast gain above one,
//! and the size of the statistics gap sets the amplitude of additive
//! Gaussian noise. With matched statistics the transform degenerates to an
//! exact identity, which is what anchors the whole scheme: augmentation
//! strength is proportional to how atypical the image is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{batch_stats, local_stats, EmaScalarPair, ImageBuffer, ScalarStats};

/// Floor for the reference denominators; a near-black or near-flat
/// reference would otherwise blow the gains up.
const DENOM_FLOOR: f64 = 1e-6;

/// Clamp interval for the brightness and contrast multipliers.
const GAIN_CLAMP: (f64, f64) = (0.25, 4.0);

/// Upper clamp for the noise amplitude.
const ETA_MAX: f64 = 0.5;

/// Sensitivity gains for parameter derivation.
///
/// `k1` and `k2` scale the brightness and contrast response and live in
/// `[0.5, 1.5]`; `k3` scales the noise response and lives in `[0.01, 0.1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl AugGains {
    pub fn new(k1: f64, k2: f64, k3: f64) -> Result<Self> {
        for (name, v, lo, hi) in [
            ("k1", k1, 0.5, 1.5),
            ("k2", k2, 0.5, 1.5),
            ("k3", k3, 0.01, 0.1),
        ] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Argument(format!("{name} {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(Self { k1, k2, k3 })
    }
}

impl Default for AugGains {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 1.0,
            k3: 0.05,
        }
    }
}

/// Per-image augmentation parameters: brightness `alpha`, contrast `beta`,
/// noise amplitude `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl AugParams {
    /// Identity transform.
    pub const IDENTITY: AugParams = AugParams {
        alpha: 1.0,
        beta: 1.0,
        eta: 0.0,
    };
}

/// Seed for the per-pixel standard-normal noise field.
///
/// The same seed, image, and parameters always reproduce the same output
/// bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSeed(pub u64);

impl NoiseSeed {
    /// Independent seed for item `index` of a batch.
    pub fn child(self, index: u64) -> NoiseSeed {
        NoiseSeed(rng::child_seed(self.0, index))
    }
}

/// Derives `(alpha, beta, eta)` from the gap between local statistics and
/// the EMA reference:
///
/// ```text
/// alpha = 1 + k1 * (mu_ref - mu) / max(mu_ref, 1e-6)
/// beta  = 1 + k2 * (sigma_ref - sigma) / max(sigma_ref, 1e-6)
/// eta   =     k3 * |sigma_ref - sigma| / max(sigma_ref, 1e-6)
/// ```
///
/// `alpha` and `beta` are clamped to `[0.25, 4.0]`, `eta` to `[0, 0.5]`.
pub fn derive_params(
    local: ScalarStats,
    reference: &EmaScalarPair,
    gains: &AugGains,
) -> Result<AugParams> {
    if !reference.initialized {
        return Err(Error::State(
            "augmentation reference not initialized; feed it a batch first".into(),
        ));
    }
    let mu_den = reference.mu_ref.max(DENOM_FLOOR);
    let sigma_den = reference.sigma_ref.max(DENOM_FLOOR);
    let alpha = 1.0 + gains.k1 * (reference.mu_ref - local.mean) / mu_den;
    let beta = 1.0 + gains.k2 * (reference.sigma_ref - local.std) / sigma_den;
    let eta = gains.k3 * (reference.sigma_ref - local.std).abs() / sigma_den;
    Ok(AugParams {
        alpha: alpha.clamp(GAIN_CLAMP.0, GAIN_CLAMP.1),
        beta: beta.clamp(GAIN_CLAMP.0, GAIN_CLAMP.1),
        eta: eta.clamp(0.0, ETA_MAX),
    })
}

/// Applies `beta * alpha * x + eta * eps(u, v)` per pixel and clamps the
/// result to `[0, 1]`. The noise field is standard normal, keyed on
/// `(seed, pixel index)`, so the output is reproducible and independent of
/// evaluation order. The input is left untouched.
pub fn apply_augmentation(image: &ImageBuffer, params: &AugParams, seed: NoiseSeed) -> ImageBuffer {
    let gain = params.beta * params.alpha;
    let data: Vec<f64> = if params.eta > 0.0 {
        image
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &x)| (gain * x + params.eta * rng::normal(seed.0, i as u64)).clamp(0.0, 1.0))
            .collect()
    } else {
        image
            .pixels()
            .iter()
            .map(|&x| (gain * x).clamp(0.0, 1.0))
            .collect()
    };
    ImageBuffer::from_clamped(image.width(), image.height(), data)
}

/// Augments a batch: advances the EMA reference once with the batch
/// statistics, then derives and applies per-image parameters against the
/// post-update reference.
///
/// The update-then-derive order makes the very first batch an identity
/// transform: the freshly seeded reference equals the batch statistics.
/// Image `i` of the batch draws its noise from `seed.child(i)`.
pub fn augment_batch(
    images: &[ImageBuffer],
    state: &mut EmaScalarPair,
    gains: &AugGains,
    seed: NoiseSeed,
) -> Result<Vec<ImageBuffer>> {
    let batch = batch_stats(images)?;
    state.update(batch);
    images
        .iter()
        .enumerate()
        .map(|(i, image)| {
            let local = local_stats(image, image.full_region())?;
            let params = derive_params(local, state, gains)?;
            Ok(apply_augmentation(image, &params, seed.child(i as u64)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Region;

    fn img(w: usize, h: usize, data: &[f64]) -> ImageBuffer {
        ImageBuffer::new(w, h, data.to_vec()).unwrap()
    }

    fn reference(mu: f64, sigma: f64, rho: f64) -> EmaScalarPair {
        let mut r = EmaScalarPair::new(rho).unwrap();
        r.update(ScalarStats {
            mean: mu,
            std: sigma,
        });
        r
    }

    #[test]
    fn derive_matched_stats_is_identity() {
        let r = reference(0.5, 0.2, 0.05);
        let p = derive_params(r.stats(), &r, &AugGains::default()).unwrap();
        assert_eq!(p, AugParams::IDENTITY);
    }

    #[test]
    fn derive_hand_example() {
        let r = reference(0.6, 0.2, 0.05);
        let gains = AugGains::new(1.0, 1.0, 0.05).unwrap();
        let local = ScalarStats {
            mean: 0.3,
            std: 0.1,
        };
        let p = derive_params(local, &r, &gains).unwrap();
        assert!((p.alpha - 1.5).abs() < 1e-12);
        assert!((p.beta - 1.5).abs() < 1e-12);
        assert!((p.eta - 0.025).abs() < 1e-12);
    }

    #[test]
    fn derive_guard_path_clamps() {
        // Reference mean of zero hits the denominator floor and the
        // resulting huge negative gain clamps to the lower bound.
        let mut r = EmaScalarPair::new(0.05).unwrap();
        r.update(ScalarStats { mean: 0.0, std: 0.0 });
        let local = ScalarStats {
            mean: 0.5,
            std: 0.0,
        };
        let p = derive_params(local, &r, &AugGains::new(1.0, 1.0, 0.05).unwrap()).unwrap();
        assert_eq!(p.alpha, 0.25);
    }

    #[test]
    fn derive_requires_initialized_reference() {
        let r = EmaScalarPair::new(0.05).unwrap();
        let local = ScalarStats {
            mean: 0.5,
            std: 0.1,
        };
        assert!(matches!(
            derive_params(local, &r, &AugGains::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn apply_identity_params_is_bitwise_identity() {
        let im = img(3, 2, &[0.0, 0.25, 0.5, 0.75, 1.0, 0.4]);
        let out = apply_augmentation(&im, &AugParams::IDENTITY, NoiseSeed(9));
        assert_eq!(im, out);
    }

    #[test]
    fn apply_pure_gain() {
        let im = img(1, 1, &[0.4]);
        let p = AugParams {
            alpha: 1.5,
            beta: 1.5,
            eta: 0.0,
        };
        let out = apply_augmentation(&im, &p, NoiseSeed(0));
        assert!((out.pixels()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn apply_noise_is_seed_deterministic() {
        let im = ImageBuffer::filled(8, 8, 0.5).unwrap();
        let p = AugParams {
            alpha: 1.0,
            beta: 1.0,
            eta: 0.1,
        };
        let a = apply_augmentation(&im, &p, NoiseSeed(7));
        let b = apply_augmentation(&im, &p, NoiseSeed(7));
        let c = apply_augmentation(&im, &p, NoiseSeed(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn apply_output_in_range() {
        let im = img(2, 2, &[0.0, 0.9, 0.99, 1.0]);
        let p = AugParams {
            alpha: 4.0,
            beta: 4.0,
            eta: 0.5,
        };
        let out = apply_augmentation(&im, &p, NoiseSeed(3));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn monotone_brightness_response() {
        // Darker than reference -> alpha above one; brighter -> below.
        let r = reference(0.5, 0.2, 0.05);
        let gains = AugGains::default();
        let dark = ScalarStats {
            mean: 0.3,
            std: 0.2,
        };
        let bright = ScalarStats {
            mean: 0.7,
            std: 0.2,
        };
        assert!(derive_params(dark, &r, &gains).unwrap().alpha > 1.0);
        assert!(derive_params(bright, &r, &gains).unwrap().alpha < 1.0);
    }

    #[test]
    fn batch_fixed_point_is_bitwise_identity() {
        // Two images with identical statistics (one is a pixel permutation
        // of the other) seed the reference, then pass through unchanged.
        let a = img(2, 2, &[0.1, 0.4, 0.6, 0.9]);
        let b = img(2, 2, &[0.9, 0.6, 0.4, 0.1]);
        let batch = vec![a, b];
        let mut state = EmaScalarPair::new(0.05).unwrap();
        let first = augment_batch(&batch, &mut state, &AugGains::default(), NoiseSeed(1)).unwrap();
        assert_eq!(first, batch);
        let snapshot = state.clone();
        let second = augment_batch(&batch, &mut state, &AugGains::default(), NoiseSeed(2)).unwrap();
        assert_eq!(second, batch);
        assert_eq!(state, snapshot);
    }

    #[test]
    fn batch_seeds_uninitialized_state() {
        let im = img(2, 2, &[0.2, 0.4, 0.4, 0.6]);
        let mut state = EmaScalarPair::new(0.1).unwrap();
        let out = augment_batch(
            std::slice::from_ref(&im),
            &mut state,
            &AugGains::default(),
            NoiseSeed(0),
        )
        .unwrap();
        assert!(state.initialized);
        let s = local_stats(&im, im.full_region()).unwrap();
        assert_eq!(state.mu_ref, s.mean);
        assert_eq!(state.sigma_ref, s.std);
        assert_eq!(out[0], im);
    }

    #[test]
    fn batch_ema_chain_example() {
        let mut state = EmaScalarPair::new(0.1).unwrap();
        let gains = AugGains::default();
        let b1 = vec![ImageBuffer::filled(4, 4, 0.3).unwrap()];
        let b2 = vec![ImageBuffer::filled(4, 4, 0.7).unwrap()];
        augment_batch(&b1, &mut state, &gains, NoiseSeed(0)).unwrap();
        augment_batch(&b2, &mut state, &gains, NoiseSeed(0)).unwrap();
        assert!((state.mu_ref - 0.34).abs() < 1e-12);
    }

    #[test]
    fn batch_replay_from_snapshot_is_bit_exact() {
        let images = vec![
            img(2, 2, &[0.1, 0.3, 0.5, 0.7]),
            img(2, 2, &[0.9, 0.8, 0.2, 0.1]),
        ];
        let mut warm = EmaScalarPair::new(0.05).unwrap();
        warm.update(ScalarStats {
            mean: 0.6,
            std: 0.25,
        });
        let gains = AugGains::default();

        let mut s1 = warm.clone();
        let out1 = augment_batch(&images, &mut s1, &gains, NoiseSeed(42)).unwrap();
        let mut s2 = warm.clone();
        let out2 = augment_batch(&images, &mut s2, &gains, NoiseSeed(42)).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn augmented_region_stats_stay_valid() {
        let im = img(4, 4, &(0..16).map(|i| i as f64 / 15.0).collect::<Vec<_>>());
        let p = AugParams {
            alpha: 2.0,
            beta: 1.2,
            eta: 0.05,
        };
        let out = apply_augmentation(&im, &p, NoiseSeed(11));
        let s = local_stats(&out, Region::new(0, 0, 4, 4).unwrap()).unwrap();
        assert!(s.std >= 0.0 && (0.0..=1.0).contains(&s.mean));
    }
}
