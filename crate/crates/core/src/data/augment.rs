use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// SpecAugment frequency/time masking. Masked cells are set to 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            freq_masks: 2,
            max_freq_width: 10,
            time_masks: 2,
            max_time_width: 50,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

pub fn spec_augment(features: &Tensor, policy: &AugmentPolicy, seed: u64) -> Tensor {
    let mut out = features.clone();
    if !policy.enabled {
        return out;
    }
    let (frames, dim) = (features.rows(), features.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..policy.freq_masks {
        let width = rng.random_range(0..=policy.max_freq_width).min(dim);
        let start = rng.random_range(0..=dim - width);
        for t in 0..frames {
            out.row_mut(t)[start..start + width].fill(0.0);
        }
    }
    for _ in 0..policy.time_masks {
        let width = rng.random_range(0..=policy.max_time_width).min(frames);
        let start = rng.random_range(0..=frames - width);
        for t in start..start + width {
            out.row_mut(t).fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::full(&[rows, cols], 1.0)
    }

    #[test]
    fn disabled_is_identity() {
        let m = ones(10, 8);
        assert_eq!(spec_augment(&m, &AugmentPolicy::disabled(), 3), m);
    }

    #[test]
    fn single_frequency_mask_is_bounded() {
        let policy = AugmentPolicy {
            enabled: true,
            freq_masks: 1,
            max_freq_width: 2,
            time_masks: 0,
            max_time_width: 0,
        };
        for seed in 0..50 {
            let out = spec_augment(&ones(10, 80), &policy, seed);
            let zero_cols: Vec<usize> = (0..80).filter(|&c| out.at(0, c) == 0.0).collect();
            assert!(zero_cols.len() <= 2);
            for c in &zero_cols {
                assert!((0..10).all(|t| out.at(t, *c) == 0.0));
            }
        }
    }

    #[test]
    fn deterministic_and_clamped() {
        let policy = AugmentPolicy::default();
        let m = ones(7, 4);
        let a = spec_augment(&m, &policy, 9);
        assert_eq!(a, spec_augment(&m, &policy, 9));
        assert_eq!((a.rows(), a.cols()), (7, 4));
    }
}
