//! Training augmentations. Geometric ops move image and mask together;
//! photometric ops touch the image only and clamp to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::synth::SegmentationSample;
use super::transforms::{hflip, rot90, vflip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate90: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub gamma: bool,
    pub noise: bool,
    /// Probability of each flip and of a rotation.
    pub p_geometric: f64,
    /// Additive shift drawn from `[-b, b]`.
    pub brightness_delta: f32,
    pub contrast_range: (f32, f32),
    pub gamma_range: (f32, f32),
    /// Noise sigma drawn from `[0, s]`.
    pub noise_sigma_max: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotate90: true,
            brightness: true,
            contrast: true,
            gamma: true,
            noise: true,
            p_geometric: 0.5,
            brightness_delta: 0.2,
            contrast_range: (0.8, 1.2),
            gamma_range: (0.7, 1.5),
            noise_sigma_max: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: false,
            vflip: false,
            rotate90: false,
            brightness: false,
            contrast: false,
            gamma: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn geometric_only() -> Self {
        Self {
            brightness: false,
            contrast: false,
            gamma: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |field: &str, (lo, hi): (f32, f32), (min, max): (f32, f32)| {
            if lo <= hi && lo >= min && hi <= max {
                Ok(())
            } else {
                Err(Error::config(field, format!("range ({lo}, {hi}) must lie within [{min}, {max}]")))
            }
        };
        if !(0.0..=1.0).contains(&self.p_geometric) {
            return Err(Error::config("augment.p_geometric", "must lie in [0, 1]"));
        }
        within("augment.brightness_delta", (0.0, self.brightness_delta), (0.0, 0.2))?;
        within("augment.contrast_range", self.contrast_range, (0.8, 1.2))?;
        within("augment.gamma_range", self.gamma_range, (0.7, 1.5))?;
        within("augment.noise_sigma_max", (0.0, self.noise_sigma_max), (0.0, 0.05))
    }
}

/// Applies `cfg` with randomness drawn only from `seed`.
pub fn augment(sample: &SegmentationSample, cfg: &AugmentConfig, seed: u64) -> SegmentationSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    let p = cfg.p_geometric;
    if cfg.hflip && rng.random_bool(p) {
        out.image = hflip(&out.image);
        out.mask = hflip(&out.mask);
    }
    if cfg.vflip && rng.random_bool(p) {
        out.image = vflip(&out.image);
        out.mask = vflip(&out.mask);
    }
    if cfg.rotate90 && rng.random_bool(p) {
        let k = rng.random_range(1..=3);
        out.image = rot90(&out.image, k);
        out.mask = rot90(&out.mask, k);
    }
    let photometric = cfg.brightness || cfg.contrast || cfg.gamma || cfg.noise;
    if !photometric {
        return out;
    }
    let shift = if cfg.brightness {
        rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta)
    } else {
        0.0
    };
    let contrast = if cfg.contrast {
        rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1)
    } else {
        1.0
    };
    let gamma = if cfg.gamma {
        rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1)
    } else {
        1.0
    };
    let sigma = if cfg.noise {
        rng.random_range(0.0..=cfg.noise_sigma_max)
    } else {
        0.0
    };
    let mean = out.image.sum() / out.image.numel() as f32;
    let noise = Normal::new(0.0f32, sigma).expect("sigma is non-negative");
    for v in out.image.data_mut() {
        let mut x = ((*v - mean) * contrast + mean + shift).clamp(0.0, 1.0);
        x = x.powf(gamma);
        if sigma > 0.0 {
            x += noise.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, Difficulty};

    #[test]
    fn disabled_is_identity() {
        let s = synth_sample(1, 64, Difficulty::Irregular).unwrap();
        assert_eq!(augment(&s, &AugmentConfig::disabled(), 9), s);
    }

    #[test]
    fn geometric_preserves_area_and_binarity() {
        let s = synth_sample(2, 64, Difficulty::Regular).unwrap();
        for seed in 0..20 {
            let a = augment(&s, &AugmentConfig::default(), seed);
            assert_eq!(a.mask.sum(), s.mask.sum());
            assert!(a.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(augment(&s, &AugmentConfig::default(), seed), a);
        }
    }

    #[test]
    fn out_of_range_config_rejected() {
        let cfg = AugmentConfig {
            gamma_range: (0.5, 1.5),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        AugmentConfig::default().validate().unwrap();
    }
}
