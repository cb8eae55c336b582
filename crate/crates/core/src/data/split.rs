//! Seeded train/val/test splits and dataset assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::netpbm::{load_image_ppm, load_mask_pgm};
use super::synth::{synth_sample, Difficulty, SegmentationSample};
use super::transforms::normalize_imagenet;

/// Fractions of regular, irregular and low-contrast samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix(pub [f64; 3]);

impl Default for DifficultyMix {
    fn default() -> Self {
        Self([0.6, 0.25, 0.15])
    }
}

impl DifficultyMix {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.difficulty_mix", "fractions must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` samples.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact = self.0.map(|f| f * n as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

pub type SeedList = Vec<(u64, Difficulty)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: SeedList,
    pub val: SeedList,
    pub test: SeedList,
}

fn assign(seeds: std::ops::Range<u64>, mix: &DifficultyMix, rng: &mut ChaCha8Rng) -> SeedList {
    let counts = mix.counts((seeds.end - seeds.start) as usize);
    let mut tags: Vec<Difficulty> = Difficulty::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&d, c)| std::iter::repeat_n(d, c))
        .collect();
    tags.shuffle(rng);
    seeds.zip(tags).collect()
}

/// Contiguous, disjoint seed ranges starting at `base_seed`.
pub fn make_split(n_train: usize, n_val: usize, n_test: usize, base_seed: u64, mix: &DifficultyMix) -> Result<Split> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config("data", "train, val and test counts must be at least 1"));
    }
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let (a, b, c) = (n_train as u64, n_val as u64, n_test as u64);
    let train = assign(base_seed..base_seed + a, mix, &mut rng);
    let val = assign(base_seed + a..base_seed + a + b, mix, &mut rng);
    let test = assign(base_seed + a + b..base_seed + a + b + c, mix, &mut rng);
    Ok(Split { train, val, test })
}

/// `n` consecutive seeds from `base_seed` with shuffled difficulty tags.
pub fn tagged_seeds(n: usize, base_seed: u64, mix: &DifficultyMix) -> Result<SeedList> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    Ok(assign(base_seed..base_seed + n as u64, mix, &mut rng))
}

pub fn synth_set(seeds: &[(u64, Difficulty)], size: usize) -> Result<Vec<SegmentationSample>> {
    seeds.iter().map(|&(s, d)| synth_sample(s, size, d)).collect()
}

/// Stacks samples into a normalized image batch `[N, 3, H, W]` and a mask
/// batch `[N, 1, H, W]`.
pub fn to_batch(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images = samples
        .iter()
        .map(|s| normalize_imagenet(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Tensor<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// A named image with its optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct NamedPair {
    pub name: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Pairs `<name>.ppm` with `<name>_mask.pgm` in `dir`. Unpaired files are
/// listed in the error.
pub fn scan_dataset_dir(dir: &Path) -> Result<Vec<NamedPair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(stem) = file.strip_suffix("_mask.pgm") {
            masks.insert(stem.to_string(), path);
        } else if let Some(stem) = file.strip_suffix(".ppm") {
            images.insert(stem.to_string(), path);
        }
    }
    let unpaired: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(|k| format!("{k}.ppm"))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)).map(|k| format!("{k}_mask.pgm")))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unpaired files in {}: {}",
            dir.display(),
            unpaired.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("no image/mask pairs in {}", dir.display())));
    }
    Ok(images
        .into_iter()
        .map(|(name, image_path)| {
            let mask_path = masks.remove(&name).expect("paired above");
            NamedPair {
                name,
                image_path,
                mask_path,
            }
        })
        .collect())
}

/// Loads every pair of a dataset directory. Samples get seed 0 and the
/// regular tag.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<(String, SegmentationSample)>> {
    scan_dataset_dir(dir)?
        .into_iter()
        .map(|p| {
            let image = load_image_ppm(&p.image_path)?;
            let mask = load_mask_pgm(&p.mask_path)?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(Error::Shape(format!("{}: image and mask sizes differ", p.name)));
            }
            Ok((
                p.name,
                SegmentationSample {
                    image,
                    mask,
                    seed: 0,
                    difficulty: Difficulty::Regular,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let mix = DifficultyMix::default();
        let s = make_split(40, 10, 7, 1000, &mix).unwrap();
        let all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).map(|p| p.0).collect();
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), all.len());
        assert_eq!(make_split(40, 10, 7, 1000, &mix).unwrap(), s);
        assert!(make_split(0, 1, 1, 0, &mix).is_err());
    }

    #[test]
    fn proportions_within_one_sample() {
        let mix = DifficultyMix::default();
        for n in [1usize, 7, 10, 33, 200] {
            let counts = mix.counts(n);
            assert_eq!(counts.iter().sum::<usize>(), n);
            for (c, f) in counts.iter().zip(mix.0) {
                assert!((*c as f64 - f * n as f64).abs() <= 1.0, "n {n}: {counts:?}");
            }
        }
        let s = make_split(200, 50, 20, 3, &mix).unwrap();
        let regular = s.train.iter().filter(|p| p.1 == Difficulty::Regular).count();
        assert!((regular as f64 - 120.0).abs() <= 1.0);
    }
}
