//! Deterministic synthetic lesion images.
//!
//! A lesion is a star-shaped polygon: an ellipse whose radius is modulated
//! by a few seeded cosine harmonics. The mask is that polygon rasterized at
//! pixel centers with the even-odd rule, so it is exact for the generator's
//! boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::DOWNSAMPLE;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Regular,
    Irregular,
    LowContrast,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Regular, Difficulty::Irregular, Difficulty::LowContrast];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Regular => "regular",
            Difficulty::Irregular => "irregular",
            Difficulty::LowContrast => "low_contrast",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[3, H, W]` in `[0, 1]`, before normalization.
    pub image: Tensor<f32>,
    /// `[1, H, W]`, strictly 0 or 1.
    pub mask: Tensor<f32>,
    pub seed: u64,
    pub difficulty: Difficulty,
}

/// Vertex count of the lesion polygon.
pub const POLYGON_VERTICES: usize = 256;
pub const MIN_AREA: f64 = 0.03;
pub const MAX_AREA: f64 = 0.4;
/// Largest per-channel color gap of low-contrast lesions.
pub const LOW_CONTRAST_MAX_GAP: f32 = 0.08;

/// Intersection abscissa of edge `a -> b` with the horizontal line `y`.
/// Shared by the rasterizer and the point-in-polygon test so both decide
/// every pixel with identical arithmetic.
#[inline]
pub fn edge_crossing(a: (f64, f64), b: (f64, f64), y: f64) -> Option<f64> {
    if (a.1 > y) != (b.1 > y) {
        Some(a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1))
    } else {
        None
    }
}

/// Even-odd rasterization of a closed polygon at pixel centers.
pub fn rasterize(poly: &[(f64, f64)], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; width * height];
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..poly.len() {
            if let Some(x) = edge_crossing(poly[i], poly[(i + 1) % poly.len()], yc) {
                xs.push(x);
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // pixel centers in [x0, x1)
            let start = ((pair[0] - 0.5).floor() - 1.0).max(0.0) as usize;
            for x in start..width {
                let xc = x as f64 + 0.5;
                if xc >= pair[1] {
                    break;
                }
                if xc >= pair[0] {
                    out[y * width + x] = true;
                }
            }
        }
    }
    out
}

/// Lesion geometry, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionShape {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub rotation: f64,
    /// `(frequency, amplitude, phase)` radial harmonics.
    pub harmonics: Vec<(u32, f64, f64)>,
}

impl LesionShape {
    fn random(rng: &mut impl Rng, size: usize, difficulty: Difficulty) -> Self {
        let s = size as f64;
        let (n_harm, max_amp) = match difficulty {
            Difficulty::Irregular => (rng.random_range(3..=5), 0.14),
            _ => (rng.random_range(1..=3), 0.05),
        };
        let harmonics = (0..n_harm)
            .map(|_| {
                let k = rng.random_range(2..=7u32);
                (k, rng.random_range(0.0..max_amp), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            center: (s * rng.random_range(0.35..0.65), s * rng.random_range(0.35..0.65)),
            radii: (s * rng.random_range(0.1..0.32), s * rng.random_range(0.1..0.32)),
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            harmonics,
        }
    }

    pub fn radius_scale(&self, phi: f64) -> f64 {
        1.0 + self
            .harmonics
            .iter()
            .map(|&(k, a, p)| a * (k as f64 * phi + p).cos())
            .sum::<f64>()
    }

    pub fn polygon(&self) -> Vec<(f64, f64)> {
        let (sin_r, cos_r) = self.rotation.sin_cos();
        (0..POLYGON_VERTICES)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / POLYGON_VERTICES as f64;
                let r = self.radius_scale(phi);
                let (ex, ey) = (self.radii.0 * r * phi.cos(), self.radii.1 * r * phi.sin());
                (
                    self.center.0 + ex * cos_r - ey * sin_r,
                    self.center.1 + ex * sin_r + ey * cos_r,
                )
            })
            .collect()
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the lesion shape for `(seed, size, difficulty)` and its mask,
/// retrying until the area fraction lies in `[MIN_AREA, MAX_AREA]`.
pub fn lesion_geometry(seed: u64, size: usize, difficulty: Difficulty) -> (LesionShape, Vec<bool>) {
    let mut rng = sub_rng(seed, 1);
    loop {
        let shape = LesionShape::random(&mut rng, size, difficulty);
        let mask = rasterize(&shape.polygon(), size, size);
        let frac = mask.iter().filter(|m| **m).count() as f64 / (size * size) as f64;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            return (shape, mask);
        }
    }
}

pub fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % DOWNSAMPLE != 0 {
        return Err(Error::config(
            "size",
            format!("{size} is not a positive multiple of {DOWNSAMPLE}"),
        ));
    }
    Ok(())
}

/// One synthetic dermoscopy-like sample, fully determined by its arguments.
pub fn synth_sample(seed: u64, size: usize, difficulty: Difficulty) -> Result<SegmentationSample> {
    check_size(size)?;
    let (_, mask) = lesion_geometry(seed, size, difficulty);
    let mut rng = sub_rng(seed, 2);
    let s = size as f32;

    let skin = [
        rng.random_range(0.72..0.92f32),
        rng.random_range(0.52..0.70f32),
        rng.random_range(0.42..0.60f32),
    ];
    let (gx, gy) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let lesion: [f32; 3] = match difficulty {
        Difficulty::LowContrast => {
            let gap = rng.random_range(0.05..LOW_CONTRAST_MAX_GAP);
            [gap, gap * rng.random_range(0.7..1.0f32), gap * rng.random_range(0.7..1.0f32)]
        }
        _ => {
            let f = rng.random_range(0.35..0.6f32);
            [
                skin[0] * (1.0 - f),
                skin[1] * (1.0 - f * 1.1),
                skin[2] * (1.0 - f * 0.9),
            ]
        }
    };
    // texture inside the lesion: two low-frequency waves
    let (tk, tp) = (rng.random_range(1.0..3.0f32), rng.random_range(0.0..6.28f32));
    let texture_amp = match difficulty {
        Difficulty::LowContrast => 0.0,
        _ => 0.06,
    };

    let hw = size * size;
    let mut image = vec![0.0f32; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / s - 0.5, (y as f32 + 0.5) / s - 0.5);
            let light = 1.0 + gx * u + gy * v - 0.25 * (u * u + v * v);
            let i = y * size + x;
            for c in 0..3 {
                let bg = skin[c] * light;
                image[c * hw + i] = if mask[i] {
                    match difficulty {
                        Difficulty::LowContrast => bg - lesion[c],
                        _ => {
                            let t = texture_amp * (tk * 6.28 * u + tp).sin() * (tk * 6.28 * v).cos();
                            lesion[c] * light + t
                        }
                    }
                } else {
                    bg
                };
            }
        }
    }

    let hair_p = if difficulty == Difficulty::Irregular { 0.5 } else { 0.3 };
    if rng.random_bool(hair_p) {
        for _ in 0..rng.random_range(1..=4) {
            let shade = rng.random_range(0.08..0.25f32);
            let (mut px, mut py) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let mut dir = rng.random_range(0.0..std::f32::consts::TAU);
            for _ in 0..(s * rng.random_range(0.3..0.8f32)) as usize {
                let (xi, yi) = (px as isize, py as isize);
                if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                    let i = yi as usize * size + xi as usize;
                    for c in 0..3 {
                        image[c * hw + i] = shade;
                    }
                }
                dir += rng.random_range(-0.3..0.3f32);
                px += dir.cos();
                py += dir.sin();
            }
        }
    }

    let noise = Normal::new(0.0f32, 0.01).expect("valid sigma");
    for v in image.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    Ok(SegmentationSample {
        image: Tensor::new(vec![3, size, size], image)?,
        mask: Tensor::new(vec![1, size, size], mask.iter().map(|&m| m as u8 as f32).collect())?,
        seed,
        difficulty,
    })
}

/// Quantizes `[0, 1]` floats to bytes.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// SHA-256 over the quantized images and masks, hex encoded.
pub fn corpus_digest(samples: &[SegmentationSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.seed.to_le_bytes());
        h.update(s.image.data().iter().map(|v| quantize(*v)).collect::<Vec<_>>());
        h.update(s.mask.data().iter().map(|v| quantize(*v)).collect::<Vec<_>>());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Ten samples cycling through the difficulties, the corpus whose digest is
/// expected to stay fixed.
pub fn canonical_corpus() -> Vec<SegmentationSample> {
    (0..10)
        .map(|i| synth_sample(i, 64, Difficulty::ALL[i as usize % 3]).expect("64 is a valid size"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        for i in 0..poly.len() {
            if let Some(xi) = edge_crossing(poly[i], poly[(i + 1) % poly.len()], y) {
                if x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn deterministic_per_seed() {
        for d in Difficulty::ALL {
            assert_eq!(synth_sample(5, 64, d).unwrap(), synth_sample(5, 64, d).unwrap());
        }
        assert_ne!(synth_sample(5, 64, Difficulty::Regular).unwrap(), synth_sample(6, 64, Difficulty::Regular).unwrap());
    }

    #[test]
    fn rejects_indivisible_size() {
        let err = synth_sample(0, 100, Difficulty::Regular).unwrap_err();
        assert!(err.to_string().contains("32"));
    }

    #[test]
    fn mask_matches_point_in_polygon_oracle() {
        for seed in 0..20 {
            let d = Difficulty::ALL[seed as usize % 3];
            let (shape, mask) = lesion_geometry(seed, 64, d);
            let poly = shape.polygon();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = point_in_polygon(&poly, x as f64 + 0.5, y as f64 + 0.5);
                    assert_eq!(mask[y * 64 + x], inside, "seed {seed} pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn area_fraction_bounded_and_mask_binary() {
        for seed in 0..60 {
            let s = synth_sample(seed, 64, Difficulty::ALL[seed as usize % 3]).unwrap();
            let frac = s.mask.sum() / 4096.0;
            assert!((0.03..=0.4).contains(&(frac as f64)), "seed {seed}: {frac}");
            assert!(s.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(corpus_digest(&canonical_corpus()), corpus_digest(&canonical_corpus()));
    }
}
