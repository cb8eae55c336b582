//! Geometric transforms on the two trailing (H, W) axes, and ImageNet
//! normalization.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn plane_dims<T: Float>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    assert!(s.len() >= 2, "spatial transform needs rank >= 2, got {s:?}");
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (t.numel() / (h * w).max(1), h, w)
}

fn remap<T: Float>(t: &Tensor<T>, out_hw: (usize, usize), src: impl Fn(usize, usize) -> usize) -> Tensor<T> {
    let (planes, h, w) = plane_dims(t);
    let (ho, wo) = out_hw;
    let mut out = Vec::with_capacity(t.numel());
    for p in 0..planes {
        let plane = &t.data()[p * h * w..][..h * w];
        for y in 0..ho {
            for x in 0..wo {
                out.push(plane[src(y, x)]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out).expect("remap preserves element count")
}

pub fn hflip<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = plane_dims(t);
    remap(t, (h, w), |y, x| y * w + (w - 1 - x))
}

pub fn vflip<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = plane_dims(t);
    remap(t, (h, w), |y, x| (h - 1 - y) * w + x)
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rot90<T: Float>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let (_, h, w) = plane_dims(t);
    match k % 4 {
        0 => t.clone(),
        1 => remap(t, (w, h), |y, x| x * w + (w - 1 - y)),
        2 => remap(t, (h, w), |y, x| (h - 1 - y) * w + (w - 1 - x)),
        _ => remap(t, (w, h), |y, x| (h - 1 - x) * w + y),
    }
}

fn channel_affine(image: &Tensor<f32>, f: impl Fn(usize, f32) -> f32) -> Result<Tensor<f32>> {
    let s = image.shape();
    let c_axis = match s.len() {
        3 => 0,
        4 => 1,
        _ => return Err(Error::Shape(format!("expected [3,H,W] or [N,3,H,W], got {s:?}"))),
    };
    if s[c_axis] != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {s:?}")));
    }
    let hw = s[c_axis + 1] * s[c_axis + 2];
    let data = image.data().iter().enumerate().map(|(i, &v)| f((i / hw) % 3, v)).collect();
    Tensor::new(s.to_vec(), data)
}

/// Per-channel `(x - mean) / std` with ImageNet statistics.
pub fn normalize_imagenet(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    channel_affine(image, |c, v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
}

pub fn denormalize_imagenet(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    channel_affine(image, |c, v| v * IMAGENET_STD[c] + IMAGENET_MEAN[c])
}
