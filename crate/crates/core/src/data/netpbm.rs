//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::tensor::Tensor;

use super::synth::quantize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            what: "netpbm",
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments that run to the end of the line.
    fn skip_space(&mut self) {
        while let Some(&c) = self.b.get(self.pos) {
            if c == b'#' {
                while self.b.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.b.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.b[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse {
                what: "netpbm",
                offset: start as u64,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let mut c = Cursor { b: bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(c.err("bad magic, expected P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = {
        c.skip_space();
        c.pos
    };
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        c.pos = maxval_at;
        return Err(c.err(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before the raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.err("image dimensions overflow"))?;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(c.err(format!("truncated raster: need {need} bytes, {have} present")));
    }
    if have > need {
        c.pos += need;
        return Err(c.err(format!("{} trailing bytes after raster", have - need)));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: bytes[c.pos..].to_vec(),
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.data);
    out
}

fn read(path: &Path) -> Result<Pnm> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `[3, H, W]` image in `[0, 1]`.
pub fn image_from_pnm(p: &Pnm) -> Result<Tensor<f32>> {
    if p.channels != 3 {
        return Err(Error::InvalidArgument("expected a P6 color image".into()));
    }
    let hw = p.width * p.height;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in p.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, p.height, p.width], data)
}

/// `[1, H, W]` mask, 1 where the sample is at least 128.
pub fn mask_from_pnm(p: &Pnm) -> Result<Tensor<f32>> {
    if p.channels != 1 {
        return Err(Error::InvalidArgument("expected a P5 grayscale mask".into()));
    }
    Tensor::new(
        vec![1, p.height, p.width],
        p.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
    )
}

fn plane_dims(t: &Tensor<f32>, channels: usize, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[c, h, w] if c == channels => Ok((h, w)),
        s => Err(Error::Shape(format!("{what}: expected [{channels}, H, W], got {s:?}"))),
    }
}

pub fn image_to_pnm(image: &Tensor<f32>) -> Result<Pnm> {
    let (h, w) = plane_dims(image, 3, "image")?;
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
    }
    let hw = h * w;
    let d = image.data();
    let data = (0..hw).flat_map(|i| (0..3).map(move |c| quantize(d[c * hw + i]))).collect();
    Ok(Pnm {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

pub fn mask_to_pnm(mask: &Tensor<f32>) -> Result<Pnm> {
    let (h, w) = plane_dims(mask, 1, "mask")?;
    let data = mask
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(255)
            } else {
                Err(Error::InvalidArgument(format!("mask value {v} is not binary")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Pnm {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

/// Probability map quantized to 8 bits.
pub fn prob_to_pnm(prob: &Tensor<f32>) -> Result<Pnm> {
    let (h, w) = plane_dims(prob, 1, "probability map")?;
    Ok(Pnm {
        width: w,
        height: h,
        channels: 1,
        data: prob.data().iter().map(|v| quantize(*v)).collect(),
    })
}

pub fn load_image_ppm(path: &Path) -> Result<Tensor<f32>> {
    image_from_pnm(&read(path)?)
}

pub fn load_mask_pgm(path: &Path) -> Result<Tensor<f32>> {
    mask_from_pnm(&read(path)?)
}

pub fn save_image_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode(&image_to_pnm(image)?))
}

pub fn save_mask_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode(&mask_to_pnm(mask)?))
}

pub fn save_prob_pgm(path: &Path, prob: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode(&prob_to_pnm(prob)?))
}
