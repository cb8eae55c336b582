//! Overlap and confusion metrics on hard binary masks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_binary<T: Float>(v: &[T], what: &str) -> Result<()> {
    match v.iter().position(|x| *x != T::zero() && *x != T::one()) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "{what} is not a binary mask: element {i} is {}",
            v[i]
        ))),
        None => Ok(()),
    }
}

pub fn confusion<T: Float>(pred: &[T], gt: &[T]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        match (*p == T::one(), *g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2|P n G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_coef<T: Float>(pred: &[T], gt: &[T]) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_))
}

/// `|P n G| / |P u G|`; two empty masks score 1.
pub fn iou<T: Float>(pred: &[T], gt: &[T]) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(ratio(c.tp, c.tp + c.fp + c.fn_))
}

pub fn dice_from_iou(iou: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::InvalidArgument(format!("IoU {iou} outside [0, 1]")));
    }
    Ok(2.0 * iou / (iou + 1.0))
}

/// Soft Dice `(2 sum(p g) + eps) / (sum p + sum g + eps)` on probabilities.
pub fn soft_dice<T: Float>(p: &[T], g: &[T], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sp += a;
        sg += b;
    }
    (2.0 * inter + eps) / (sp + sg + eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl EvalRecord {
    pub fn from_confusion(c: Confusion) -> Self {
        Self {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }
}

pub fn confusion_metrics<T: Float>(pred: &[T], gt: &[T]) -> Result<EvalRecord> {
    Ok(EvalRecord::from_confusion(confusion(pred, gt)?))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        let full = [1.0f32; 8];
        let left: Vec<f32> = (0..8).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(dice_coef(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        assert_eq!(iou(&left, &full).unwrap(), 0.5);
        assert!((dice_coef(&left, &full).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let a = [1.0f32, 1.0, 0.0, 0.0];
        let b = [0.0f32, 0.0, 1.0, 1.0];
        assert_eq!(dice_coef(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let empty = [0.0f32; 4];
        assert_eq!(dice_coef(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(dice_coef(&[0.5f32], &[1.0]).is_err());
    }

    #[test]
    fn dice_iou_relation() {
        assert_eq!(dice_from_iou(1.0).unwrap(), 1.0);
        assert_eq!(dice_from_iou(0.0).unwrap(), 0.0);
        assert!((dice_from_iou(0.821).unwrap() - 0.9017).abs() < 1e-4);
        assert!(dice_from_iou(1.2).is_err());
    }

    #[test]
    fn confusion_examples() {
        let gt = [1.0f32, 1.0, 0.0, 0.0];
        let perfect = confusion_metrics(&gt, &gt).unwrap();
        assert_eq!(
            (perfect.accuracy, perfect.sensitivity, perfect.specificity, perfect.dice),
            (1.0, 1.0, 1.0, 1.0)
        );
        let inv = confusion_metrics(&[0.0f32, 0.0, 1.0, 1.0], &gt).unwrap();
        assert_eq!(inv.accuracy, 0.0);
        let ones = confusion_metrics(&[1.0f32; 4], &gt).unwrap();
        assert_eq!((ones.sensitivity, ones.specificity, ones.accuracy), (1.0, 0.0, 0.5));
        assert_eq!(ones.confusion().total(), 4);
    }

    #[test]
    fn soft_dice_complements_loss() {
        assert!((soft_dice(&[1.0f64, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 1e-6) - 0.5).abs() < 1e-6);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
