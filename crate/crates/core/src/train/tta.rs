//! Six-fold test-time augmentation and performance-weighted ensembling.

use crate::data::{hflip, rot90, vflip};
use crate::error::{Error, Result};
use crate::model::MedLiteNet;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtaTransform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl TtaTransform {
    pub const ALL: [TtaTransform; 6] = [
        TtaTransform::Identity,
        TtaTransform::HFlip,
        TtaTransform::VFlip,
        TtaTransform::Rot90,
        TtaTransform::Rot180,
        TtaTransform::Rot270,
    ];

    pub fn apply<T: Float>(self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            TtaTransform::Identity => t.clone(),
            TtaTransform::HFlip => hflip(t),
            TtaTransform::VFlip => vflip(t),
            TtaTransform::Rot90 => rot90(t, 1),
            TtaTransform::Rot180 => rot90(t, 2),
            TtaTransform::Rot270 => rot90(t, 3),
        }
    }

    pub fn inverse(self) -> TtaTransform {
        match self {
            TtaTransform::Rot90 => TtaTransform::Rot270,
            TtaTransform::Rot270 => TtaTransform::Rot90,
            other => other,
        }
    }
}

/// Mean of `inverse(predict(transform(image)))` over the six transforms,
/// accumulated in f64.
pub fn tta_predict<T: Float>(
    image: &Tensor<T>,
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut acc: Option<(Vec<usize>, Vec<f64>)> = None;
    for t in TtaTransform::ALL {
        let out = t.inverse().apply(&predict(&t.apply(image))?);
        match &mut acc {
            None => acc = Some((out.shape().to_vec(), out.data().iter().map(|v| v.as_f64()).collect())),
            Some((shape, sum)) => {
                if shape.as_slice() != out.shape() {
                    return Err(Error::Shape(format!(
                        "TTA output {:?} differs from {:?}",
                        out.shape(),
                        shape
                    )));
                }
                sum.iter_mut().zip(out.data()).for_each(|(s, v)| *s += v.as_f64());
            }
        }
    }
    let (shape, sum) = acc.expect("six transforms");
    let n = TtaTransform::ALL.len() as f64;
    Tensor::new(shape, sum.into_iter().map(|s| T::of(s / n)).collect())
}

/// Eval-mode TTA prediction of a model with weights from `store`.
pub fn tta_predict_model<T: Float>(model: &MedLiteNet<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    tta_predict(image, |x| model.predict_with(store, x))
}

/// `w_i = dice_i / sum(dice)`.
pub fn ensemble_weights(val_dices: &[f64]) -> Result<Vec<f64>> {
    if val_dices.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    if val_dices.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::InvalidArgument("ensemble scores must be finite and non-negative".into()));
    }
    let total: f64 = val_dices.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("ensemble scores sum to zero".into()));
    }
    Ok(val_dices.iter().map(|d| d / total).collect())
}

/// Weighted sum of member probability maps, accumulated in f64.
pub fn ensemble_combine<T: Float>(probs: &[Tensor<T>], val_dices: &[f64]) -> Result<Tensor<T>> {
    if probs.len() != val_dices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ensemble outputs but {} scores",
            probs.len(),
            val_dices.len()
        )));
    }
    let w = ensemble_weights(val_dices)?;
    let shape = probs[0].shape();
    let mut sum = vec![0.0f64; probs[0].numel()];
    for (p, wi) in probs.iter().zip(&w) {
        if p.shape() != shape {
            return Err(Error::Shape(format!("ensemble member output {:?} differs from {:?}", p.shape(), shape)));
        }
        sum.iter_mut().zip(p.data()).for_each(|(s, v)| *s += wi * v.as_f64());
    }
    Tensor::new(shape.to_vec(), sum.into_iter().map(T::of).collect())
}

/// Performance-weighted ensemble of eval-mode (optionally TTA) predictions.
pub fn ensemble_predict<T: Float>(
    members: &[(&MedLiteNet<T>, &ParamStore<T>)],
    val_dices: &[f64],
    image: &Tensor<T>,
    tta: bool,
) -> Result<Tensor<T>> {
    let probs = members
        .iter()
        .map(|(m, s)| if tta { tta_predict_model(m, s, image) } else { m.predict_with(s, image) })
        .collect::<Result<Vec<_>>>()?;
    ensemble_combine(&probs, val_dices)
}
