//! Named parameter storage shared by layers, optimizers, EMA and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is, which decides how optimizers treat it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight; weight-decayed.
    Weight,
    /// Additive bias; not decayed.
    Bias,
    /// BatchNorm / LayerNorm affine scale or shift; not decayed.
    Norm,
    /// Non-trainable state such as BatchNorm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Same length as `value`; accumulated by backward, cleared by `zero_grad`.
    pub grad: Vec<T>,
}

/// A pending running-statistics update produced by a train-mode BatchNorm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name.
    ///
    /// Panics on a duplicate name: names are assigned by the model builder and
    /// a collision is a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        let grad = vec![T::zero(); value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        id
    }

    /// Kaiming-uniform (fan-in) initialized weight: U(-b, b), b = sqrt(6 / fan_in).
    pub fn kaiming(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.insert(name, ParamKind::Weight, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Trainable scalar count over parameters whose name starts with `prefix`.
    pub fn trainable_count_prefixed(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable() && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Folds BatchNorm batch statistics into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>, momentum: T) {
        let keep = T::one() - momentum;
        for u in updates {
            for (r, b) in self.params[u.mean_id.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = keep * *r + momentum * *b;
            }
            for (r, b) in self.params[u.var_id.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var_unbiased)
            {
                *r = keep * *r + momentum * *b;
            }
        }
    }

    /// Copy with every tensor converted to another float type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.value.numel()],
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let m = s.insert("bn.running_mean", ParamKind::Buffer, Tensor::zeros(vec![2]));
        let v = s.insert("bn.running_var", ParamKind::Buffer, Tensor::ones(vec![2]));
        s.apply_stat_updates(
            vec![StatUpdate {
                mean_id: m,
                var_id: v,
                batch_mean: vec![1.0, 2.0],
                batch_var_unbiased: vec![3.0, 5.0],
            }],
            0.1,
        );
        assert_eq!(s.value(m).data(), &[0.1, 0.2]);
        assert!((s.value(v).data()[0] - 1.2).abs() < 1e-12);
        assert!((s.value(v).data()[1] - 1.4).abs() < 1e-12);
        assert_eq!(s.trainable_count(), 0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", ParamKind::Bias, Tensor::zeros(vec![1]));
        s.insert("a", ParamKind::Bias, Tensor::zeros(vec![1]));
    }
}
