//! Exponential moving average of trainable weights.

use crate::params::ParamStore;
use crate::tensor::Float;

/// `shadow <- decay * shadow + (1 - decay) * param` for every trainable tensor.
pub fn ema_update<T: Float>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) {
    let (d, one_d) = (T::of(decay), T::of(1.0 - decay));
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        if p.kind.trainable() {
            for (sv, pv) in s.value.data_mut().iter_mut().zip(p.value.data()) {
                *sv = d * *sv + one_d * *pv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmaState<T> {
    pub shadow: ParamStore<T>,
    pub decay: f64,
    /// Ramp the decay as `min(decay, (1 + k) / (10 + k))` over updates `k`.
    pub warmup: bool,
    pub updates: u64,
}

impl<T: Float> EmaState<T> {
    pub fn new(params: &ParamStore<T>, decay: f64, warmup: bool) -> Self {
        Self {
            shadow: params.clone(),
            decay,
            warmup,
            updates: 0,
        }
    }

    pub fn current_decay(&self) -> f64 {
        if self.warmup {
            let k = self.updates as f64;
            self.decay.min((1.0 + k) / (10.0 + k))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        let d = self.current_decay();
        ema_update(&mut self.shadow, params, d);
        self.updates += 1;
    }

    /// Shadow weights combined with the live running statistics of `params`.
    pub fn weights(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = self.shadow.clone();
        for ((_, o), (_, p)) in out.iter_mut().zip(params.iter()) {
            if !p.kind.trainable() {
                o.value = p.value.clone();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Weight, Tensor::new(vec![1], vec![v]).unwrap());
        s.insert("rm", ParamKind::Buffer, Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn first(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn fixed_point_and_single_step() {
        let p = store(0.4);
        let mut sh = p.clone();
        ema_update(&mut sh, &p, 0.999);
        assert_eq!(first(&sh), 0.4);
        let mut sh = store(0.0);
        ema_update(&mut sh, &store(1.0), 0.999);
        assert!((first(&sh) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn geometric_series() {
        let p = store(2.5);
        let mut sh = store(0.0);
        for k in 1..=200 {
            ema_update(&mut sh, &p, 0.999);
            assert!((first(&sh) - 2.5 * (1.0 - 0.999f64.powi(k))).abs() < 1e-9);
        }
    }

    #[test]
    fn warmup_ramps_and_buffers_follow_live_params() {
        let mut e = EmaState::new(&store(0.0), 0.999, true);
        assert!((e.current_decay() - 0.1).abs() < 1e-15);
        e.update(&store(1.0));
        assert!((first(&e.shadow) - 0.9).abs() < 1e-15);
        let w = e.weights(&store(5.0));
        let vals: Vec<f64> = w.iter().map(|(_, p)| p.value.data()[0]).collect();
        assert_eq!(vals, vec![0.9, 5.0]);
    }
}
