//! Central finite-difference gradient checking.
//!
//! Checks run in `f64`. For tensors with more coordinates than
//! [`GradCheckOptions::max_coords`] a seeded random subset is probed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Probe every coordinate up to this many, else a random subset of this size.
    pub max_coords: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1.0 is a harness self-test that must fail.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-3,
            max_coords: 32,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

impl GradCheckOptions {
    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences of an O(10) scalar carry round-off near 1e-9, which
/// is all a coordinate with an exactly zero gradient ever shows.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `x0`.
pub fn compare_central_differences(
    x0: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if x0.len() != analytic.len() {
        return Err(Error::GradCheck(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x0.len()
        )));
    }
    let a = f(x0)?;
    let b = f(x0)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic ({a} vs {b})"
        )));
    }
    let coords: Vec<usize> = if x0.len() <= opts.max_coords {
        (0..x0.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut c = sample(&mut rng, x0.len(), opts.max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut x = x0.to_vec();
    let mut max_rel_err = 0.0f64;
    for &i in &coords {
        x[i] = x0[i] + opts.h;
        let up = f(&x)?;
        x[i] = x0[i] - opts.h;
        let down = f(&x)?;
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * opts.h);
        let err = relative_error(analytic[i] * opts.analytic_scale, numeric);
        max_rel_err = max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: coords.len(),
        pass: max_rel_err < opts.tol,
    })
}

/// Gradient check of a scalar function of one tensor input.
///
/// `f` receives a fresh graph and the input variable and must return a
/// scalar variable.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out, None)?;
    let analytic = grads
        .wrt(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape().to_vec();
    compare_central_differences(
        x.data(),
        &analytic,
        |data| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(shape.clone(), data.to_vec())?);
            let out = f(&mut g, v)?;
            Ok(g.value(out).data()[0])
        },
        opts,
    )
}

/// Reduces any tensor to a scalar through a fixed random weighting, so a
/// gradient check exercises every output coordinate with a distinct weight.
/// Weights are scaled by `1/sqrt(numel)` to keep the scalar O(1).
pub fn random_projection(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9ad);
    let shape = g.shape(v).to_vec();
    let scale = 1.0 / (shape.iter().product::<usize>().max(1) as f64).sqrt();
    let r = g.constant(Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0)));
    let prod = g.mul(v, r)?;
    Ok(g.sum(prod))
}

/// Seeded tensor with entries uniform in `[-2, 2]`.
pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = random_tensor(vec![4, 5], 1);
        let r = finite_diff_gradcheck(|g, v| Ok(g.sum(v)), &x, &GradCheckOptions::default()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-8);
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn sigmoid_sum_passes() {
        let x = random_tensor(vec![3, 3], 2);
        let r = finite_diff_gradcheck(
            |g, v| {
                let s = g.sigmoid(v);
                Ok(g.sum(s))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = random_tensor(vec![6], 3);
        let opts = GradCheckOptions {
            analytic_scale: 1.1,
            ..Default::default()
        };
        let r = finite_diff_gradcheck(|g, v| random_projection(g, v, 0), &x, &opts).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn non_deterministic_function_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let err = compare_central_differences(
            &[1.0],
            &[1.0],
            |x| {
                calls.set(calls.get() + 1);
                Ok(x[0] + calls.get() as f64)
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"));
    }

    #[test]
    fn large_tensors_use_a_fixed_subset() {
        let x = random_tensor(vec![200], 4);
        let opts = GradCheckOptions::default();
        let r1 = finite_diff_gradcheck(|g, v| random_projection(g, v, 1), &x, &opts).unwrap();
        let r2 = finite_diff_gradcheck(|g, v| random_projection(g, v, 1), &x, &opts).unwrap();
        assert_eq!(r1.checked, 32);
        assert_eq!(r1, r2);
    }
}
