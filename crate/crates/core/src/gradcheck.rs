//! Central finite-difference gradient checking for `f64` tensor functions.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Outcome of [`check_gradient`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen.
    pub max_rel_error: f64,
    /// Flat index where `max_rel_error` occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Denominator floor for the relative error, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares the autodiff gradient of `sum(f(x) * probe)` with central
/// differences at every coordinate of `x0`. The probe is a fixed random tensor,
/// so vector-valued `f` is covered as well as scalar losses.
pub fn check_gradient<F>(f: F, x0: &Tensor, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x0.dtype() != DType::F64 {
        return Err(Error::invalid("gradient checks run in f64"));
    }
    let x = Var::from_tensor(x0)?;
    let y = f(x.as_tensor())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe: Vec<f64> = (0..y.elem_count())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let probe = Tensor::from_vec(probe, y.dims(), x0.device())?;
    let grads = (&y * &probe)?.sum_all()?.backward()?;
    let analytic = match grads.get(&x) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x0.elem_count()],
    };

    let base = x0.flatten_all()?.to_vec1::<f64>()?;
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(v, x0.dims(), x0.device())?;
        Ok((f(&t)? * &probe)?.sum_all()?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > max_rel_error || !rel.is_finite() {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
