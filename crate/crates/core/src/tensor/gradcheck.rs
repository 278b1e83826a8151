//! Central-difference gradient checks.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::attr("grad_check", format!("eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_requires_grad(true))?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(point.shape().to_vec(), data.to_vec())?;
        let x = tape.leaf(&t)?;
        let y = f(&mut tape, x)?;
        if tape.value(y).len() != 1 {
            return Err(Error::NotScalar(tape.shape(y).to_vec()));
        }
        Ok(tape.scalar(y))
    };
    Ok(grad_check_with(eval, &analytic, point.data(), eps)?.max_rel_error)
}

/// Compares a supplied analytic gradient against central differences of `f`
/// around `point`.
pub fn grad_check_with<F>(f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} analytic entries for {} coordinates", analytic.len(), point.len()),
        ));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0, 0);
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        let num = (up - down) / (2.0 * eps);
        let err = (analytic[i] - num).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 || i == 0 {
            worst = (err, i);
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic: analytic.to_vec(),
        numeric,
    })
}
