use alloc::vec::Vec;

use super::{AutodiffError, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
    pub max_relative_error: f64,
    pub worst_component: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the reverse-mode gradient of a scalar function at `point`.
///
/// `f` receives a fresh tape and the input variable, and returns the scalar
/// output variable. The analytic gradient comes from one backward pass; the
/// numeric one evaluates `f` at `point ± step` along every component.
pub fn grad_check<F, E>(mut f: F, point: &Tensor, step: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let x = tape.parameter(point.clone());
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.of(x).data().to_vec();
    if let Some(index) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFiniteGradient { index }.into());
    }

    let mut eval = |probe: Tensor, index: usize| -> Result<f64, E> {
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: v.shape().to_vec(),
            }
            .into());
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteProbe { index }.into());
        }
        Ok(v)
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut max_relative_error = 0.0;
    let mut worst_component = 0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        if !fd.is_finite() {
            return Err(AutodiffError::NonFiniteProbe { index: i }.into());
        }
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        if err > max_relative_error {
            max_relative_error = err;
            worst_component = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_relative_error,
        worst_component,
        analytic,
        numeric,
    })
}
