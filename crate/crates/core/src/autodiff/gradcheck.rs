use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::tape::{Tape, Var};

/// `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (numeric.abs() + 1e-12)
}

/// Central differences of a scalar function at `point` along each of `coords`.
pub fn central_difference<F>(
    mut f: F,
    point: &[Real],
    coords: &[usize],
    step: Real,
) -> Result<Vec<Real>>
where
    F: FnMut(&[Real]) -> Result<Real>,
{
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let orig = p[c];
        p[c] = orig + step;
        let plus = f(&p)?;
        p[c] = orig - step;
        let minus = f(&p)?;
        p[c] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {c}"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Largest relative error between the tape gradient of `f` at `point` and
/// central differences with the given step.
pub fn grad_check<F>(f: F, point: &Tensor, step: Real) -> Result<Real>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let y = f(&mut tape, x)?;
    if !tape.data(y).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .expect("leaf gradient populated by backward")
        .to_vec();
    if !analytic.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("grad_check analytic gradient".into()));
    }
    let shape = point.shape().to_vec();
    let coords: Vec<usize> = (0..point.numel()).collect();
    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(shape.clone(), p.to_vec())?);
            let y = f(&mut t, x)?;
            Ok(t.data(y)[0])
        },
        point.data(),
        &coords,
        step,
    )?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, Real::max))
}
