//! Central finite-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(xv)?;
        finite("forward value", y.item())?;
        tape.backward(y)?.wrt(xv)
    };
    finite_all("analytic gradient", &analytic)?;

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let y = f(tape.leaf(probe))?;
        if y.value().len() != 1 {
            return Err(Error::shape("check_gradient", &y.shape(), &[1]));
        }
        finite("perturbed value", y.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

fn finite_all(what: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::row(&[0.3, -1.2, 2.5, 0.0]);
        let err = check_gradient(|v| Ok(v.mul(&v)?.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::row(&[1000.0]);
        let r = check_gradient(|v| Ok(v.exp().exp().sum()), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::row(&[1.0]);
        assert!(check_gradient(|v| Ok(v.sum()), &x, 0.0).is_err());
    }
}
