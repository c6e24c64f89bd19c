//! Central-difference gradient verification.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, returning the maximum relative error over all coordinates.
///
/// `f` receives a fresh tape plus the variable holding `x` and must return a
/// scalar loss variable. Relative error uses `max(|a|, |n|, 1e-8)` as the
/// denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(
            "finite_diff_check",
            format!("eps must be in (0, 1e-2], got {eps}"),
        ));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    let loss_val = tape.scalar_value(loss)?;
    if !loss_val.is_finite() {
        return Err(Error::numeric(
            "finite_diff_check",
            format!("loss is not finite: {loss_val}"),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .ok_or_else(|| Error::contract("finite_diff_check", "no gradient for probe tensor"))?
        .to_vec();

    let eval_at = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let v = t.leaf(&probe);
        let l = f(&mut t, v)?;
        t.scalar_value(l)
    };

    let mut max_rel = 0.0f64;
    let mut perturbed = x.data().to_vec();
    for i in 0..perturbed.len() {
        let original = perturbed[i];
        perturbed[i] = original + eps;
        let plus = eval_at(&perturbed)?;
        perturbed[i] = original - eps;
        let minus = eval_at(&perturbed)?;
        perturbed[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.75]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn tanh_sum_passes_tightly() {
        let x = Tensor::new(vec![5], vec![0.1, -0.4, 1.3, -1.9, 0.6]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let y = tape.tanh(v)?;
                tape.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(|tape, v| tape.sum_all(v), &x, 0.5).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }
}
