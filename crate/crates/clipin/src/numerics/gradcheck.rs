//! Central finite differences: the independent oracle every analytic
//! gradient in this crate is checked against.

use super::{no_grad, Tensor};
use crate::error::Result;

/// Numerically estimates the gradient of the scalar function `f` at `x` by
/// perturbing one coordinate at a time: (f(x+h e_i) - f(x-h e_i)) / 2h.
/// `f` is evaluated with gradient recording disabled, so it may be the same
/// closure whose analytic gradient is under test.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<Vec<f64>> {
    let base = x.values().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (fp, fm) = no_grad(|| -> Result<(f64, f64)> {
            let tp = Tensor::new(&shape, plus)?;
            let tm = Tensor::new(&shape, minus)?;
            Ok((f(&tp)?.scalar_value(), f(&tm)?.scalar_value()))
        })?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative disagreement between two gradient vectors. The denominator
/// is floored at 1e-3 so coordinates whose true gradient is (near) zero are
/// held to a proportional absolute tolerance instead of dividing
/// finite-difference noise by noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_form_quadratic() {
        // f(x) = sum(x^2): gradient is 2x
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut f = |t: &Tensor| Ok(t.mul(t)?.sum_all());
        let g = finite_diff_grad(&mut f, &x, 1e-5).unwrap();
        let expect = [2.0, -4.0, 1.0];
        for (gi, ei) in g.iter().zip(expect) {
            assert!((gi - ei).abs() < 1e-8, "{gi} vs {ei}");
        }
    }

    #[test]
    fn max_rel_err_floors_denominator() {
        // both gradients ~0: difference of 1e-9 must not register as huge
        let err = max_rel_err(&[0.0], &[1e-9]);
        assert!(err < 1e-2, "{err}");
        // genuine disagreement registers
        let err = max_rel_err(&[1.0], &[1.1]);
        assert!(err > 0.09);
    }
}
