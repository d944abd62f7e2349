//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Compare an analytic gradient against central finite differences,
/// element by element, and return the maximum relative error.
///
/// `f` evaluates the scalar function and its analytic gradient at a point.
/// Entries where both gradients are below 1e-7 in magnitude count as exact,
/// since central differences carry roundoff noise of that order.
pub fn finite_diff_check<F>(f: F, point: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    if h <= 0.0 {
        return Err(Error::Argument("finite-difference step must be > 0".into()));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "function value {value} is not finite"
        )));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} != point shape {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut max_rel = 0.0_f64;
    for r in 0..point.rows() {
        for c in 0..point.cols() {
            let mut plus = point.clone();
            plus.set(r, c, point.get(r, c) + h);
            let mut minus = point.clone();
            minus.set(r, c, point.get(r, c) - h);
            let (fp, _) = f(&plus)?;
            let (fm, _) = f(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(
                    "perturbed function value is not finite".into(),
                ));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(r, c);
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum x^2, grad 2x
        let f = |m: &Matrix| {
            let v: f64 = m.data().iter().map(|x| x * x).sum();
            Ok((v, m.scale(2.0)))
        };
        let point = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let err = finite_diff_check(f, &point, 1e-5).unwrap();
        assert!(err < 1e-9, "got {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |m: &Matrix| Ok((42.0, Matrix::zeros(m.rows(), m.cols())));
        let point = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        assert_eq!(finite_diff_check(f, &point, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // claims grad 3x for f(x) = x^2
        let f = |m: &Matrix| {
            let v: f64 = m.data().iter().map(|x| x * x).sum();
            Ok((v, m.scale(3.0)))
        };
        let point = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let err = finite_diff_check(f, &point, 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let f = |_: &Matrix| Ok((f64::NAN, Matrix::zeros(1, 1)));
        let point = Matrix::zeros(1, 1);
        assert!(matches!(
            finite_diff_check(f, &point, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
