//! Finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Max over coordinates of |a - n| / max(1, |a|, |n|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate. Returns the max relative
/// error as computed by [`max_relative_error`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite_diff_check: h must be positive");

    let mut tape = Tape::new();
    let xv = tape.trainable(x.clone());
    let root = f(&mut tape, xv)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .expect("trainable input always has a gradient")
        .data()
        .to_vec();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let root = f(&mut tape, v)?;
        Ok(tape.value(root).item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }

    Ok(max_relative_error(&analytic, &numeric))
}
