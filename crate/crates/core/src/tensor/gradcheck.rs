use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let root = f(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape.grad_or_zeros(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p, false);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
