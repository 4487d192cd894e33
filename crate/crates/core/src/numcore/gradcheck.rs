use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradient differences are compared absolutely.
const SCALE_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Worst per-coordinate relative error between the reverse-mode gradient of
/// a scalar function and central finite differences with step `h`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape
        .backward(y)?
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(point);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if !err.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite gradient at coordinate {i}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
