use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference gradient of a scalar function of `x`.
pub fn central_difference<F>(f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` builds a scalar loss from its input variable. Returns the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t.clone())?;
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let out = f(&mut tape, v)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::Contract("finite_diff_check needs a scalar output".into()));
    }
    tape.backward(out)?;
    let analytic = tape.grad_tensor(v);
    let numeric = central_difference(eval, x, eps)?;
    Ok(max_relative_error(analytic.data(), &numeric))
}

/// Largest `|analytic - numeric| / (|numeric| + 1e-8)` over paired coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}
