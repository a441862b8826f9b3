use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` at `x` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` and returns the largest relative
/// error over all coordinates.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`; the floor keeps
/// coordinates whose true gradient is essentially zero from reporting
/// round-off as a large relative error.
///
/// `f` must be deterministic: build any stochastic state inside `f` from a
/// fixed seed so that every evaluation sees the same draws.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, TensorError>,
{
    let eval = |point: &Tensor<T>| -> Result<T, TensorError> {
        let mut tape = Tape::new(false);
        let v = tape.leaf(point.clone(), false);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new(false);
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.tensor(v);

    let floor = T::lit(1e-3);
    let two_h = h + h;
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / two_h;
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
