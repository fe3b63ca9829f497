//! Central finite differences, used as an independent oracle for
//! [`Tape::backward`](crate::Tape::backward).

use crate::tensor::Tensor;

/// Central-difference gradient of `eval` at `at`:
/// `(eval(x + h·eᵢ) − eval(x − h·eᵢ)) / 2h` for every coordinate.
///
/// # Panics
/// If `step` is not a positive finite number.
pub fn finite_diff_grad<E>(
    mut eval: impl FnMut(&Tensor) -> Result<f64, E>,
    at: &Tensor,
    step: f64,
) -> Result<Tensor, E> {
    assert!(step > 0.0 && step.is_finite(), "finite-difference step must be positive");
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(Tensor::from_parts(at.shape().to_vec(), grad))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on unequal lengths");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
