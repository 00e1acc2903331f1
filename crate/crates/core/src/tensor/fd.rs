use super::{Real, Tensor};

/// Central-difference gradient of a scalar function.
///
/// Evaluates `f` at `x ± h·e_i` for every coordinate; never touches a tape,
/// so it stays independent of the reverse pass it is used to check.
pub fn finite_diff_grad<F: Real>(f: impl Fn(&Tensor<F>) -> F, x: &Tensor<F>, h: F) -> Tensor<F> {
    let two_h = h + h;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error<F: Real>(a: &[F], b: &[F]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
