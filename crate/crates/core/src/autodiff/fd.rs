use crate::scalar::Scalar;

use super::ParamSet;

/// Central-difference gradient `(f(p + εe) - f(p - εe)) / 2ε` for every
/// coordinate of `params`.
///
/// This is the oracle every analytic gradient in the crate is checked
/// against, so it only ever evaluates `f`.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&ParamSet<T>) -> T,
    params: &ParamSet<T>,
    step: T,
) -> ParamSet<T> {
    assert!(step > T::zero(), "finite-difference step must be positive");
    let layout = params.layout();
    let base = params.flatten();
    let mut probe = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    let two = T::one() + T::one();
    for j in 0..base.len() {
        probe[j] = base[j] + step;
        let up = f(&ParamSet::from_flat(&layout, &probe).expect("layout unchanged"));
        probe[j] = base[j] - step;
        let down = f(&ParamSet::from_flat(&layout, &probe).expect("layout unchanged"));
        probe[j] = base[j];
        grad.push((up - down) / (two * step));
    }
    ParamSet::from_flat(&layout, &grad).expect("layout unchanged")
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over corresponding flattened entries.
pub fn max_relative_error<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(&x, y)| relative_error(x.as_f64(), y.as_f64(), floor))
        .fold(0.0, f64::max)
}
