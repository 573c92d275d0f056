//! Central finite-difference gradient verification.

use ndarray::ArrayD;

use super::Scalar;

/// Central-difference gradient of a scalar function of one array.
pub fn central_diff_grad<T: Scalar>(
    x: &ArrayD<T>,
    eps: f64,
    mut f: impl FnMut(&ArrayD<T>) -> T,
) -> ArrayD<T> {
    let eps = T::from_f64(eps);
    let two = T::from_f64(2.0);
    let mut probe = x.clone();
    let mut grad = ArrayD::<T>::zeros(x.raw_dim());
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (two * eps);
    }
    grad
}

/// Worst relative disagreement between two gradients.
///
/// Per element: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn max_rel_error<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let floor = 1e-6;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) -> {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}
