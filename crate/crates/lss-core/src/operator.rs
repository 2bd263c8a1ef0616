//! Abstract SPD operator interface used by the Krylov methods and multigrid.

/// A linear operator on flat state vectors.
///
/// Implementations must be reentrant: `apply` takes `&self` and may be called
/// concurrently from several solves.
pub trait LinearOperator {
    /// Length of the vectors the operator acts on.
    fn dim(&self) -> usize;

    /// Computes `y = A x`. Both slices have length `self.dim()`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
