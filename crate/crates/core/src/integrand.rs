//! Batch-evaluated scalar integrands.

/// A real-valued function on `R^dim`, evaluated on batches of points.
///
/// `points` holds `values.len()` points stored contiguously, `dim` coordinates
/// each. Implementations must be pure: the same points give the same values.
pub trait Integrand: Sync {
    fn dim(&self) -> usize;

    fn eval_batch(&self, points: &[f64], values: &mut [f64]);
}

/// Wraps a pointwise closure as an [`Integrand`].
pub struct FnIntegrand<F> {
    dim: usize,
    f: F,
}

impl<F> FnIntegrand<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnIntegrand { dim, f }
    }
}

impl<F> Integrand for FnIntegrand<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, points: &[f64], values: &mut [f64]) {
        for (x, v) in points.chunks_exact(self.dim).zip(values.iter_mut()) {
            *v = (self.f)(x);
        }
    }
}

impl<T: Integrand + ?Sized> Integrand for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval_batch(&self, points: &[f64], values: &mut [f64]) {
        (**self).eval_batch(points, values)
    }
}
