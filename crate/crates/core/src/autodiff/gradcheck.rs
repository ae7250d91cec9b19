//! Central-difference gradient oracle.
//!
//! Deliberately knows nothing about the tape: it only evaluates a scalar
//! function at perturbed copies of a parameter.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(p + εe_i) − f(p − εe_i)) / 2ε` for every element `i` of `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = p.clone();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle {
                index: i,
                detail: format!("f(p+ε) = {up}, f(p−ε) = {down}"),
            });
        }
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(p.shape(), out)
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst-element comparison between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    pub max_relative: f64,
    pub max_absolute: f64,
    pub worst_index: usize,
    pub elements: usize,
}

impl GradComparison {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative < tol
    }

    /// Folds two comparisons, keeping the worse one's index.
    pub fn merge(self, other: GradComparison) -> GradComparison {
        let worst = if other.max_relative > self.max_relative { other } else { self };
        GradComparison {
            max_relative: worst.max_relative,
            max_absolute: self.max_absolute.max(other.max_absolute),
            worst_index: worst.worst_index,
            elements: self.elements + other.elements,
        }
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut cmp = GradComparison {
        max_relative: 0.0,
        max_absolute: 0.0,
        worst_index: 0,
        elements: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = relative_error(a, n);
        if rel > cmp.max_relative || rel.is_nan() {
            cmp.max_relative = if rel.is_nan() { f64::INFINITY } else { rel };
            cmp.worst_index = i;
        }
        cmp.max_absolute = cmp.max_absolute.max((a - n).abs());
    }
    cmp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &p, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn product_of_two() {
        let p = Tensor::new(&[2], vec![3.0, 5.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[1], &p, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 5.0).abs() < 1e-8);
        assert!((g.data()[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_evaluation_names_the_element() {
        let p = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let err = finite_diff_grad(
            |t| if t.data()[2] > 1.0 { f64::NAN } else { t.data()[0] },
            &p,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle { index: 2, .. }));
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| t.data()[0], &p, 0.0).is_err());
        assert!(finite_diff_grad(|t| t.data()[0], &p, -1e-5).is_err());
    }

    #[test]
    fn comparison_reports_worst_element() {
        let c = compare_gradients(&[1.0, 2.0, 0.0], &[1.0, 2.2, 1e-9]);
        assert_eq!(c.worst_index, 1);
        assert!((c.max_relative - 0.2 / 2.2).abs() < 1e-12);
        assert!(c.passes(0.1));
        assert!(!c.passes(0.05));
    }
}
