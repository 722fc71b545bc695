//! Central finite-difference checks for the reverse-mode gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

mod suite;
pub use suite::{run_suite, SuiteCase, SUITE_EPS, SUITE_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over compared coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crossed a non-smooth point.
    pub skipped: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Checks `∂f/∂x` for a single-input scalar function.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), core::slice::from_ref(x), eps)
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.item(), g.kink_signature().unwrap_or(0)))
    };

    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature().unwrap_or(0);
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for (input, x) in xs.iter().enumerate() {
        for idx in 0..x.len() {
            let orig = x.data()[idx];
            work[input].data_mut()[idx] = orig + eps;
            let (fp, sp) = eval(&work)?;
            work[input].data_mut()[idx] = orig - eps;
            let (fm, sm) = eval(&work)?;
            work[input].data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check",
                    index: idx,
                });
            }
            let a = analytic[input].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((input, idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 3.5]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let s = g.scale(v, 2.5)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn sum_of_squares_at_ones() {
        let x = Tensor::<f64>::ones(&[5]);
        let f = |g: &mut Graph<f64>, v: Var| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let l = f(&mut g, v).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 2.0));
        assert!(finite_diff_check(f, &x, 1e-6).unwrap().max_rel_error < 1e-8);
    }

    #[test]
    fn relu_kink_coordinates_are_skipped() {
        let x = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let r = g.relu(v)?;
                g.sum(r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::<f64>::ones(&[1]);
        assert!(finite_diff_check(|g, v| g.sum(v), &x, 1e-2).is_err());
    }
}
