//! Bounded, weighted nonlinear least squares.
//!
//! A Levenberg–Marquardt loop with Marquardt diagonal scaling, finite-difference
//! Jacobians and bound handling by projection. Parameters sitting on a bound
//! whose gradient points outward are frozen for that iteration, so the solver
//! can still move the remaining ones.
//!
//! Residual closures return *weighted* residuals, `(model - data) / sigma`.
//! The reported covariance is `(JᵀJ)⁻¹` scaled by the reduced chi-square.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Result};

pub const DEFAULT_MAX_ITERATIONS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_REL_STEP: f64 = 1e-6;
const GRADIENT_TOLERANCE: f64 = 1e-10;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e16;

/// A least-squares problem over a residual closure.
pub struct FitProblem<F>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    pub residual: F,
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl<F> FitProblem<F>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    /// Unbounded problem with default iteration limit and tolerance.
    pub fn new(residual: F, initial: Vec<f64>) -> Self {
        let n = initial.len();
        Self {
            residual,
            initial,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.initial.len();
        if n == 0 {
            return Err(domain("fit problem has no parameters"));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(domain("bound vectors must match the parameter count"));
        }
        for i in 0..n {
            let (lo, hi, p) = (self.lower[i], self.upper[i], self.initial[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(domain(format!("inconsistent bounds for parameter {i}: [{lo}, {hi}]")));
            }
            if !p.is_finite() || p < lo || p > hi {
                return Err(domain(format!("initial value {p} of parameter {i} is outside [{lo}, {hi}]")));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(domain("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative cost decrease fell below the tolerance.
    CostTolerance,
    /// Projected gradient norm fell below threshold.
    Gradient,
    /// Residuals are exactly zero.
    ExactFit,
    /// No damping level produced a decrease; the point is stationary to
    /// working precision.
    Stationary,
    MaxIterations,
    /// Normal equations stayed singular or residuals went non-finite.
    Failed,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Sum of squared weighted residuals at `params`.
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Set when `JᵀJ` could not be inverted directly and a pseudo-inverse was used.
    pub covariance_singular: bool,
    pub n_residuals: usize,
}

impl FitOutcome {
    /// One-sigma uncertainties, the square roots of the covariance diagonal.
    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.params.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// A finite-difference Jacobian with the columns that could not be evaluated.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    /// Parameters whose probe produced a non-finite residual; their column is zeroed.
    pub bad_columns: Vec<usize>,
}

/// Central-difference Jacobian with per-parameter step `max(rel_step·|p|, rel_step)`.
pub fn finite_difference_jacobian<F>(residual: F, params: &[f64], rel_step: f64) -> Result<Jacobian>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(rel_step > 0.0 && rel_step <= 1e-2) {
        return Err(domain(format!("rel_step must lie in (0, 1e-2], got {rel_step}")));
    }
    let m = residual(params).len();
    Ok(jacobian_unchecked(&residual, params, rel_step, m))
}

fn jacobian_unchecked<F>(residual: &F, params: &[f64], rel_step: f64, m: usize) -> Jacobian
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = params.len();
    let mut matrix = DMatrix::zeros(m, n);
    let mut bad_columns = Vec::new();
    let mut probe = params.to_vec();
    for j in 0..n {
        let h = (rel_step * params[j].abs()).max(rel_step);
        probe[j] = params[j] + h;
        let plus = residual(&probe);
        probe[j] = params[j] - h;
        let minus = residual(&probe);
        probe[j] = params[j];
        let ok = plus.len() == m && minus.len() == m && plus.iter().chain(minus.iter()).all(|v| v.is_finite());
        if !ok {
            bad_columns.push(j);
            continue;
        }
        for i in 0..m {
            matrix[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Jacobian { matrix, bad_columns }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn project(p: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..p.len() {
        p[i] = p[i].clamp(lower[i], upper[i]);
    }
}

/// Levenberg–Marquardt with bound projection.
pub fn least_squares<F>(problem: FitProblem<F>) -> Result<FitOutcome>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    problem.validate()?;
    let FitProblem { residual, initial, lower, upper, max_iterations, tolerance } = problem;
    let n = initial.len();
    let mut p = initial;
    let mut r = residual(&p);
    let m = r.len();
    if m < n {
        return Err(domain(format!("{m} residuals cannot determine {n} parameters")));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(domain("residuals are not finite at the initial point"));
    }
    let mut cost = sum_sq(&r);
    let mut lambda = INITIAL_DAMPING;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    'outer: while iterations < max_iterations {
        if cost == 0.0 {
            stop = StopReason::ExactFit;
            break;
        }
        iterations += 1;
        let jac = jacobian_unchecked(&residual, &p, DEFAULT_REL_STEP, m).matrix;
        let rv = DVector::from_column_slice(&r);
        let grad = jac.tr_mul(&rv);
        let jtj = jac.tr_mul(&jac);

        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lower = p[i] <= lower[i] && grad[i] > 0.0;
                let at_upper = p[i] >= upper[i] && grad[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        let grad_norm = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if free.is_empty() || grad_norm < GRADIENT_TOLERANCE {
            stop = StopReason::Gradient;
            break;
        }

        let k = free.len();
        loop {
            let mut a = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for (ri, &i) in free.iter().enumerate() {
                b[ri] = -grad[i];
                for (ci, &j) in free.iter().enumerate() {
                    a[(ri, ci)] = jtj[(i, j)];
                }
                let d = jtj[(i, i)].max(f64::MIN_POSITIVE.sqrt());
                a[(ri, ri)] += lambda * d;
            }
            let step = a.cholesky().map(|c| c.solve(&b));
            if let Some(step) = step {
                let mut candidate = p.clone();
                for (ri, &i) in free.iter().enumerate() {
                    candidate[i] += step[ri];
                }
                project(&mut candidate, &lower, &upper);
                let r_new = residual(&candidate);
                let cost_new = sum_sq(&r_new);
                if cost_new.is_finite() && cost_new < cost {
                    let rel = (cost - cost_new) / cost;
                    p = candidate;
                    r = r_new;
                    cost = cost_new;
                    lambda = (lambda * 0.1).max(1e-15);
                    if rel < tolerance {
                        stop = StopReason::CostTolerance;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                stop = if cost.is_finite() { StopReason::Stationary } else { StopReason::Failed };
                break 'outer;
            }
        }
    }

    let converged = !matches!(stop, StopReason::MaxIterations | StopReason::Failed);
    let dof = m.saturating_sub(n);
    let reduced_chi2 = if dof > 0 { cost / dof as f64 } else { f64::NAN };
    let jac = jacobian_unchecked(&residual, &p, DEFAULT_REL_STEP, m).matrix;
    let (mut covariance, covariance_singular) = invert_normal_matrix(&jac.tr_mul(&jac));
    let scale = if dof > 0 && cost > 0.0 { reduced_chi2 } else { 1.0 };
    covariance *= scale;

    Ok(FitOutcome {
        params: p,
        covariance,
        chi2: cost,
        reduced_chi2,
        converged,
        iterations,
        stop_reason: stop,
        covariance_singular,
        n_residuals: m,
    })
}

/// Inverts `JᵀJ`. Parameters with an all-zero column get infinite variance;
/// the rest are inverted by Cholesky, falling back to an SVD pseudo-inverse.
fn invert_normal_matrix(jtj: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = jtj.nrows();
    let live: Vec<usize> = (0..n).filter(|&i| jtj[(i, i)] > 0.0).collect();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        if !live.contains(&i) {
            cov[(i, i)] = f64::INFINITY;
        }
    }
    if live.is_empty() {
        return (cov, true);
    }
    let k = live.len();
    // Equilibrate so parameters on very different scales invert cleanly.
    let scale: Vec<f64> = live.iter().map(|&i| jtj[(i, i)].sqrt()).collect();
    let mut sub = DMatrix::zeros(k, k);
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            sub[(a, b)] = jtj[(i, j)] / (scale[a] * scale[b]);
        }
    }
    let (inv, singular) = match sub.clone().cholesky() {
        Some(c) => (c.inverse(), false),
        None => match sub.pseudo_inverse(1e-12) {
            Ok(pinv) => (pinv, true),
            Err(_) => (DMatrix::from_element(k, k, f64::NAN), true),
        },
    };
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            cov[(i, j)] = inv[(a, b)] / (scale[a] * scale[b]);
        }
    }
    (cov, singular || live.len() < n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_exact() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = least_squares(FitProblem::new(
            |p: &[f64]| xs.iter().zip(&ys).map(|(x, y)| p[0] * x + p[1] - y).collect(),
            vec![0.0, 0.0],
        ))
        .unwrap();
        assert!(fit.converged);
        assert!((fit.params[0] - 2.0).abs() < 1e-10);
        assert!((fit.params[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadratic_bowl_in_three_iterations() {
        let targets = [3.0, -1.5, 0.25];
        let fit = least_squares(
            FitProblem::new(
                |p: &[f64]| p.iter().zip(&targets).map(|(a, b)| 4.0 * (a - b)).collect(),
                vec![10.0, 10.0, 10.0],
            )
            .with_max_iterations(3),
        )
        .unwrap();
        for (a, b) in fit.params.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn leaves_bound_when_optimum_is_interior() {
        let fit = least_squares(
            FitProblem::new(|p: &[f64]| vec![p[0] - 5.0, 0.5 * (p[0] - 5.0)], vec![0.0])
                .with_bounds(vec![0.0], vec![10.0]),
        )
        .unwrap();
        assert!((fit.params[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn holds_parameter_on_active_bound() {
        // Unconstrained optimum at (-2, 3); lower bound 0 on the first parameter.
        let fit = least_squares(
            FitProblem::new(|p: &[f64]| vec![p[0] + 2.0, p[1] - 3.0, 0.1 * (p[0] + p[1])], vec![1.0, 0.0])
                .with_bounds(vec![0.0, f64::NEG_INFINITY], vec![f64::INFINITY, f64::INFINITY]),
        )
        .unwrap();
        assert_eq!(fit.params[0], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn rejects_initial_outside_bounds() {
        let err = least_squares(FitProblem::new(|p: &[f64]| vec![p[0]], vec![-1.0]).with_bounds(vec![0.0], vec![1.0]));
        assert!(err.is_err());
    }

    #[test]
    fn jacobian_of_quadratic_residual() {
        let f = |p: &[f64]| vec![p[0] * p[0] + 3.0 * p[1], p[0] * p[1]];
        let p = [1.7, -0.4];
        let jac = finite_difference_jacobian(f, &p, 1e-6).unwrap();
        let exact = [[2.0 * p[0], 3.0], [p[1], p[0]]];
        for (i, row) in exact.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                assert!((jac.matrix[(i, j)] - e).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jacobian_step_floor_at_zero() {
        // A cubic has a central-difference error of h², so the floor step shows up.
        let f = |p: &[f64]| vec![p[0].powi(3)];
        let jac = finite_difference_jacobian(f, &[0.0], 1e-3).unwrap();
        assert!((jac.matrix[(0, 0)] - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn jacobian_flags_non_finite_columns() {
        let f = |p: &[f64]| vec![p[0].ln(), p[1]];
        let jac = finite_difference_jacobian(f, &[1e-7, 1.0], 1e-6).unwrap();
        assert_eq!(jac.bad_columns, vec![0]);
        assert!(finite_difference_jacobian(f, &[1.0, 1.0], 0.5).is_err());
    }
}
