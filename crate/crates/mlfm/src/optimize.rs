//! Quasi-Newton minimization: BFGS on the inverse Hessian with a strong
//! Wolfe line search (Armijo sufficient decrease plus a curvature condition).
//! Accepted steps strictly decrease the objective; runs stop on gradient
//! norm, sustained sub-tolerance objective change, or the iteration cap.

use nalgebra::{DMatrix, DVector};

use crate::error::{MlfmError, Result};

/// A smooth objective. `value` may return `f64::INFINITY` to signal an
/// infeasible point during line search; `value_grad` failures abort the run.
pub trait Objective {
    fn value(&mut self, x: &DVector<f64>) -> f64;
    fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Relative objective-change tolerance.
    pub obj_tol: f64,
    /// Gradient sup-norm tolerance.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { obj_tol: 1e-8, grad_tol: 1e-6, max_iters: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    /// Gradient sup-norm at the final iterate.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting point included.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const CURVATURE_FLOOR: f64 = 1e-12;

struct LinePoint {
    step: f64,
    value: f64,
    grad: Option<DVector<f64>>,
    slope: f64,
}

/// Strong Wolfe search along `direction` (Nocedal-Wright style bracketing
/// plus bisection zoom). Returns the accepted point or `None` when no step
/// satisfies both conditions to working precision.
fn wolfe_search(
    objective: &mut dyn Objective,
    x: &DVector<f64>,
    value0: f64,
    slope0: f64,
    direction: &DVector<f64>,
) -> Result<Option<(DVector<f64>, f64, DVector<f64>)>> {
    let eval = |objective: &mut dyn Objective, step: f64| -> Result<LinePoint> {
        let candidate = x + direction * step;
        match objective.value_grad(&candidate) {
            Ok((value, grad)) if value.is_finite() => {
                let slope = grad.dot(direction);
                Ok(LinePoint { step, value, grad: Some(grad), slope })
            }
            // Infeasible points bracket from above instead of aborting.
            _ => Ok(LinePoint { step, value: f64::INFINITY, grad: None, slope: f64::NAN }),
        }
    };
    let slack = 1e-10 * (1.0 + value0.abs());
    let acceptable = |point: &LinePoint| -> bool {
        point.value <= value0 + ARMIJO_C1 * point.step * slope0 + slack
            && point.slope.abs() <= WOLFE_C2 * slope0.abs()
    };

    let mut prev = LinePoint { step: 0.0, value: value0, grad: None, slope: slope0 };
    let mut step = 1.0;
    let mut bracket: Option<(LinePoint, LinePoint)> = None;
    for iter in 0..20 {
        let point = eval(objective, step)?;
        if point.value > value0 + ARMIJO_C1 * step * slope0 + slack || (iter > 0 && point.value >= prev.value) {
            bracket = Some((prev, point));
            break;
        }
        if acceptable(&point) {
            let LinePoint { step: s, value, grad, .. } = point;
            let candidate = x + direction * s;
            return Ok(Some((candidate, value, grad.expect("finite point has gradient"))));
        }
        if point.slope >= 0.0 {
            bracket = Some((point, prev));
            break;
        }
        prev = point;
        step *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(None);
    };

    for _ in 0..40 {
        let mid_step = 0.5 * (lo.step + hi.step);
        if (hi.step - lo.step).abs() < 1e-16 * (1.0 + lo.step.abs()) {
            break;
        }
        let point = eval(objective, mid_step)?;
        if point.value > value0 + ARMIJO_C1 * mid_step * slope0 + slack || point.value >= lo.value {
            hi = point;
            continue;
        }
        if acceptable(&point) {
            let LinePoint { step: s, value, grad, .. } = point;
            let candidate = x + direction * s;
            return Ok(Some((candidate, value, grad.expect("finite point has gradient"))));
        }
        if point.slope * (hi.step - lo.step) >= 0.0 {
            hi = LinePoint { step: lo.step, value: lo.value, grad: None, slope: lo.slope };
        }
        lo = point;
    }
    // Fall back to the best sufficient-decrease point found, if any.
    if lo.step > 0.0 && lo.value < value0 {
        let candidate = x + direction * lo.step;
        let (value, grad) = objective.value_grad(&candidate)?;
        return Ok(Some((candidate, value, grad)));
    }
    let _ = &hi;
    Ok(None)
}

/// Minimizes `objective` from `x0`.
pub fn minimize(
    objective: &mut dyn Objective,
    x0: &DVector<f64>,
    options: &BfgsOptions,
) -> Result<BfgsOutcome> {
    let dim = x0.len();
    let mut x = x0.clone();
    let (mut value, mut grad) = objective.value_grad(&x)?;
    if !value.is_finite() {
        return Err(MlfmError::OptimizationFailed(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut inv_hessian = DMatrix::identity(dim, dim);
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut first_update = true;
    let mut stalled_steps = 0usize;
    let mut resets = 0usize;

    while iterations < options.max_iters {
        if grad.amax() < options.grad_tol {
            converged = true;
            break;
        }
        let mut direction = -(&inv_hessian * &grad);
        let mut slope = direction.dot(&grad);
        if !(slope < 0.0) {
            inv_hessian = DMatrix::identity(dim, dim);
            first_update = true;
            direction = -grad.clone();
            slope = direction.dot(&grad);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }

        let Some((new_x, new_value, new_grad)) =
            wolfe_search(objective, &x, value, slope, &direction)?
        else {
            // No acceptable step along a descent direction: either done to
            // working precision, or the curvature model is bad; retry once
            // from steepest descent.
            if resets < 2 {
                inv_hessian = DMatrix::identity(dim, dim);
                first_update = true;
                resets += 1;
                iterations += 1;
                continue;
            }
            break;
        };

        let s = &new_x - &x;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        if sy > CURVATURE_FLOOR * s.norm() * y.norm() {
            if first_update {
                // Scale the seed inverse Hessian to the observed curvature.
                inv_hessian *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &inv_hessian * &y;
            let yhy = y.dot(&hy);
            // BFGS update of the inverse Hessian.
            inv_hessian += (rho * rho * yhy + rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }

        let obj_drop = value - new_value;
        x = new_x;
        grad = new_grad;
        value = new_value;
        trace.push(value);
        iterations += 1;

        if obj_drop <= options.obj_tol * (1.0 + value.abs()) {
            stalled_steps += 1;
            if stalled_steps == 2 && resets < 4 {
                // Shake off a bad curvature model before giving up.
                inv_hessian = DMatrix::identity(dim, dim);
                first_update = true;
                resets += 1;
            }
            if stalled_steps >= 4 {
                // Sustained relative progress below tolerance: the ftol
                // stopping criterion.
                converged = true;
                break;
            }
        } else {
            stalled_steps = 0;
        }
    }
    if grad.amax() < options.grad_tol {
        converged = true;
    }

    Ok(BfgsOutcome {
        grad_norm: grad.amax(),
        x,
        value,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Objective for Quadratic {
        fn value(&mut self, x: &DVector<f64>) -> f64 {
            0.5 * (&self.a * x).dot(x) - self.b.dot(x)
        }
        fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            Ok((self.value(x), &self.a * x - &self.b))
        }
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&mut self, x: &DVector<f64>) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            let g = DVector::from_row_slice(&[
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]);
            Ok((self.value(x), g))
        }
    }

    #[test]
    fn quadratic_reaches_solution() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0],
        );
        let b = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let expected = a.clone().try_inverse().unwrap() * &b;
        let mut problem = Quadratic { a, b };
        let outcome = minimize(
            &mut problem,
            &DVector::zeros(3),
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(outcome.converged);
        assert!(outcome.grad_norm < 1e-6);
        for i in 0..3 {
            assert_relative_eq!(outcome.x[i], expected[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn ill_conditioned_quadratic_converges() {
        // Condition number 1e6: mimics the likelihood curvature against the
        // unit prior curvature.
        let n = 8;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j { 10.0_f64.powi(i as i32 - 1) } else { 0.0 }
        });
        let b = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        let expected = a.clone().try_inverse().unwrap() * &b;
        let mut problem = Quadratic { a, b };
        let outcome = minimize(
            &mut problem,
            &DVector::zeros(n),
            &BfgsOptions { max_iters: 2000, ..Default::default() },
        )
        .unwrap();
        assert!(outcome.converged, "outcome {outcome:?}");
        for i in 0..n {
            assert_relative_eq!(outcome.x[i], expected[i], epsilon = 1e-4, max_relative = 1e-4);
        }
    }

    #[test]
    fn rosenbrock_reaches_global_minimum() {
        let outcome = minimize(
            &mut Rosenbrock,
            &DVector::from_row_slice(&[-1.2, 1.0]),
            &BfgsOptions { max_iters: 2000, ..Default::default() },
        )
        .unwrap();
        assert!(outcome.converged, "outcome: {outcome:?}");
        assert_relative_eq!(outcome.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(outcome.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn accepted_steps_strictly_decrease() {
        let mut problem = Rosenbrock;
        let outcome = minimize(
            &mut problem,
            &DVector::from_row_slice(&[-1.2, 1.0]),
            &BfgsOptions { max_iters: 300, ..Default::default() },
        )
        .unwrap();
        for pair in outcome.trace.windows(2) {
            assert!(pair[1] < pair[0], "non-decreasing step in {:?}", outcome.trace);
        }
    }

    #[test]
    fn infinite_start_errors() {
        struct Bad;
        impl Objective for Bad {
            fn value(&mut self, _: &DVector<f64>) -> f64 {
                f64::INFINITY
            }
            fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
                Ok((f64::INFINITY, DVector::zeros(x.len())))
            }
        }
        assert!(minimize(&mut Bad, &DVector::zeros(2), &BfgsOptions::default()).is_err());
    }

    #[test]
    fn infeasible_region_is_dodged() {
        // Objective is infinite left of x = -0.5; the search must stay in the
        // feasible half-line and still find the minimum at 0.
        struct Guarded;
        impl Objective for Guarded {
            fn value(&mut self, x: &DVector<f64>) -> f64 {
                if x[0] < -0.5 { f64::INFINITY } else { x[0] * x[0] }
            }
            fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
                Ok((self.value(x), DVector::from_row_slice(&[2.0 * x[0]])))
            }
        }
        let outcome = minimize(
            &mut Guarded,
            &DVector::from_row_slice(&[3.0]),
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(outcome.converged);
        assert!(outcome.x[0].abs() < 1e-6);
    }
}
