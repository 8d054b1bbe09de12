//! Small dense optimizers shared by the fitting and search code:
//! a bound-projected Levenberg–Marquardt for least squares and a
//! Nelder–Mead simplex for derivative-free refinement.

use nalgebra::{DMatrix, DVector};

use crate::error::{OeemError, Result};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative decrease of the cost falls below this.
    pub ftol: f64,
    /// Stop when the relative step length falls below this.
    pub xtol: f64,
    /// Stop when the scaled gradient falls below this.
    pub gtol: f64,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 500,
            ftol: 1e-15,
            xtol: 1e-13,
            gtol: 1e-14,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: DVector<f64>,
    /// Σ r², with r the weighted residuals.
    pub cost: f64,
    /// (JᵀJ)⁻¹ at the solution, unscaled.
    pub jtj_inverse: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub iterations: usize,
}

/// Parameters sitting on a bound whose descent direction points outside.
fn active_set(x: &DVector<f64>, grad: &DVector<f64>, opts: &LmOptions) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            let at_lo = opts.lower.as_ref().is_some_and(|lo| x[i] <= lo[i]);
            let at_hi = opts.upper.as_ref().is_some_and(|hi| x[i] >= hi[i]);
            (at_lo && grad[i] > 0.0) || (at_hi && grad[i] < 0.0)
        })
        .collect()
}

fn project(x: &mut DVector<f64>, opts: &LmOptions) {
    if let Some(lo) = &opts.lower {
        for (v, l) in x.iter_mut().zip(lo.iter()) {
            *v = v.max(*l);
        }
    }
    if let Some(hi) = &opts.upper {
        for (v, h) in x.iter_mut().zip(hi.iter()) {
            *v = v.min(*h);
        }
    }
}

/// Minimizes Σ rᵢ(x)² given residuals and their Jacobian.
pub fn levenberg_marquardt<R, J>(
    residuals: R,
    jacobian: J,
    x0: DVector<f64>,
    opts: &LmOptions,
) -> Result<LmReport>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let n = x0.len();
    let mut x = x0;
    project(&mut x, opts);
    let mut r = residuals(&x);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(OeemError::FitFailure("non-finite residuals at the starting point".into()));
    }
    let mut jac = jacobian(&x);
    let mut lambda = {
        let jtj = jac.transpose() * &jac;
        1e-3 * (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300)
    };
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        let diag: Vec<f64> = (0..n).map(|i| jtj[(i, i)].max(1e-300)).collect();
        let active = active_set(&x, &grad, opts);
        let scaled_grad = (0..n)
            .filter(|&i| !active[i])
            .map(|i| grad[i].abs() / diag[i].sqrt())
            .fold(0.0, f64::max);
        if scaled_grad <= opts.gtol * cost.sqrt().max(1e-300) || cost == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            let mut rhs = -&grad;
            for i in 0..n {
                a[(i, i)] += lambda * diag[i];
                if active[i] {
                    a.row_mut(i).fill(0.0);
                    a.column_mut(i).fill(0.0);
                    a[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                }
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut candidate = &x + &step;
            project(&mut candidate, opts);
            let r_new = residuals(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new.is_finite() && cost_new <= cost {
                let rel_drop = (cost - cost_new) / cost.max(1e-300);
                let rel_step = (&candidate - &x).norm() / (x.norm() + opts.xtol);
                x = candidate;
                r = r_new;
                cost = cost_new;
                jac = jacobian(&x);
                lambda = (lambda / 3.0).max(1e-300);
                accepted = true;
                if rel_drop <= opts.ftol || rel_step <= opts.xtol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e300 {
                break;
            }
        }
        if !accepted {
            // no descent direction left: at a (possibly constrained) minimum
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(OeemError::FitFailure(format!(
            "no convergence after {iterations} iterations"
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(OeemError::FitFailure("parameters diverged".into()));
    }
    let jtj = jac.transpose() * &jac;
    let jtj_inverse = jtj
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| jtj.pseudo_inverse(1e-300).ok())
        .ok_or_else(|| OeemError::FitFailure("singular normal matrix".into()))?;
    Ok(LmReport {
        params: x,
        cost,
        jtj_inverse,
        residuals: r,
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Stop when every simplex vertex lies within this distance of the best
    /// (per coordinate, in the caller's units).
    pub xtol: Vec<f64>,
    /// Initial simplex edge per coordinate.
    pub initial_step: Vec<f64>,
}

/// Minimizes `f` starting from `x0`. Returns the best point and value.
/// Deterministic for a given input.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step[i];
        let v = eval(&x);
        simplex.push((x, v));
    }
    let mut evaluations = n + 1;
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    };

    while evaluations < opts.max_evaluations {
        sort(&mut simplex);
        let best = simplex[0].0.clone();
        let small = simplex.iter().skip(1).all(|(x, _)| {
            x.iter()
                .zip(&best)
                .zip(&opts.xtol)
                .all(|((a, b), tol)| (a - b).abs() <= *tol)
        });
        if small {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(x, _)| x[i]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let reflected = along(-1.0);
        let fr = eval(&reflected);
        evaluations += 1;
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = eval(&expanded);
            evaluations += 1;
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < worst.1 {
                let c = along(-0.5);
                let v = eval(&c);
                (c, v)
            } else {
                let c = along(0.5);
                let v = eval(&c);
                (c, v)
            };
            evaluations += 1;
            if fc < worst.1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = item
                        .0
                        .iter()
                        .zip(&best)
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    let v = eval(&x);
                    *item = (x, v);
                }
                evaluations += n;
            }
        }
    }
    sort(&mut simplex);
    let (x, v) = simplex.swap_remove(0);
    (x, v)
}
