//! Hyperbolic line-position fits Δ(B) = |g|·√(B⊥² + (B∥ + B)²) and the
//! gyromagnetic ratio extracted from them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{FREE_ION_GAMMA_MHZ_PER_T, SHIELDING_FACTOR};
use crate::error::{OeemError, Result};
use crate::optim::{levenberg_marquardt, LmOptions, LmReport};

const HZ_PER_MHZ: f64 = 1e6;

/// Default starting value for a free gyromagnetic ratio, MHz/T.
pub const DEFAULT_INITIAL_G_MHZ_PER_T: f64 = -2.0863;

/// Two minima whose costs agree to this relative tolerance are treated as
/// equally good.
const COST_TIE_TOLERANCE: f64 = 1e-9;

/// Minimum separation in B∥ for two minima to count as distinct, T.
const DISTINCT_B_PAR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePoint {
    /// Bias field, T (signed).
    pub b: f64,
    /// Line position, Hz.
    pub freq: f64,
    /// 1σ uncertainty of `freq`, Hz.
    pub freq_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePositionSeries {
    pub points: Vec<LinePoint>,
    pub label: String,
}

impl LinePositionSeries {
    pub fn new(label: impl Into<String>, points: Vec<LinePoint>) -> Self {
        LinePositionSeries {
            points,
            label: label.into(),
        }
    }

    /// Checks point validity and that there are enough points for a fit with
    /// `n_params` free parameters.
    pub fn validate(&self, n_params: usize) -> Result<()> {
        for p in &self.points {
            if !(p.b.is_finite() && p.freq.is_finite() && p.freq_err.is_finite()) {
                return Err(OeemError::InvalidInput(format!("{}: non-finite point", self.label)));
            }
            if p.freq < 0.0 {
                return Err(OeemError::InvalidInput(format!("{}: negative frequency", self.label)));
            }
            if p.freq_err <= 0.0 {
                return Err(OeemError::InvalidInput(format!(
                    "{}: frequency errors must be positive",
                    self.label
                )));
            }
        }
        let needed = n_params + 1;
        if self.points.len() < needed {
            return Err(OeemError::InsufficientData {
                needed,
                got: self.points.len(),
            });
        }
        Ok(())
    }
}

/// Line position at field `b` in Hz, with `g_hz_per_t` in Hz/T.
pub fn eval_hyperbola(b: f64, b_par: f64, b_perp: f64, g_hz_per_t: f64) -> f64 {
    g_hz_per_t.abs() * b_perp.hypot(b_par + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Equal weights; covariance scaled by the reduced χ².
    #[default]
    Uniform,
    /// `freq_err` taken as 1σ; covariance unscaled.
    SuppliedErrors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub weighting: Weighting,
    /// Sign of B∥ preferred when two minima fit equally well.
    pub prefer_b_par_sign: Option<f64>,
    /// Starting value for a free g, MHz/T; its sign is the reported sign.
    pub initial_g: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weighting: Weighting::Uniform,
            prefer_b_par_sign: None,
            initial_g: DEFAULT_INITIAL_G_MHZ_PER_T,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolaFit {
    pub label: String,
    /// T, signed.
    pub b_par: f64,
    /// T, folded to ≥ 0.
    pub b_perp: f64,
    /// MHz/T, signed.
    pub g_eff: f64,
    pub g_fixed: bool,
    /// 1σ errors of (B∥, B⊥[, g]).
    pub errors: Vec<f64>,
    /// Row-major covariance of (B∥, B⊥[, g]) in T and MHz/T.
    pub covariance: Vec<Vec<f64>>,
    /// Hz.
    pub residual_rms: f64,
    pub chi2: f64,
    pub n_points: usize,
    /// Number of distinct minima with the best cost; above 1 the B∥ sign was
    /// chosen by tie-breaking.
    pub ambiguous_minima: usize,
}

impl HyperbolaFit {
    pub fn eval(&self, b: f64) -> f64 {
        eval_hyperbola(b, self.b_par, self.b_perp, self.g_eff * HZ_PER_MHZ)
    }
}

struct Problem<'a> {
    points: &'a [LinePoint],
    weights: Vec<f64>,
    fixed_g: Option<f64>,
}

impl Problem<'_> {
    fn g_of(&self, p: &DVector<f64>) -> f64 {
        self.fixed_g.unwrap_or_else(|| p[2])
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let g = self.g_of(p) * HZ_PER_MHZ;
        DVector::from_iterator(
            self.points.len(),
            self.points
                .iter()
                .zip(&self.weights)
                .map(|(pt, w)| (eval_hyperbola(pt.b, p[0], p[1], g) - pt.freq) / w),
        )
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let g = self.g_of(p);
        let ncols = if self.fixed_g.is_some() { 2 } else { 3 };
        let mut jac = DMatrix::zeros(self.points.len(), ncols);
        for (k, (pt, w)) in self.points.iter().zip(&self.weights).enumerate() {
            let u = p[0] + pt.b;
            let s = p[1].hypot(u).max(f64::MIN_POSITIVE);
            let scale = g.abs() * HZ_PER_MHZ / w;
            jac[(k, 0)] = scale * u / s;
            jac[(k, 1)] = scale * p[1] / s;
            if ncols == 3 {
                jac[(k, 2)] = g.signum() * HZ_PER_MHZ * s / w;
            }
        }
        jac
    }
}

/// Linear least squares for polynomial coefficients c₀ + c₁x + … (ascending).
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).ok()?;
    Some(sol.iter().copied().collect())
}

/// Starting points for (B∥, B⊥[, g]).
fn initial_guesses(points: &[LinePoint], fixed_g: Option<f64>, initial_g: f64) -> Vec<Vec<f64>> {
    let bs: Vec<f64> = points.iter().map(|p| p.b).collect();
    let f2: Vec<f64> = points.iter().map(|p| p.freq * p.freq).collect();
    let mut guesses = Vec::new();

    // Δ² is a quadratic in B: g²B² + 2g²B∥B + g²(B∥² + B⊥²).
    let algebraic = match fixed_g {
        Some(g) => {
            let g2 = (g * HZ_PER_MHZ).powi(2);
            let y: Vec<f64> = bs.iter().zip(&f2).map(|(b, f)| f / g2 - b * b).collect();
            polyfit(&bs, &y, 1).map(|c| (c[1] / 2.0, c[0], g.abs()))
        }
        None => polyfit(&bs, &f2, 2).and_then(|c| {
            (c[2] > 0.0).then(|| {
                let g2 = c[2];
                (c[1] / (2.0 * g2), c[0] / g2, g2.sqrt() / HZ_PER_MHZ)
            })
        }),
    };
    let g0 = fixed_g.unwrap_or(initial_g);
    if let Some((b_par, c, g_abs)) = algebraic {
        let perp2 = c - b_par * b_par;
        let g = if fixed_g.is_some() { g0 } else { g_abs.copysign(g0) };
        if b_par.is_finite() && g.is_finite() && g != 0.0 {
            let b_perp = perp2.max(0.0).sqrt();
            guesses.push(vec![b_par, b_perp.max(1e-6), g]);
        }
    }

    // vertex estimate from the smallest observed line position
    let k_min = (0..points.len())
        .min_by(|&a, &b| points[a].freq.total_cmp(&points[b].freq))
        .unwrap_or(0);
    let b_par = -points[k_min].b;
    let b_perp = (points[k_min].freq / (g0.abs() * HZ_PER_MHZ)).max(1e-6);
    guesses.push(vec![b_par, b_perp, g0]);
    guesses.push(vec![-b_par, b_perp, g0]);
    guesses.push(vec![b_par, 2.0 * b_perp + 1e-3, g0]);

    for g in &mut guesses {
        if fixed_g.is_some() {
            g.truncate(2);
        }
    }
    guesses
}

fn lm_solution(problem: &Problem, x0: Vec<f64>) -> Option<LmReport> {
    let opts = LmOptions {
        max_iterations: 1000,
        ..Default::default()
    };
    levenberg_marquardt(
        |p| problem.residuals(p),
        |p| problem.jacobian(p),
        DVector::from_vec(x0),
        &opts,
    )
    .ok()
}

/// Weighted least-squares fit of a line-position series. `fix_g` fixes the
/// gyromagnetic ratio in MHz/T; otherwise it is a third free parameter.
pub fn fit_hyperbola(
    series: &LinePositionSeries,
    fix_g: Option<f64>,
    opts: &FitOptions,
) -> Result<HyperbolaFit> {
    let n_params = if fix_g.is_some() { 2 } else { 3 };
    series.validate(n_params)?;
    if let Some(g) = fix_g {
        if !g.is_finite() || g == 0.0 {
            return Err(OeemError::InvalidInput("fixed g must be finite and nonzero".into()));
        }
    }
    if !opts.initial_g.is_finite() || opts.initial_g == 0.0 {
        return Err(OeemError::InvalidInput("initial g must be finite and nonzero".into()));
    }
    let weights = match opts.weighting {
        Weighting::Uniform => vec![1.0; series.points.len()],
        Weighting::SuppliedErrors => series.points.iter().map(|p| p.freq_err).collect(),
    };
    let problem = Problem {
        points: &series.points,
        weights,
        fixed_g: fix_g,
    };

    let mut solutions: Vec<LmReport> = initial_guesses(&series.points, fix_g, opts.initial_g)
        .into_iter()
        .filter_map(|x0| lm_solution(&problem, x0))
        .filter(|r| r.params.iter().all(|v| v.is_finite()))
        .collect();
    if solutions.is_empty() {
        return Err(OeemError::FitFailure(format!(
            "{}: no starting point converged",
            series.label
        )));
    }
    solutions.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let best_cost = solutions[0].cost;
    let tied: Vec<&LmReport> = solutions
        .iter()
        .filter(|r| r.cost - best_cost <= COST_TIE_TOLERANCE * best_cost.max(f64::MIN_POSITIVE))
        .collect();
    let mut distinct: Vec<&LmReport> = Vec::new();
    for r in &tied {
        if distinct
            .iter()
            .all(|d| (d.params[0] - r.params[0]).abs() > DISTINCT_B_PAR + 1e-6 * d.params[0].abs())
        {
            distinct.push(r);
        }
    }
    let chosen = match opts.prefer_b_par_sign {
        Some(sign) if distinct.len() > 1 => distinct
            .iter()
            .find(|r| r.params[0] * sign > 0.0)
            .copied()
            .unwrap_or(distinct[0]),
        _ => distinct[0],
    };

    let n = series.points.len();
    let dof = n.saturating_sub(n_params);
    let chi2 = chosen.cost;
    let cov_scale = match opts.weighting {
        Weighting::Uniform if dof > 0 => chi2 / dof as f64,
        _ => 1.0,
    };
    let mut cov = &chosen.jtj_inverse * cov_scale;
    let mut params = chosen.params.clone();
    if params[1] < 0.0 {
        params[1] = -params[1];
        for j in 0..n_params {
            if j != 1 {
                cov[(1, j)] = -cov[(1, j)];
                cov[(j, 1)] = -cov[(j, 1)];
            }
        }
    }
    let g_eff = match fix_g {
        Some(g) => g,
        None => params[2].abs().copysign(opts.initial_g),
    };
    if fix_g.is_none() && params[2].signum() != opts.initial_g.signum() {
        // report the configured sign; flip the matching covariance terms
        for j in 0..n_params {
            if j != 2 {
                cov[(2, j)] = -cov[(2, j)];
                cov[(j, 2)] = -cov[(j, 2)];
            }
        }
    }
    let g_hz = g_eff * HZ_PER_MHZ;
    let residual_rms = (series
        .points
        .iter()
        .map(|p| (eval_hyperbola(p.b, params[0], params[1], g_hz) - p.freq).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Ok(HyperbolaFit {
        label: series.label.clone(),
        b_par: params[0],
        b_perp: params[1],
        g_eff,
        g_fixed: fix_g.is_some(),
        errors: (0..n_params).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        covariance: (0..n_params)
            .map(|i| (0..n_params).map(|j| cov[(i, j)]).collect())
            .collect(),
        residual_rms,
        chi2,
        n_points: n,
        ambiguous_minima: distinct.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GyroFit {
    pub fits: Vec<HyperbolaFit>,
    /// Combined gyromagnetic ratio, MHz/T (negative by convention).
    pub mean: f64,
    /// 1σ, MHz/T.
    pub error: f64,
}

/// Three-parameter fits of every series and their combined g. Estimates are
/// inverse-variance weighted; when any per-series error is zero the plain
/// mean is used instead.
pub fn fit_gyromagnetic(series_set: &[LinePositionSeries], opts: &FitOptions) -> Result<GyroFit> {
    if series_set.is_empty() {
        return Err(OeemError::InsufficientData { needed: 1, got: 0 });
    }
    let fits: Vec<HyperbolaFit> = series_set
        .par_iter()
        .map(|s| fit_hyperbola(s, None, opts))
        .collect::<Result<_>>()?;
    let fits: Vec<HyperbolaFit> = fits
        .into_iter()
        .map(|mut f| {
            f.g_eff = -f.g_eff.abs();
            f
        })
        .collect();
    let values: Vec<f64> = fits.iter().map(|f| f.g_eff).collect();
    let sigmas: Vec<f64> = fits.iter().map(|f| f.errors[2]).collect();
    let (mean, error) = if sigmas.iter().all(|s| *s > 0.0 && s.is_finite()) {
        let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
        let wsum: f64 = w.iter().sum();
        let mean = values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / wsum;
        (mean, wsum.sqrt().recip())
    } else {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let error = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        (mean, error)
    };
    Ok(GyroFit { fits, mean, error })
}

/// Gyromagnetic ratio in the material from the free-ion value, MHz/T.
pub fn shielded_gamma(free_ion_mhz_per_t: f64, shielding_factor: f64) -> f64 {
    free_ion_mhz_per_t / shielding_factor
}

/// Yttrium gyromagnetic ratio in YSO, MHz/T.
pub fn yso_gamma() -> f64 {
    shielded_gamma(FREE_ION_GAMMA_MHZ_PER_T, SHIELDING_FACTOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{default_site_catalog, find_site, PhysicalConstants, Vector3};
    use crate::spinmodel::{SpinBranch, SpinModel};
    use proptest::prelude::*;

    fn synthetic(b_par: f64, b_perp: f64, g: f64, bs: &[f64]) -> LinePositionSeries {
        let points = bs
            .iter()
            .map(|&b| LinePoint {
                b,
                freq: eval_hyperbola(b, b_par, b_perp, g * 1e6),
                freq_err: 1.0,
            })
            .collect();
        LinePositionSeries::new("synthetic", points)
    }

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn hyperbola_examples() {
        assert_eq!(eval_hyperbola(-0.1, 0.1, 0.0, 2.0863e6), 0.0);
        let at_zero = eval_hyperbola(0.0, 0.164, 0.049, 2.0866e6);
        assert!((at_zero - 357e3).abs() < 1e3, "{at_zero}");
        let slope = (eval_hyperbola(1001.0, 0.1, 0.05, 2e6) - eval_hyperbola(1000.0, 0.1, 0.05, 2e6)) / 1.0;
        assert!((slope - 2e6).abs() < 1.0);
    }

    #[test]
    fn noise_free_recovery() {
        let s = synthetic(0.164, 0.049, -2.0863, &grid(-0.3, 0.3, 31));
        let f = fit_hyperbola(&s, None, &FitOptions::default()).unwrap();
        assert!((f.b_par / 0.164 - 1.0).abs() < 1e-6);
        assert!((f.b_perp / 0.049 - 1.0).abs() < 1e-6);
        assert!((f.g_eff / -2.0863 - 1.0).abs() < 1e-6);
        let f2 = fit_hyperbola(&s, Some(-2.0863), &FitOptions::default()).unwrap();
        assert!((f2.b_par / 0.164 - 1.0).abs() < 1e-6);
        assert_eq!(f2.errors.len(), 2);
    }

    #[test]
    fn insufficient_points() {
        let s = synthetic(0.1, 0.05, 2.0, &[0.1, 0.2]);
        assert!(matches!(
            fit_hyperbola(&s, None, &FitOptions::default()),
            Err(OeemError::InsufficientData { needed: 4, got: 2 })
        ));
        assert!(matches!(
            fit_hyperbola(&s, Some(2.0), &FitOptions::default()),
            Err(OeemError::InsufficientData { needed: 3, got: 2 })
        ));
        let mut bad = synthetic(0.1, 0.05, 2.0, &[0.1, 0.2, 0.3]);
        bad.points[0].freq_err = 0.0;
        assert!(matches!(bad.validate(2), Err(OeemError::InvalidInput(_))));
    }

    #[test]
    fn folding_of_b_perp() {
        let bs = grid(-0.2, 0.25, 20);
        let a = fit_hyperbola(&synthetic(0.05, 0.03, 2.0863, &bs), None, &FitOptions::default()).unwrap();
        let b = fit_hyperbola(&synthetic(0.05, -0.03, 2.0863, &bs), None, &FitOptions::default()).unwrap();
        assert!(a.b_perp >= 0.0 && b.b_perp >= 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn mirrored_series_mirrors_b_par() {
        let bs = grid(-0.05, 0.3, 15);
        let s = synthetic(-0.12, 0.04, 2.0863, &bs);
        let mirrored = LinePositionSeries::new(
            "mirrored",
            s.points.iter().map(|p| LinePoint { b: -p.b, ..*p }).collect(),
        );
        let f = fit_hyperbola(&s, None, &FitOptions::default()).unwrap();
        let m = fit_hyperbola(&mirrored, None, &FitOptions::default()).unwrap();
        assert_eq!(f.ambiguous_minima, 1);
        assert!((f.b_par + m.b_par).abs() < 1e-9);
        assert!((f.b_perp - m.b_perp).abs() < 1e-9);
    }

    #[test]
    fn symmetric_series_has_one_compromise_minimum() {
        // both halves are vertex-shifted copies; no single branch fits them
        let bs: Vec<f64> = vec![-0.3, -0.25, -0.2, 0.2, 0.25, 0.3];
        let points = bs
            .iter()
            .map(|&b| LinePoint { b, freq: eval_hyperbola(b.abs(), -0.1, 0.02, 2e6), freq_err: 1.0 })
            .collect();
        let f = fit_hyperbola(&LinePositionSeries::new("sym", points), Some(2.0), &FitOptions::default()).unwrap();
        assert_eq!(f.ambiguous_minima, 1);
        assert!(f.b_par.abs() < 1e-9);
    }

    #[test]
    fn model_y12_ground_branch_matches_observed_parameters() {
        // Y12 ground-state splittings on the negative half-axis along b
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let site = &sites[find_site(&sites, "Y12").unwrap()];
        let points = grid(-0.3, -0.02, 30)
            .into_iter()
            .map(|b| {
                let c = model
                    .site_coupling(site, &Vector3::new(0.0, 0.0, b), SpinBranch::Down)
                    .unwrap();
                LinePoint { b, freq: c.delta_g, freq_err: 1.0 }
            })
            .collect();
        let gamma = PhysicalConstants::default().nuclear_gamma_hz_per_t() / 1e6;
        let f = fit_hyperbola(&LinePositionSeries::new("Y12 g", points), Some(gamma), &FitOptions::default()).unwrap();
        assert!((f.b_par - 0.040).abs() <= 0.002, "{}", f.b_par);
        assert!((f.b_perp - 0.031).abs() <= 0.002, "{}", f.b_perp);
    }

    #[test]
    fn gyro_combination() {
        let s = synthetic(0.164, 0.049, 2.0863, &grid(-0.3, 0.0, 25));
        let g = fit_gyromagnetic(std::slice::from_ref(&s), &FitOptions::default()).unwrap();
        assert_eq!(g.mean, g.fits[0].g_eff);
        assert!(g.mean < 0.0);
        assert!((g.mean + 2.0863).abs() < 1e-6);
        assert!(fit_gyromagnetic(&[], &FitOptions::default()).is_err());
    }

    #[test]
    fn shielding_identity() {
        assert!((yso_gamma() / -2.0863 - 1.0).abs() < 1e-4);
        let from_constants = PhysicalConstants::default().nuclear_gamma_hz_per_t() / 1e6;
        assert!((from_constants.abs() / yso_gamma().abs() - 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn hyperbola_is_even_about_vertex(b_par in -0.5f64..0.5, b_perp in -0.3f64..0.3, x in 0.0f64..1.0, g in 0.1f64..5.0) {
            let a = eval_hyperbola(-b_par + x, b_par, b_perp, g * 1e6);
            let b = eval_hyperbola(-b_par - x, b_par, b_perp, g * 1e6);
            // only the rounding of -b_par ± x + b_par differs
            let ulp = 4.0 * f64::EPSILON * g * 1e6 * (b_par.abs() + x);
            prop_assert!((a - b).abs() <= ulp, "{} vs {}", a, b);
            let exact = eval_hyperbola(x, 0.0, b_perp, g * 1e6);
            prop_assert_eq!(exact, eval_hyperbola(-x, 0.0, b_perp, g * 1e6));
        }

        #[test]
        fn round_trip_recovers_parameters(b_par in -0.3f64..0.3, b_perp in 0.01f64..0.3, g in 1.0f64..3.0) {
            let s = synthetic(b_par, b_perp, g, &grid(-0.4, 0.4, 41));
            let f = fit_hyperbola(&s, None, &FitOptions { initial_g: 2.0, ..Default::default() }).unwrap();
            prop_assert!((f.b_par - b_par).abs() <= 1e-6 * b_par.abs().max(0.01));
            prop_assert!((f.b_perp / b_perp - 1.0).abs() <= 1e-6);
            prop_assert!((f.g_eff / g - 1.0).abs() <= 1e-6);
        }
    }
}
