//! Spin prominence λᵢ = ρᵢ / Σ_{j≠i} ρⱼ and its maximization over the bias
//! field.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{Vector3, YttriumSite};
use crate::error::{OeemError, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::spinmodel::{SpinBranch, SpinModel};

pub const DEFAULT_ANGULAR_STEP_DEG: f64 = 10.0;
pub const DEFAULT_MAGNITUDE_STEPS: usize = 40;
pub const DEFAULT_B_MIN: f64 = 1e-3;
pub const DEFAULT_B_MAX: f64 = 1.0;
/// Signed magnitudes per sign for a fixed-axis ρ scan.
pub const DEFAULT_SCAN_STEPS: usize = 400;

const ANGLE_TOLERANCE: f64 = 0.1 * PI / 180.0;
const LOG_B_TOLERANCE: f64 = 1e-4;

/// λ of site `index`; +∞ when every other ρ is exactly zero.
pub fn prominence(index: usize, rhos: &[f64]) -> f64 {
    let rho = rhos[index];
    if rho == 0.0 {
        return 0.0;
    }
    let others: f64 = rhos
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, r)| r)
        .sum();
    if others == 0.0 {
        f64::INFINITY
    } else {
        rho / others
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionConstraint {
    FreeSphere,
    FixedAxis(Vector3),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub angular_step_deg: f64,
    pub magnitude_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            angular_step_deg: DEFAULT_ANGULAR_STEP_DEG,
            magnitude_steps: DEFAULT_MAGNITUDE_STEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSearchSpace {
    pub direction: DirectionConstraint,
    /// T.
    pub b_min: f64,
    /// T.
    pub b_max: f64,
    pub grid: GridSpec,
    pub refine: bool,
}

impl Default for FieldSearchSpace {
    fn default() -> Self {
        FieldSearchSpace {
            direction: DirectionConstraint::FreeSphere,
            b_min: DEFAULT_B_MIN,
            b_max: DEFAULT_B_MAX,
            grid: GridSpec::default(),
            refine: true,
        }
    }
}

impl FieldSearchSpace {
    pub fn validate(&self, zero_field_threshold: f64) -> Result<()> {
        if !(self.b_min.is_finite() && self.b_max.is_finite()) || self.b_min > self.b_max {
            return Err(OeemError::InvalidInput("magnitude range must satisfy B_min ≤ B_max".into()));
        }
        if self.b_min < zero_field_threshold {
            return Err(OeemError::InvalidInput(format!(
                "B_min = {} T is below the zero-field threshold {} T",
                self.b_min, zero_field_threshold
            )));
        }
        if !(self.grid.angular_step_deg > 0.0 && self.grid.angular_step_deg <= 90.0) {
            return Err(OeemError::InvalidInput("angular step must be in (0, 90] degrees".into()));
        }
        if self.grid.magnitude_steps == 0 {
            return Err(OeemError::InvalidInput("need at least one magnitude step".into()));
        }
        if let DirectionConstraint::FixedAxis(axis) = self.direction {
            if !(axis.norm() > 0.0 && axis.iter().all(|v| v.is_finite())) {
                return Err(OeemError::InvalidInput("fixed axis must be a nonzero vector".into()));
            }
        }
        Ok(())
    }

    /// Grid directions: the b-pole hemisphere for a free search.
    pub fn directions(&self) -> Vec<Vector3> {
        match self.direction {
            DirectionConstraint::FixedAxis(axis) => vec![axis.normalize()],
            DirectionConstraint::FreeSphere => {
                let step = self.grid.angular_step_deg;
                let n_polar = (90.0 / step).round().max(1.0) as usize;
                let mut dirs = vec![Vector3::new(0.0, 0.0, 1.0)];
                for i in 1..=n_polar {
                    let theta = (i as f64 * 90.0 / n_polar as f64).to_radians();
                    let n_az = (360.0 / step).round().max(1.0) as usize;
                    for k in 0..n_az {
                        let phi = (k as f64 * 360.0 / n_az as f64).to_radians();
                        dirs.push(spherical(theta, phi));
                    }
                }
                dirs
            }
        }
    }

    /// Log-spaced magnitudes from B_min to B_max.
    pub fn magnitudes(&self) -> Vec<f64> {
        log_grid(self.b_min, self.b_max, self.grid.magnitude_steps)
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn spherical(theta: f64, phi: f64) -> Vector3 {
    Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProminenceResult {
    pub site_label: String,
    pub lambda: f64,
    /// T.
    pub best_field: Vector3,
    pub rho_at_best: f64,
    pub all_rho: Vec<f64>,
}

/// Prominence of `index` at one field; `None` where the model is invalid.
fn lambda_at(
    model: &SpinModel,
    sites: &[YttriumSite],
    branch: SpinBranch,
    index: usize,
    field: &Vector3,
) -> Option<(f64, Vec<f64>)> {
    let rhos = model.rhos(sites, field, branch).ok()?;
    Some((prominence(index, &rhos), rhos))
}

/// Coarse grid search over the space followed by a simplex refinement in
/// (polar, azimuth, ln B). Reproducible for a given space.
pub fn maximize_prominence(
    model: &SpinModel,
    sites: &[YttriumSite],
    branch: SpinBranch,
    index: usize,
    space: &FieldSearchSpace,
) -> Result<ProminenceResult> {
    space.validate(model.zero_field_threshold)?;
    if index >= sites.len() {
        return Err(OeemError::InvalidInput(format!("site index {index} out of range")));
    }
    let dirs = space.directions();
    let mags = space.magnitudes();
    let candidates: Vec<(usize, Vector3)> = dirs
        .iter()
        .flat_map(|d| mags.iter().map(move |m| d * *m))
        .enumerate()
        .collect();
    let best_grid = candidates
        .par_iter()
        .filter_map(|(k, field)| {
            lambda_at(model, sites, branch, index, field).map(|(l, _)| (*k, l))
        })
        .reduce_with(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
    let Some((k_best, mut lambda)) = best_grid else {
        return Err(OeemError::InvalidInput("no valid field in the search space".into()));
    };
    let mut field = candidates[k_best].1;

    if space.refine && lambda.is_finite() && space.b_min < space.b_max {
        let (ln_lo, ln_hi) = (space.b_min.ln(), space.b_max.ln());
        let ln_b0 = field.norm().ln();
        let objective_field = |x: &[f64]| -> Vector3 {
            let b = x[0].clamp(ln_lo, ln_hi).exp();
            match space.direction {
                DirectionConstraint::FixedAxis(axis) => axis.normalize() * b,
                DirectionConstraint::FreeSphere => spherical(x[1], x[2]) * b,
            }
        };
        let objective = |x: &[f64]| {
            lambda_at(model, sites, branch, index, &objective_field(x))
                .map(|(l, _)| -l)
                .unwrap_or(f64::INFINITY)
        };
        let step = space.grid.angular_step_deg.to_radians() / 2.0;
        let ln_step = if mags.len() > 1 { (ln_hi - ln_lo) / (mags.len() - 1) as f64 / 2.0 } else { 0.1 };
        let (x0, opts) = match space.direction {
            DirectionConstraint::FixedAxis(_) => (
                vec![ln_b0],
                NelderMeadOptions {
                    max_evaluations: 400,
                    xtol: vec![LOG_B_TOLERANCE],
                    initial_step: vec![ln_step],
                },
            ),
            DirectionConstraint::FreeSphere => {
                let u = field.normalize();
                let theta = u.z.clamp(-1.0, 1.0).acos();
                let phi = u.y.atan2(u.x);
                (
                    vec![ln_b0, theta, phi],
                    NelderMeadOptions {
                        max_evaluations: 2000,
                        xtol: vec![LOG_B_TOLERANCE, ANGLE_TOLERANCE, ANGLE_TOLERANCE],
                        initial_step: vec![ln_step, step, step],
                    },
                )
            }
        };
        let (x, v) = nelder_mead(objective, &x0, &opts);
        if -v > lambda {
            lambda = -v;
            field = objective_field(&x);
        }
    }

    let (lambda_check, all_rho) = lambda_at(model, sites, branch, index, &field)
        .ok_or_else(|| OeemError::InvalidInput("best field left the model's validity range".into()))?;
    debug_assert!(lambda_check == lambda || (lambda_check - lambda).abs() <= 1e-12 * lambda.abs());
    Ok(ProminenceResult {
        site_label: sites[index].label.clone(),
        lambda: lambda_check,
        best_field: field,
        rho_at_best: all_rho[index],
        all_rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoScan {
    pub rho_max: f64,
    /// Signed magnitude along the axis at the maximum, T.
    pub b_at_max: f64,
}

/// Largest ρ of `index` over signed magnitudes along `axis` with
/// B_min ≤ |B| ≤ B_max, from a log grid per sign plus a local refinement.
pub fn rho_max_scan(
    model: &SpinModel,
    sites: &[YttriumSite],
    branch: SpinBranch,
    index: usize,
    axis: &Vector3,
    b_range: (f64, f64),
    steps: usize,
) -> Result<RhoScan> {
    let space = FieldSearchSpace {
        direction: DirectionConstraint::FixedAxis(*axis),
        b_min: b_range.0,
        b_max: b_range.1,
        grid: GridSpec {
            angular_step_deg: DEFAULT_ANGULAR_STEP_DEG,
            magnitude_steps: steps,
        },
        refine: true,
    };
    space.validate(model.zero_field_threshold)?;
    if index >= sites.len() {
        return Err(OeemError::InvalidInput(format!("site index {index} out of range")));
    }
    let site = std::slice::from_ref(&sites[index]);
    let u = axis.normalize();
    let rho_at = |b: f64| -> f64 {
        model
            .rhos(site, &(u * b), branch)
            .map(|r| r[0])
            .unwrap_or(0.0)
    };
    let mags = space.magnitudes();
    let signed: Vec<f64> = mags.iter().flat_map(|m| [-*m, *m]).collect();
    let (mut b_best, mut rho_best) = signed
        .par_iter()
        .map(|&b| (b, rho_at(b)))
        .collect::<Vec<_>>()
        .into_iter()
        .fold((signed[0], f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });

    if b_range.0 < b_range.1 {
        let sign = b_best.signum();
        let (ln_lo, ln_hi) = (b_range.0.ln(), b_range.1.ln());
        let f = |x: &[f64]| -rho_at(sign * x[0].clamp(ln_lo, ln_hi).exp());
        let step = if mags.len() > 1 { (ln_hi - ln_lo) / (mags.len() - 1) as f64 } else { 0.1 };
        let (x, v) = nelder_mead(
            f,
            &[b_best.abs().ln()],
            &NelderMeadOptions {
                max_evaluations: 200,
                xtol: vec![1e-6],
                initial_step: vec![step],
            },
        );
        if -v > rho_best {
            rho_best = -v;
            b_best = sign * x[0].clamp(ln_lo, ln_hi).exp();
        }
    }
    Ok(RhoScan {
        rho_max: rho_best,
        b_at_max: b_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{default_site_catalog, find_site, MagneticClass};
    use proptest::prelude::*;

    const TABLE_RHO_MAX: [(&str, f64); 15] = [
        ("Y1", 0.02), ("Y2", 0.04), ("Y3", 0.03), ("Y4", 1.00), ("Y5", 0.51),
        ("Y6", 0.20), ("Y7", 0.02), ("Y8", 0.08), ("Y9", 0.02), ("Y10", 0.06),
        ("Y11", 0.03), ("Y12", 0.38), ("Y13", 0.03), ("Y14", 0.10), ("Y15", 0.10),
    ];

    #[test]
    fn prominence_examples() {
        assert_eq!(prominence(0, &[0.5, 0.0, 0.0]), f64::INFINITY);
        assert_eq!(prominence(0, &[0.0, 0.2, 0.3]), 0.0);
        assert!((prominence(1, &[0.1, 0.97, 0.09]) - 0.97 / 0.19).abs() < 1e-12);
    }

    #[test]
    fn y4_prominence_at_175_mt() {
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let i = find_site(&sites, "Y4").unwrap();
        let rhos = model.rhos(&sites, &Vector3::new(0.0, 0.0, 0.175), SpinBranch::Down).unwrap();
        let l = prominence(i, &rhos);
        assert!((l - 5.1).abs() <= 0.5, "{l}");
    }

    #[test]
    fn rho_max_along_b_matches_table() {
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let b = Vector3::new(0.0, 0.0, 1.0);
        for (label, expected) in TABLE_RHO_MAX {
            let i = find_site(&sites, label).unwrap();
            let scan = rho_max_scan(&model, &sites, SpinBranch::Down, i, &b, (1e-3, 1.0), DEFAULT_SCAN_STEPS).unwrap();
            assert!((scan.rho_max - expected).abs() <= 0.03, "{label}: {}", scan.rho_max);
        }
    }

    #[test]
    fn collinear_er_field_gives_zero_rho() {
        // on the b axis the dipolar field of a b-directed moment is along b
        let model = SpinModel::default();
        let mut m = model.clone();
        m.g_pair.g_ground = nalgebra::Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 15.0));
        m.g_pair.g_excited = nalgebra::Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 13.0));
        let sites = vec![YttriumSite::new("on-axis", 0.0, 0.0, 3.5)];
        let scan = rho_max_scan(&m, &sites, SpinBranch::Down, 0, &Vector3::z(), (1e-3, 1.0), 50).unwrap();
        assert_eq!(scan.rho_max, 0.0);
    }

    #[test]
    fn degenerate_space_equals_direct_evaluation() {
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let field = Vector3::new(0.0, 0.0, 0.175);
        let space = FieldSearchSpace {
            direction: DirectionConstraint::FixedAxis(Vector3::z()),
            b_min: 0.175,
            b_max: 0.175,
            ..Default::default()
        };
        let r = maximize_prominence(&model, &sites, SpinBranch::Down, 3, &space).unwrap();
        let rhos = model.rhos(&sites, &field, SpinBranch::Down).unwrap();
        assert_eq!(r.lambda, prominence(3, &rhos));
        assert_eq!(r.all_rho, rhos);
        assert_eq!(r.best_field, field);
    }

    #[test]
    fn fixed_b_axis_is_class_independent() {
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let space = FieldSearchSpace {
            direction: DirectionConstraint::FixedAxis(Vector3::z()),
            ..Default::default()
        };
        let class2_sites: Vec<YttriumSite> = sites.iter().map(|s| s.in_class(MagneticClass::II)).collect();
        let class2 = model.in_class(MagneticClass::II);
        for i in [0, 3, 4, 11] {
            let a = maximize_prominence(&model, &sites, SpinBranch::Down, i, &space).unwrap();
            let b = maximize_prominence(&class2, &class2_sites, SpinBranch::Down, i, &space).unwrap();
            assert!((a.lambda - b.lambda).abs() <= 1e-9 * a.lambda, "{} {}", a.lambda, b.lambda);
        }
    }

    #[test]
    fn finer_nested_grid_never_worse() {
        let model = SpinModel::default();
        let sites = default_site_catalog();
        let coarse = FieldSearchSpace {
            grid: GridSpec { angular_step_deg: 30.0, magnitude_steps: 6 },
            refine: false,
            ..Default::default()
        };
        let fine = FieldSearchSpace {
            grid: GridSpec { angular_step_deg: 15.0, magnitude_steps: 11 },
            ..coarse
        };
        for i in [0, 5, 11] {
            let a = maximize_prominence(&model, &sites, SpinBranch::Down, i, &coarse).unwrap();
            let b = maximize_prominence(&model, &sites, SpinBranch::Down, i, &fine).unwrap();
            let r = maximize_prominence(&model, &sites, SpinBranch::Down, i, &FieldSearchSpace { refine: true, ..fine }).unwrap();
            assert!(b.lambda >= a.lambda);
            assert!(r.lambda >= b.lambda);
        }
    }

    #[test]
    fn search_space_validation() {
        let bad = FieldSearchSpace { b_min: 1e-4, ..Default::default() };
        assert!(bad.validate(1e-3).is_err());
        let bad = FieldSearchSpace { b_min: 0.5, b_max: 0.1, ..Default::default() };
        assert!(bad.validate(1e-3).is_err());
        let bad = FieldSearchSpace { direction: DirectionConstraint::FixedAxis(Vector3::zeros()), ..Default::default() };
        assert!(bad.validate(1e-3).is_err());
        assert!(FieldSearchSpace::default().validate(1e-3).is_ok());
    }

    proptest! {
        #[test]
        fn prominence_is_scale_invariant(rhos in proptest::collection::vec(0.0f64..1.0, 2..15), scale in 0.01f64..100.0, pick in 0usize..15) {
            let i = pick % rhos.len();
            let scaled: Vec<f64> = rhos.iter().map(|r| r * scale).collect();
            let a = prominence(i, &rhos);
            let b = prominence(i, &scaled);
            prop_assert!(a >= 0.0);
            if a.is_finite() {
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            } else {
                prop_assert!(b.is_infinite());
            }
        }
    }
}
