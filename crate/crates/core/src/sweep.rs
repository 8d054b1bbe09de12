//! Field sweeps: predicted line maps Δg, Δe, Δ± versus bias field for both
//! magnetic classes, and end-to-end simulated spectra.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{MagneticClass, Vector3, YttriumSite};
use crate::error::{OeemError, Result};
use crate::fitting::{LinePoint, LinePositionSeries};
use crate::modulation::{
    add_noise, synthesize_trace, uniform_grid, EchoMode, EchoTrace, ModulationParams, SpinTerm,
};
use crate::spectral::{analyze, find_peaks, Peak, PeakOptions, PadTarget, Spectrum, Window};
use crate::spinmodel::{SpinBranch, SpinCoupling, SpinModel};

pub const MAX_TILT_DEG: f64 = 10.0;
pub const DEFAULT_RHO_SAT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Vector3,
    /// Misalignment of the field from `axis`, degrees.
    pub tilt_polar_deg: f64,
    pub tilt_azimuth_deg: f64,
    /// Signed magnitudes along the (tilted) axis, T.
    pub magnitudes: Vec<f64>,
    pub branch: SpinBranch,
    pub sites: Vec<YttriumSite>,
    /// ρ at which the rendering intensity saturates.
    pub rho_sat: f64,
}

impl SweepSpec {
    pub fn along(axis: Vector3, magnitudes: Vec<f64>, sites: Vec<YttriumSite>) -> Self {
        SweepSpec {
            axis,
            tilt_polar_deg: 0.0,
            tilt_azimuth_deg: 0.0,
            magnitudes,
            branch: SpinBranch::Down,
            sites,
            rho_sat: DEFAULT_RHO_SAT,
        }
    }

    pub fn with_tilt(mut self, polar_deg: f64, azimuth_deg: f64) -> Self {
        self.tilt_polar_deg = polar_deg;
        self.tilt_azimuth_deg = azimuth_deg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.is_empty() {
            return Err(OeemError::InvalidInput("sweep needs at least one magnitude".into()));
        }
        if !self.magnitudes.iter().all(|b| b.is_finite()) {
            return Err(OeemError::InvalidInput("non-finite sweep magnitude".into()));
        }
        if !(self.axis.norm() > 0.0 && self.axis.iter().all(|v| v.is_finite())) {
            return Err(OeemError::InvalidInput("sweep axis must be a nonzero vector".into()));
        }
        if !(self.tilt_polar_deg.abs() <= MAX_TILT_DEG) || !self.tilt_azimuth_deg.is_finite() {
            return Err(OeemError::InvalidInput(format!(
                "tilt must be within {MAX_TILT_DEG} degrees of the axis"
            )));
        }
        if !(self.rho_sat > 0.0 && self.rho_sat.is_finite()) {
            return Err(OeemError::InvalidInput("rho_sat must be positive".into()));
        }
        if self.sites.is_empty() {
            return Err(OeemError::InvalidInput("sweep needs at least one site".into()));
        }
        Ok(())
    }

    /// Unit direction of the applied field. The tilt is measured from
    /// `axis` toward the azimuth of a frame whose first transverse vector is
    /// the part of D1 orthogonal to the axis.
    pub fn direction(&self) -> Vector3 {
        let axis = self.axis.normalize();
        let reference = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (reference - axis * axis.dot(&reference)).normalize();
        let e2 = axis.cross(&e1);
        let (theta, phi) = (self.tilt_polar_deg.to_radians(), self.tilt_azimuth_deg.to_radians());
        axis * theta.cos() + (e1 * phi.cos() + e2 * phi.sin()) * theta.sin()
    }

    pub fn field(&self, magnitude: f64) -> Vector3 {
        self.direction() * magnitude
    }

    /// Magnitudes in ascending order.
    fn sorted_magnitudes(&self) -> Vec<f64> {
        let mut m = self.magnitudes.clone();
        m.sort_by(f64::total_cmp);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    DeltaG,
    DeltaE,
    DeltaPlus,
    DeltaMinus,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::DeltaG,
        Component::DeltaE,
        Component::DeltaPlus,
        Component::DeltaMinus,
    ];

    pub fn of(self, c: &SpinCoupling) -> f64 {
        match self {
            Component::DeltaG => c.delta_g,
            Component::DeltaE => c.delta_e,
            Component::DeltaPlus => c.delta_sum(),
            Component::DeltaMinus => c.delta_diff(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::DeltaG => "delta_g",
            Component::DeltaE => "delta_e",
            Component::DeltaPlus => "delta_plus",
            Component::DeltaMinus => "delta_minus",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Component {
    type Err = OeemError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| OeemError::InvalidInput(format!("unknown component '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineMapRow {
    pub site: String,
    pub class: MagneticClass,
    pub component: Component,
    /// T.
    pub b: f64,
    /// Hz.
    pub freq: f64,
    pub rho: f64,
    /// min(ρ/ρ_sat, 1).
    pub intensity: f64,
}

/// Rows ordered by site, class, component, then field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LineMap {
    pub rows: Vec<LineMapRow>,
}

impl LineMap {
    pub fn line(&self, site: &str, class: MagneticClass, component: Component) -> Vec<&LineMapRow> {
        self.rows
            .iter()
            .filter(|r| r.site == site && r.class == class && r.component == component)
            .collect()
    }

    /// One line as a fit series with a uniform frequency error.
    pub fn series(
        &self,
        site: &str,
        class: MagneticClass,
        component: Component,
        freq_err: f64,
    ) -> LinePositionSeries {
        let points = self
            .line(site, class, component)
            .into_iter()
            .map(|r| LinePoint {
                b: r.b,
                freq: r.freq,
                freq_err,
            })
            .collect();
        LinePositionSeries::new(format!("{site} {component} class {class}"), points)
    }

    /// |f_I − f_II| of one component at each field.
    pub fn class_splitting(&self, site: &str, component: Component) -> Vec<(f64, f64)> {
        let a = self.line(site, MagneticClass::I, component);
        let b = self.line(site, MagneticClass::II, component);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.b, (x.freq - y.freq).abs()))
            .collect()
    }
}

/// Predicted line positions for every site, class and component.
pub fn predict_linemap(model: &SpinModel, spec: &SweepSpec) -> Result<LineMap> {
    spec.validate()?;
    let mags = spec.sorted_magnitudes();
    // per field: per class: per site coupling
    let per_field: Vec<Vec<Vec<SpinCoupling>>> = mags
        .par_iter()
        .map(|&b| {
            let field = spec.field(b);
            MagneticClass::BOTH
                .iter()
                .map(|&class| model.couplings_in_class(&spec.sites, &field, spec.branch, class))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(spec.sites.len() * 2 * 4 * mags.len());
    for (si, site) in spec.sites.iter().enumerate() {
        for (ci, &class) in MagneticClass::BOTH.iter().enumerate() {
            for component in Component::ALL {
                for (fi, &b) in mags.iter().enumerate() {
                    let c = &per_field[fi][ci][si];
                    rows.push(LineMapRow {
                        site: site.label.clone(),
                        class,
                        component,
                        b,
                        freq: component.of(c),
                        rho: c.rho,
                        intensity: (c.rho / spec.rho_sat).min(1.0),
                    });
                }
            }
        }
    }
    Ok(LineMap { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emitters {
    /// A single emitter of one magnetic class.
    Single(MagneticClass),
    /// Both classes with equal weight, averaged before analysis.
    Ensemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    /// s.
    pub t2: f64,
    pub gamma: f64,
    pub mode: EchoMode,
    pub pad: PadTarget,
    pub window: Window,
    pub n_samples: usize,
    /// s.
    pub dt: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub emitters: Emitters,
    pub peaks: PeakOptions,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            t2: 400e-6,
            gamma: 1.0,
            mode: EchoMode::Amplitude,
            pad: PadTarget::default(),
            window: Window::None,
            n_samples: 1000,
            dt: 1e-6,
            noise_sigma: 0.0,
            seed: 0,
            emitters: Emitters::Ensemble,
            peaks: PeakOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// T.
    pub b: f64,
    pub spectrum: Spectrum,
    pub peaks: Vec<Peak>,
}

/// Seed for the noise of field point `index`.
fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Echo trace of the configured emitters at one field.
pub fn simulate_trace(
    model: &SpinModel,
    spec: &SweepSpec,
    opts: &SimulationOptions,
    b: f64,
    seed: u64,
) -> Result<EchoTrace> {
    let field = spec.field(b);
    let tau = uniform_grid(opts.n_samples, opts.dt);
    let classes: Vec<MagneticClass> = match opts.emitters {
        Emitters::Single(c) => vec![c],
        Emitters::Ensemble => MagneticClass::BOTH.to_vec(),
    };
    let mut sum = vec![0.0; tau.len()];
    for class in &classes {
        let spins: Vec<SpinTerm> = model
            .couplings_in_class(&spec.sites, &field, spec.branch, *class)?
            .iter()
            .map(SpinTerm::from)
            .collect();
        let params = ModulationParams {
            spins,
            t2: opts.t2,
            gamma: opts.gamma,
            mode: EchoMode::Amplitude,
        };
        let t = synthesize_trace(&params, &tau, 0.0, 0)?;
        for (s, v) in sum.iter_mut().zip(&t.values) {
            *s += v / classes.len() as f64;
        }
    }
    if opts.mode == EchoMode::Intensity {
        for v in &mut sum {
            *v *= *v;
        }
    }
    add_noise(&mut sum, opts.noise_sigma, seed);
    let mut trace = EchoTrace::new(tau, sum, opts.mode)?;
    trace.noise_sigma = opts.noise_sigma;
    trace.rng_seed = seed;
    Ok(trace)
}

/// Synthesizes, detrends and transforms a trace at every field; output is
/// ordered by field.
pub fn simulate_sweep(
    model: &SpinModel,
    spec: &SweepSpec,
    opts: &SimulationOptions,
) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let mags = spec.sorted_magnitudes();
    mags.par_iter()
        .enumerate()
        .map(|(k, &b)| {
            let trace = simulate_trace(model, spec, opts, b, point_seed(opts.seed, k))?;
            let (_, spectrum) = analyze(&trace, opts.pad, opts.window)?;
            let peaks = find_peaks(&spectrum, &opts.peaks);
            Ok(SweepPoint { b, spectrum, peaks })
        })
        .collect()
}
