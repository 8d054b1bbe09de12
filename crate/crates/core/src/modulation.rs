//! Echo envelope modulation: the closed-form product over coupled nuclei,
//! decay-weighted traces in amplitude or intensity mode, and a brute-force
//! propagation of the optical ⊗ nuclear system used to validate the closed
//! form.

use std::f64::consts::PI;

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{PhysicalConstants, Vector3};
use crate::error::{OeemError, Result};
use crate::spinmodel::{branching_contrast, SpinCoupling};

/// Relative tolerance on the spacing of a τ grid.
pub const GRID_SPACING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinTerm {
    /// Hz
    pub delta_g: f64,
    /// Hz
    pub delta_e: f64,
    pub rho: f64,
}

impl From<&SpinCoupling> for SpinTerm {
    fn from(c: &SpinCoupling) -> Self {
        SpinTerm {
            delta_g: c.delta_g,
            delta_e: c.delta_e,
            rho: c.rho,
        }
    }
}

/// Which echo observable is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EchoMode {
    /// Field quantity A(τ), e.g. fluorescence-detected echoes.
    #[default]
    Amplitude,
    /// Echo intensity A(τ)².
    Intensity,
}

impl std::str::FromStr for EchoMode {
    type Err = OeemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "amplitude" => Ok(EchoMode::Amplitude),
            "intensity" => Ok(EchoMode::Intensity),
            other => Err(OeemError::InvalidInput(format!("unknown echo mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for EchoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EchoMode::Amplitude => "amplitude",
            EchoMode::Intensity => "intensity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationParams {
    pub spins: Vec<SpinTerm>,
    /// Coherence time, s.
    pub t2: f64,
    /// Stretch exponent, ≥ 1.
    pub gamma: f64,
    pub mode: EchoMode,
}

impl ModulationParams {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.spins.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.rho) {
                return Err(OeemError::InvalidInput(format!("spin {i}: rho {} outside [0, 1]", s.rho)));
            }
            if !(s.delta_g >= 0.0 && s.delta_e >= 0.0) || !s.delta_g.is_finite() || !s.delta_e.is_finite() {
                return Err(OeemError::InvalidInput(format!("spin {i}: splittings must be finite and ≥ 0")));
            }
        }
        if !(self.t2 > 0.0) || !self.t2.is_finite() {
            return Err(OeemError::InvalidInput(format!("T2 must be positive, got {}", self.t2)));
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(OeemError::InvalidInput(format!("gamma must be ≥ 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// exp[−(2τ/T2)^γ]
    pub fn decay(&self, tau: f64) -> f64 {
        stretched_exponential(tau, self.t2, self.gamma)
    }
}

pub fn stretched_exponential(tau: f64, t2: f64, gamma: f64) -> f64 {
    (-(2.0 * tau / t2).powf(gamma)).exp()
}

/// Single-nucleus factor 1 − (ρ/2)[1 − cos 2πΔgτ][1 − cos 2πΔeτ].
pub fn envelope_factor(tau: f64, spin: &SpinTerm) -> f64 {
    let a = 1.0 - (2.0 * PI * spin.delta_g * tau).cos();
    let b = 1.0 - (2.0 * PI * spin.delta_e * tau).cos();
    1.0 - 0.5 * spin.rho * a * b
}

/// Θ(τ) for independent nuclei: the product of single-nucleus factors.
pub fn envelope(tau: f64, spins: &[SpinTerm]) -> f64 {
    spins.iter().map(|s| envelope_factor(tau, s)).product()
}

/// A sampled echo signal on a uniform τ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrace {
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
    pub mode: EchoMode,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl EchoTrace {
    pub fn new(tau: Vec<f64>, values: Vec<f64>, mode: EchoMode) -> Result<Self> {
        let trace = EchoTrace {
            tau,
            values,
            mode,
            noise_sigma: 0.0,
            rng_seed: 0,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Grid step, s.
    pub fn spacing(&self) -> f64 {
        grid_spacing(&self.tau)
    }

    /// Record length N·dt, s.
    pub fn duration(&self) -> f64 {
        self.spacing() * self.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.len() != self.values.len() {
            return Err(OeemError::InvalidInput(format!(
                "trace has {} delays but {} values",
                self.tau.len(),
                self.values.len()
            )));
        }
        validate_grid(&self.tau)
    }
}

fn grid_spacing(tau: &[f64]) -> f64 {
    if tau.len() < 2 {
        return 0.0;
    }
    (tau[tau.len() - 1] - tau[0]) / (tau.len() - 1) as f64
}

/// τ grid must be strictly increasing with uniform spacing.
pub fn validate_grid(tau: &[f64]) -> Result<()> {
    if tau.len() < 2 {
        return Err(OeemError::InvalidInput("τ grid needs at least two points".into()));
    }
    let dt = grid_spacing(tau);
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(OeemError::InvalidInput("τ grid must be strictly increasing".into()));
    }
    for w in tau.windows(2) {
        let step = w[1] - w[0];
        if ((step - dt) / dt).abs() > GRID_SPACING_TOLERANCE.max(1e-12 * w[1].abs() / dt) {
            return Err(OeemError::InvalidInput(format!(
                "τ grid is not uniform: step {step:e} s vs mean {dt:e} s"
            )));
        }
    }
    Ok(())
}

/// τ_k = k·dt for k in 0..n.
pub fn uniform_grid(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * dt).collect()
}

/// Zero-mean Gaussian sample k of the stream selected by `seed`. Each index
/// owns its own ChaCha stream, so parallel and serial evaluation agree.
fn noise_sample(seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    StandardNormal.sample(&mut rng)
}

/// Adds zero-mean Gaussian noise of width `sigma`; sample k draws from
/// stream k of `seed`.
pub fn add_noise(values: &mut [f64], sigma: f64, seed: u64) {
    if sigma > 0.0 {
        values
            .par_iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v += sigma * noise_sample(seed, k));
    }
}

/// Decay-weighted echo signal on `tau`, with optional additive noise.
pub fn synthesize_trace(
    params: &ModulationParams,
    tau: &[f64],
    noise_sigma: f64,
    rng_seed: u64,
) -> Result<EchoTrace> {
    params.validate()?;
    validate_grid(tau)?;
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(OeemError::InvalidInput("noise sigma must be finite and ≥ 0".into()));
    }
    let mut values: Vec<f64> = tau
        .par_iter()
        .map(|&t| {
            let amplitude = envelope(t, &params.spins) * params.decay(t);
            let clean = match params.mode {
                EchoMode::Amplitude => amplitude,
                EchoMode::Intensity => amplitude * amplitude,
            };
            clean
        })
        .collect();
    add_noise(&mut values, noise_sigma, rng_seed);
    Ok(EchoTrace {
        tau: tau.to_vec(),
        values,
        mode: params.mode,
        noise_sigma,
        rng_seed,
    })
}

/// Brute-force two-pulse echo of one spin-1/2 nucleus coupled to an optical
/// two-level system.
///
/// The joint space is optical {g, e} ⊗ nuclear {↑, ↓}. In each optical state
/// the nucleus precesses under H = −g_Y·μN·B·I with the state's total field.
/// The optical pulses are instantaneous x rotations (π/2 at 0, π at τ) and
/// the nucleus starts maximally mixed. The echo field at 2τ is the optical
/// coherence Tr[ρ(2τ)·(|g⟩⟨e| ⊗ 1)], normalized by its uncoupled value.
pub fn quantum_echo_oracle(
    constants: &PhysicalConstants,
    b_tot_g: &Vector3,
    b_tot_e: &Vector3,
    tau: &[f64],
) -> Vec<f64> {
    type M4 = Matrix4<Complex64>;
    let c = |re: f64| Complex64::new(re, 0.0);
    let i = Complex64::new(0.0, 1.0);

    // nuclear Zeeman Hamiltonian in Hz: -(g_Y muN / h) B·σ/2
    let scale = -constants.g_y * constants.mu_n / constants.h;
    let nuclear = |b: &Vector3| -> [[Complex64; 2]; 2] {
        let (x, y, z) = (scale * b.x / 2.0, scale * b.y / 2.0, scale * b.z / 2.0);
        [[c(z), c(x) - i * y], [c(x) + i * y, c(-z)]]
    };
    let hg = nuclear(b_tot_g);
    let he = nuclear(b_tot_e);
    let mut h = M4::zeros();
    for r in 0..2 {
        for col in 0..2 {
            h[(r, col)] = hg[r][col];
            h[(2 + r, 2 + col)] = he[r][col];
        }
    }
    let eig = SymmetricEigen::new(h);
    let vecs = eig.eigenvectors;
    let vals = eig.eigenvalues;
    let propagator = |t: f64| -> M4 {
        let phases = Vector4::from_fn(|k, _| (-2.0 * PI * vals[k] * t * i).exp());
        &vecs * M4::from_diagonal(&phases) * vecs.adjoint()
    };

    // optical rotation exp(-iθσx/2) ⊗ 1
    let pulse = |theta: f64| -> M4 {
        let (s, co) = (theta / 2.0).sin_cos();
        let mut p = M4::zeros();
        for n in 0..2 {
            p[(n, n)] = c(co);
            p[(2 + n, 2 + n)] = c(co);
            p[(n, 2 + n)] = -i * s;
            p[(2 + n, n)] = -i * s;
        }
        p
    };
    let half = pulse(PI / 2.0);
    let full = pulse(PI);

    let mut rho0 = M4::zeros();
    rho0[(0, 0)] = c(0.5);
    rho0[(1, 1)] = c(0.5);
    let after_first = half * rho0 * half.adjoint();

    let coherence = |rho: &M4| rho[(2, 0)] + rho[(3, 1)];
    let echo = |t: f64| -> Complex64 {
        let u = propagator(t);
        let step = full * u;
        let total = u * step;
        let rho = total * after_first * total.adjoint();
        coherence(&rho)
    };
    let reference = {
        let rho = full * after_first * full.adjoint();
        coherence(&rho)
    };

    tau.par_iter().map(|&t| (echo(t) / reference).re).collect()
}

/// Single-spin closed-form factor for the same pair of total fields, via
/// the splittings and branching contrast they imply.
pub fn closed_form_single_spin(
    constants: &PhysicalConstants,
    b_tot_g: &Vector3,
    b_tot_e: &Vector3,
    tau: &[f64],
) -> Vec<f64> {
    let gamma = constants.nuclear_gamma_hz_per_t();
    let spin = SpinTerm {
        delta_g: gamma * b_tot_g.norm(),
        delta_e: gamma * b_tot_e.norm(),
        rho: branching_contrast(b_tot_g, b_tot_e),
    };
    tau.iter().map(|&t| envelope_factor(t, &spin)).collect()
}
