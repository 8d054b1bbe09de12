//! Dipolar superhyperfine model: the Er Kramers doublet is treated as an
//! effective spin-1/2 quantized by the bias field, its expectation moment
//! produces a classical dipole field at each bath nucleus, and the nuclear
//! splittings and branching contrast follow from the total fields in the
//! optical ground and excited states.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crystal::{
    class_transform_tensor, MagneticClass, PhysicalConstants, Tensor3x3,
    Vector3, YttriumSite,
};
use crate::error::{OeemError, Result};

/// Default lower bound on |B_ext| for which the Er quantization axis is
/// taken to follow the bias field, T.
pub const DEFAULT_ZERO_FIELD_THRESHOLD: f64 = 1e-3;

const DEFAULT_G_TENSORS: &str = include_str!("../data/g_tensors_er_yso_site1.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTensorPair {
    pub g_ground: Tensor3x3,
    pub g_excited: Tensor3x3,
    pub source: String,
}

impl GTensorPair {
    pub fn new(g_ground: Tensor3x3, g_excited: Tensor3x3, source: impl Into<String>) -> Result<Self> {
        let pair = GTensorPair {
            g_ground,
            g_excited,
            source: source.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Literature tensors for Er:YSO site 1 shipped with the crate.
    pub fn er_yso_site1() -> Self {
        GTensorConfig::parse(DEFAULT_G_TENSORS)
            .expect("bundled g-tensor file parses")
            .base
    }

    /// Both tensors must be finite and non-singular, so that |gᵀu| > 0 for
    /// every unit direction u.
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("ground", &self.g_ground), ("excited", &self.g_excited)] {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(OeemError::Config(format!("{name} g-tensor is not finite")));
            }
            let min_sv = g.singular_values().min();
            if min_sv <= 1e-12 * g.norm().max(1.0) {
                return Err(OeemError::Config(format!(
                    "{name} g-tensor is singular; the effective g vanishes along some direction"
                )));
            }
        }
        Ok(())
    }

    pub fn in_class(&self, class: MagneticClass) -> GTensorPair {
        GTensorPair {
            g_ground: class_transform_tensor(&self.g_ground, class),
            g_excited: class_transform_tensor(&self.g_excited, class),
            source: self.source.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct GTensorRecord {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    source: Option<String>,
    ground: [[f64; 3]; 3],
    excited: [[f64; 3]; 3],
}

#[derive(Debug, Deserialize)]
struct GTensorFile {
    source: String,
    ground: [[f64; 3]; 3],
    excited: [[f64; 3]; 3],
    #[serde(default)]
    variant: Vec<GTensorRecord>,
}

fn tensor_from_rows(rows: &[[f64; 3]; 3]) -> Tensor3x3 {
    Tensor3x3::from_fn(|i, j| rows[i][j])
}

/// A g-tensor configuration file: the base pair plus optional named
/// perturbed variants.
#[derive(Debug, Clone)]
pub struct GTensorConfig {
    pub base: GTensorPair,
    pub variants: Vec<(String, GTensorPair)>,
}

impl GTensorConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let file: GTensorFile =
            toml::from_str(text).map_err(|e| OeemError::Config(format!("g-tensor file: {e}")))?;
        let base = GTensorPair::new(
            tensor_from_rows(&file.ground),
            tensor_from_rows(&file.excited),
            file.source.clone(),
        )?;
        let variants = file
            .variant
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let name = v.name.unwrap_or_else(|| format!("variant-{i}"));
                let pair = GTensorPair::new(
                    tensor_from_rows(&v.ground),
                    tensor_from_rows(&v.excited),
                    v.source.unwrap_or_else(|| file.source.clone()),
                )?;
                Ok((name, pair))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GTensorConfig { base, variants })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OeemError::io(path, e))?;
        Self::parse(&text)
    }

    /// The base pair, or the named variant.
    pub fn select(&self, variant: Option<&str>) -> Result<&GTensorPair> {
        match variant {
            None => Ok(&self.base),
            Some(name) => self
                .variants
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| p)
                .ok_or_else(|| OeemError::Config(format!("no g-tensor variant named {name:?}"))),
        }
    }
}

/// Zeeman eigenstate of the addressed Kramers doublet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpinBranch {
    /// Lower-energy state.
    Down,
    /// Upper-energy state.
    Up,
}

impl SpinBranch {
    pub fn flipped(self) -> Self {
        match self {
            SpinBranch::Down => SpinBranch::Up,
            SpinBranch::Up => SpinBranch::Down,
        }
    }
}

impl std::str::FromStr for SpinBranch {
    type Err = OeemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "down" | "lower" => Ok(SpinBranch::Down),
            "up" | "upper" => Ok(SpinBranch::Up),
            other => Err(OeemError::InvalidInput(format!("unknown spin branch {other:?}"))),
        }
    }
}

impl std::fmt::Display for SpinBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpinBranch::Down => "down",
            SpinBranch::Up => "up",
        })
    }
}

/// ⟨S⟩ of the effective spin-1/2 in the eigenstate `branch` of
/// H = μB·B·g·S.
///
/// H is proportional to (gᵀB)·σ, so the eigenstates are spin-coherent states
/// along ±gᵀB and ⟨S⟩ = ∓(gᵀB)/(2|gᵀB|); the lower state points against the
/// effective field.
pub fn spin_expectation(
    g: &Tensor3x3,
    b_ext: &Vector3,
    branch: SpinBranch,
    zero_field_threshold: f64,
) -> Result<Vector3> {
    let magnitude = b_ext.norm();
    if !(magnitude >= zero_field_threshold) || magnitude == 0.0 {
        return Err(OeemError::ZeroField {
            magnitude,
            threshold: zero_field_threshold,
        });
    }
    let effective = g.transpose() * b_ext;
    let unit = effective / effective.norm();
    Ok(match branch {
        SpinBranch::Down => -0.5 * unit,
        SpinBranch::Up => 0.5 * unit,
    })
}

/// Expectation value of the electronic moment, ⟨μ⟩ = −μB·g·⟨S⟩, in J/T.
pub fn er_moment(
    constants: &PhysicalConstants,
    g: &Tensor3x3,
    b_ext: &Vector3,
    branch: SpinBranch,
    zero_field_threshold: f64,
) -> Result<Vector3> {
    let s = spin_expectation(g, b_ext, branch, zero_field_threshold)?;
    Ok(-constants.mu_b * (g * s))
}

/// Point-dipole field of `moment` (J/T) at displacement `r` (m), in tesla.
pub fn dipolar_field(constants: &PhysicalConstants, moment: &Vector3, r: &Vector3) -> Result<Vector3> {
    let d = r.norm();
    if d == 0.0 || !d.is_finite() {
        return Err(OeemError::ZeroDistance);
    }
    let d3 = d * d * d;
    let d5 = d3 * d * d;
    Ok(-constants.dipolar_prefactor() * (moment / d3 - 3.0 * moment.dot(r) * r / d5))
}

/// 1 − (â·b̂)², computed as |a×b|²/(|a|²|b|²) so that nearly collinear fields
/// keep their relative precision. Zero if either field vanishes.
pub fn branching_contrast(b_g: &Vector3, b_e: &Vector3) -> f64 {
    let ng = b_g.norm_squared();
    let ne = b_e.norm_squared();
    if ng == 0.0 || ne == 0.0 {
        return 0.0;
    }
    (b_g.cross(b_e).norm_squared() / (ng * ne)).clamp(0.0, 1.0)
}

/// Root p ≤ 1/2 of ρ = 4p(1−p).
pub fn branching_fraction(rho: f64) -> f64 {
    let rho = rho.clamp(0.0, 1.0);
    // 1 - sqrt(1 - rho) rewritten to avoid cancellation at small rho
    0.5 * rho / (1.0 + (1.0 - rho).sqrt())
}

/// Per-site superhyperfine quantities at one bias field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinCoupling {
    pub site_label: String,
    /// Er dipolar field at the nucleus, optical ground / excited state, T.
    pub b_er_g: Vector3,
    pub b_er_e: Vector3,
    /// B_ext + B_er, T.
    pub b_tot_g: Vector3,
    pub b_tot_e: Vector3,
    /// Nuclear splittings, Hz.
    pub delta_g: f64,
    pub delta_e: f64,
    pub rho: f64,
    pub p: f64,
    /// Splitting induced by the Er field alone, Hz.
    pub a_g: f64,
    pub a_e: f64,
}

impl SpinCoupling {
    /// Builds the coupling from the two Er fields at the nucleus.
    pub fn from_er_fields(
        constants: &PhysicalConstants,
        site_label: impl Into<String>,
        b_ext: &Vector3,
        b_er_g: Vector3,
        b_er_e: Vector3,
    ) -> Self {
        let gamma = constants.nuclear_gamma_hz_per_t();
        let b_tot_g = b_ext + b_er_g;
        let b_tot_e = b_ext + b_er_e;
        let rho = branching_contrast(&b_tot_g, &b_tot_e);
        SpinCoupling {
            site_label: site_label.into(),
            b_er_g,
            b_er_e,
            b_tot_g,
            b_tot_e,
            delta_g: gamma * b_tot_g.norm(),
            delta_e: gamma * b_tot_e.norm(),
            rho,
            p: branching_fraction(rho),
            a_g: gamma * b_er_g.norm(),
            a_e: gamma * b_er_e.norm(),
        }
    }

    /// Δ₊ = Δg + Δe.
    pub fn delta_sum(&self) -> f64 {
        self.delta_g + self.delta_e
    }

    /// Δ₋ = |Δg − Δe|.
    pub fn delta_diff(&self) -> f64 {
        (self.delta_g - self.delta_e).abs()
    }
}

/// Er-field components along a bias direction (signed) and perpendicular
/// to it (≥ 0), ground and excited state, in tesla.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldComponents {
    pub par_g: f64,
    pub perp_g: f64,
    pub par_e: f64,
    pub perp_e: f64,
}

fn split(v: &Vector3, unit: &Vector3) -> (f64, f64) {
    let par = v.dot(unit);
    let perp = (v - par * unit).norm();
    (par, perp)
}

pub fn field_components(coupling: &SpinCoupling, direction: &Vector3) -> Result<FieldComponents> {
    let n = direction.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(OeemError::InvalidInput("bias direction must be a nonzero vector".into()));
    }
    let unit = direction / n;
    let (par_g, perp_g) = split(&coupling.b_er_g, &unit);
    let (par_e, perp_e) = split(&coupling.b_er_e, &unit);
    Ok(FieldComponents {
        par_g,
        perp_g,
        par_e,
        perp_e,
    })
}

/// Constants, g-tensors and validity threshold bundled for repeated
/// evaluation over sites and fields.
#[derive(Debug, Clone)]
pub struct SpinModel {
    pub constants: PhysicalConstants,
    pub g_pair: GTensorPair,
    pub zero_field_threshold: f64,
}

impl Default for SpinModel {
    fn default() -> Self {
        SpinModel::new(PhysicalConstants::default(), GTensorPair::er_yso_site1())
    }
}

impl SpinModel {
    pub fn new(constants: PhysicalConstants, g_pair: GTensorPair) -> Self {
        SpinModel {
            constants,
            g_pair,
            zero_field_threshold: DEFAULT_ZERO_FIELD_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.zero_field_threshold = threshold;
        self
    }

    /// Er moments (ground, excited) for a class-I dopant at `b_ext`.
    pub fn moments(&self, b_ext: &Vector3, branch: SpinBranch) -> Result<(Vector3, Vector3)> {
        let t = self.zero_field_threshold;
        Ok((
            er_moment(&self.constants, &self.g_pair.g_ground, b_ext, branch, t)?,
            er_moment(&self.constants, &self.g_pair.g_excited, b_ext, branch, t)?,
        ))
    }

    pub fn site_coupling(
        &self,
        site: &YttriumSite,
        b_ext: &Vector3,
        branch: SpinBranch,
    ) -> Result<SpinCoupling> {
        let (mu_g, mu_e) = self.moments(b_ext, branch)?;
        self.coupling_from_moments(site, b_ext, &mu_g, &mu_e)
    }

    fn coupling_from_moments(
        &self,
        site: &YttriumSite,
        b_ext: &Vector3,
        mu_g: &Vector3,
        mu_e: &Vector3,
    ) -> Result<SpinCoupling> {
        let r = site.position_m();
        let b_er_g = dipolar_field(&self.constants, mu_g, &r)?;
        let b_er_e = dipolar_field(&self.constants, mu_e, &r)?;
        Ok(SpinCoupling::from_er_fields(
            &self.constants,
            site.label.clone(),
            b_ext,
            b_er_g,
            b_er_e,
        ))
    }

    /// Couplings for every site at one field; the Er moments are computed
    /// once and shared.
    pub fn couplings(
        &self,
        sites: &[YttriumSite],
        b_ext: &Vector3,
        branch: SpinBranch,
    ) -> Result<Vec<SpinCoupling>> {
        let (mu_g, mu_e) = self.moments(b_ext, branch)?;
        sites
            .iter()
            .map(|s| self.coupling_from_moments(s, b_ext, &mu_g, &mu_e))
            .collect()
    }

    /// Couplings seen by a dopant of the given magnetic class. Class II is
    /// evaluated in its own rotated frame: positions and tensors are mapped
    /// by C₂(b) while the lab field stays fixed.
    pub fn couplings_in_class(
        &self,
        sites: &[YttriumSite],
        b_ext: &Vector3,
        branch: SpinBranch,
        class: MagneticClass,
    ) -> Result<Vec<SpinCoupling>> {
        if class == MagneticClass::I {
            return self.couplings(sites, b_ext, branch);
        }
        let sites: Vec<YttriumSite> = sites.iter().map(|s| s.in_class(class)).collect();
        self.in_class(class).couplings(&sites, b_ext, branch)
    }

    /// The same model with g-tensors mapped into the given class's frame.
    /// Site positions must be mapped separately with `YttriumSite::in_class`.
    pub fn in_class(&self, class: MagneticClass) -> SpinModel {
        SpinModel {
            constants: self.constants,
            g_pair: self.g_pair.in_class(class),
            zero_field_threshold: self.zero_field_threshold,
        }
    }

    /// Branching contrasts only, for optimizer inner loops.
    pub fn rhos(&self, sites: &[YttriumSite], b_ext: &Vector3, branch: SpinBranch) -> Result<Vec<f64>> {
        let (mu_g, mu_e) = self.moments(b_ext, branch)?;
        sites
            .iter()
            .map(|s| {
                let r = s.position_m();
                let g = b_ext + dipolar_field(&self.constants, &mu_g, &r)?;
                let e = b_ext + dipolar_field(&self.constants, &mu_e, &r)?;
                Ok(branching_contrast(&g, &e))
            })
            .collect()
    }
}
