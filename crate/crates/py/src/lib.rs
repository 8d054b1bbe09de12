//! Python bindings for `oeem-core`.

use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::Vector3;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oeem_core::crystal::{self, MagneticClass, PhysicalConstants, YttriumSite};
use oeem_core::fitting::{self, FitOptions, LinePoint, LinePositionSeries, Weighting};
use oeem_core::modulation::{self, EchoMode, EchoTrace, ModulationParams, SpinTerm};
use oeem_core::prominence::{self, DirectionConstraint, FieldSearchSpace, GridSpec};
use oeem_core::spectral::{self, PadTarget, PeakOptions, Window};
use oeem_core::spinmodel::{self, GTensorConfig, GTensorPair, SpinBranch};
use oeem_core::sweep::{self, SweepSpec};
use oeem_core::OeemError;

create_exception!(oeem, ModelError, PyException);

fn err(e: OeemError) -> PyErr {
    ModelError::new_err(format!("{}: {e}", e.kind()))
}

fn parse<T: FromStr<Err = OeemError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Neighbor nucleus; coordinates in angstrom in the D1-D2-b frame.
#[pyclass(name = "Site", frozen, from_py_object)]
#[derive(Clone)]
struct PySite {
    inner: YttriumSite,
}

#[pymethods]
impl PySite {
    #[new]
    fn new(label: String, d1: f64, d2: f64, b: f64) -> Self {
        PySite { inner: YttriumSite::new(label, d1, d2, b) }
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        arr(&self.inner.position)
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance
    }

    fn __repr__(&self) -> String {
        let p = self.inner.position;
        format!("Site({:?}, {}, {}, {})", self.inner.label, p.x, p.y, p.z)
    }
}

/// Built-in catalog, or the `[[site]]` records of a TOML file.
#[pyfunction]
#[pyo3(signature = (path=None))]
fn site_catalog(path: Option<PathBuf>) -> PyResult<Vec<PySite>> {
    let sites = match path {
        Some(p) => crystal::load_site_catalog(&p).map_err(err)?,
        None => crystal::default_site_catalog(),
    };
    Ok(sites.into_iter().map(|inner| PySite { inner }).collect())
}

fn inner_sites(sites: &[PySite]) -> Vec<YttriumSite> {
    sites.iter().map(|s| s.inner.clone()).collect()
}

/// Superhyperfine quantities of one nucleus at one field. Frequencies in Hz,
/// fields in tesla.
#[pyclass(name = "Coupling", frozen, from_py_object)]
#[derive(Clone)]
struct PyCoupling {
    inner: spinmodel::SpinCoupling,
}

#[pymethods]
impl PyCoupling {
    #[getter]
    fn site(&self) -> String {
        self.inner.site_label.clone()
    }
    #[getter]
    fn delta_g(&self) -> f64 {
        self.inner.delta_g
    }
    #[getter]
    fn delta_e(&self) -> f64 {
        self.inner.delta_e
    }
    #[getter]
    fn delta_plus(&self) -> f64 {
        self.inner.delta_sum()
    }
    #[getter]
    fn delta_minus(&self) -> f64 {
        self.inner.delta_diff()
    }
    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho
    }
    #[getter]
    fn p(&self) -> f64 {
        self.inner.p
    }
    #[getter]
    fn a_g(&self) -> f64 {
        self.inner.a_g
    }
    #[getter]
    fn a_e(&self) -> f64 {
        self.inner.a_e
    }
    #[getter]
    fn b_er_g(&self) -> [f64; 3] {
        arr(&self.inner.b_er_g)
    }
    #[getter]
    fn b_er_e(&self) -> [f64; 3] {
        arr(&self.inner.b_er_e)
    }

    /// Er field split along / across `direction`: (par_g, perp_g, par_e, perp_e).
    fn field_components(&self, direction: [f64; 3]) -> PyResult<(f64, f64, f64, f64)> {
        let c = spinmodel::field_components(&self.inner, &vec3(direction)).map_err(err)?;
        Ok((c.par_g, c.perp_g, c.par_e, c.perp_e))
    }

    fn __repr__(&self) -> String {
        format!(
            "Coupling({}, rho={:.4}, delta_g={:.1} Hz, delta_e={:.1} Hz)",
            self.inner.site_label, self.inner.rho, self.inner.delta_g, self.inner.delta_e
        )
    }
}

/// Er g-tensors, nuclear g-factor and zero-field threshold.
#[pyclass(name = "SpinModel", frozen)]
struct PySpinModel {
    inner: spinmodel::SpinModel,
}

#[pymethods]
impl PySpinModel {
    #[new]
    #[pyo3(signature = (g_y=None, g_tensor_file=None, variant=None, zero_field_threshold=None))]
    fn new(
        g_y: Option<f64>,
        g_tensor_file: Option<PathBuf>,
        variant: Option<String>,
        zero_field_threshold: Option<f64>,
    ) -> PyResult<Self> {
        let mut constants = PhysicalConstants::default();
        if let Some(g) = g_y {
            constants.g_y = g;
        }
        constants.validate().map_err(err)?;
        let pair = match g_tensor_file {
            Some(p) => GTensorConfig::load(&p)
                .and_then(|c| c.select(variant.as_deref()).cloned())
                .map_err(err)?,
            None => GTensorPair::er_yso_site1(),
        };
        let mut inner = spinmodel::SpinModel::new(constants, pair);
        if let Some(t) = zero_field_threshold {
            inner = inner.with_threshold(t);
        }
        Ok(PySpinModel { inner })
    }

    /// Nuclear gyromagnetic ratio, Hz/T.
    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.constants.nuclear_gamma_hz_per_t()
    }

    #[pyo3(signature = (site, field, branch="down", magnetic_class="I"))]
    fn coupling(&self, site: PySite, field: [f64; 3], branch: &str, magnetic_class: &str) -> PyResult<PyCoupling> {
        let class: MagneticClass = parse(magnetic_class)?;
        let inner = self
            .inner
            .in_class(class)
            .site_coupling(&site.inner.in_class(class), &vec3(field), parse(branch)?)
            .map_err(err)?;
        Ok(PyCoupling { inner })
    }

    #[pyo3(signature = (sites, field, branch="down", magnetic_class="I"))]
    fn couplings(
        &self,
        sites: Vec<PySite>,
        field: [f64; 3],
        branch: &str,
        magnetic_class: &str,
    ) -> PyResult<Vec<PyCoupling>> {
        let out = self
            .inner
            .couplings_in_class(&inner_sites(&sites), &vec3(field), parse(branch)?, parse(magnetic_class)?)
            .map_err(err)?;
        Ok(out.into_iter().map(|inner| PyCoupling { inner }).collect())
    }

    #[pyo3(signature = (sites, field, branch="down"))]
    fn rhos(&self, sites: Vec<PySite>, field: [f64; 3], branch: &str) -> PyResult<Vec<f64>> {
        self.inner
            .rhos(&inner_sites(&sites), &vec3(field), parse(branch)?)
            .map_err(err)
    }
}

fn spin_terms(spins: &[PyCoupling]) -> Vec<SpinTerm> {
    spins.iter().map(|c| SpinTerm::from(&c.inner)).collect()
}

/// Modulation Θ(τ) of the given couplings.
#[pyfunction]
fn envelope(spins: Vec<PyCoupling>, tau: Vec<f64>) -> Vec<f64> {
    let terms = spin_terms(&spins);
    tau.iter().map(|&t| modulation::envelope(t, &terms)).collect()
}

/// Decay-weighted echo signal on a uniform τ grid (s).
#[pyfunction]
#[pyo3(signature = (spins, tau, t2, gamma=1.0, mode="amplitude", noise_sigma=0.0, seed=0))]
fn synthesize_trace(
    spins: Vec<PyCoupling>,
    tau: Vec<f64>,
    t2: f64,
    gamma: f64,
    mode: &str,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let params = ModulationParams {
        spins: spin_terms(&spins),
        t2,
        gamma,
        mode: parse::<EchoMode>(mode)?,
    };
    Ok(modulation::synthesize_trace(&params, &tau, noise_sigma, seed)
        .map_err(err)?
        .values)
}

/// Normalized echo of one nucleus from the explicit four-level evolution.
#[pyfunction]
fn quantum_echo_oracle(model: &PySpinModel, b_tot_g: [f64; 3], b_tot_e: [f64; 3], tau: Vec<f64>) -> Vec<f64> {
    modulation::quantum_echo_oracle(&model.inner.constants, &vec3(b_tot_g), &vec3(b_tot_e), &tau)
}

/// Closed-form single-nucleus factor for the same total fields.
#[pyfunction]
fn closed_form_single_spin(model: &PySpinModel, b_tot_g: [f64; 3], b_tot_e: [f64; 3], tau: Vec<f64>) -> Vec<f64> {
    modulation::closed_form_single_spin(&model.inner.constants, &vec3(b_tot_g), &vec3(b_tot_e), &tau)
}

/// Detrend, zero-pad and transform a trace, then pick peaks.
///
/// Returns a dict with `freq`, `magnitude`, `native_resolution`, `decay`
/// (amplitude, t2, gamma) and `peaks` as (frequency, magnitude, width).
#[pyfunction]
#[pyo3(signature = (tau, values, pad_factor=8, window="none", threshold_sigma=5.0, mode="amplitude"))]
fn analyze<'py>(
    py: Python<'py>,
    tau: Vec<f64>,
    values: Vec<f64>,
    pad_factor: usize,
    window: &str,
    threshold_sigma: f64,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let trace = EchoTrace::new(tau, values, parse(mode)?).map_err(err)?;
    let (detrended, spec) =
        spectral::analyze(&trace, PadTarget::Factor(pad_factor), parse::<Window>(window)?).map_err(err)?;
    let opts = PeakOptions { threshold_sigma, ..Default::default() };
    let peaks: Vec<(f64, f64, f64)> = spectral::find_peaks(&spec, &opts)
        .iter()
        .map(|p| (p.frequency, p.magnitude, p.width))
        .collect();
    let d = PyDict::new(py);
    d.set_item("freq", spec.freq)?;
    d.set_item("magnitude", spec.magnitude)?;
    d.set_item("native_resolution", spec.native_resolution)?;
    let f = detrended.fit;
    d.set_item("decay", (f.amplitude, f.t2, f.gamma))?;
    d.set_item("peaks", peaks)?;
    Ok(d)
}

/// Result of a line-position fit; fields in tesla, g in MHz/T.
#[pyclass(name = "HyperbolaFit", frozen)]
struct PyHyperbolaFit {
    inner: fitting::HyperbolaFit,
}

#[pymethods]
impl PyHyperbolaFit {
    #[getter]
    fn b_par(&self) -> f64 {
        self.inner.b_par
    }
    #[getter]
    fn b_perp(&self) -> f64 {
        self.inner.b_perp
    }
    #[getter]
    fn g_eff(&self) -> f64 {
        self.inner.g_eff
    }
    #[getter]
    fn errors(&self) -> Vec<f64> {
        self.inner.errors.clone()
    }
    #[getter]
    fn residual_rms(&self) -> f64 {
        self.inner.residual_rms
    }
    #[getter]
    fn chi2(&self) -> f64 {
        self.inner.chi2
    }
    #[getter]
    fn ambiguous_minima(&self) -> usize {
        self.inner.ambiguous_minima
    }

    /// Fitted splitting at signed field `b`, Hz.
    fn eval(&self, b: f64) -> f64 {
        self.inner.eval(b)
    }

    fn __repr__(&self) -> String {
        format!(
            "HyperbolaFit(b_par={:.6} T, b_perp={:.6} T, g_eff={:.5} MHz/T)",
            self.inner.b_par, self.inner.b_perp, self.inner.g_eff
        )
    }
}

fn series(b: &[f64], freq: &[f64], freq_err: Option<&[f64]>) -> PyResult<LinePositionSeries> {
    if b.len() != freq.len() || freq_err.is_some_and(|e| e.len() != b.len()) {
        return Err(PyValueError::new_err("b, freq and freq_err must have equal lengths"));
    }
    let points = (0..b.len())
        .map(|k| LinePoint {
            b: b[k],
            freq: freq[k],
            freq_err: freq_err.map_or(1.0, |e| e[k]),
        })
        .collect();
    Ok(LinePositionSeries::new("series", points))
}

fn weighting(freq_err: &Option<Vec<f64>>) -> Weighting {
    if freq_err.is_some() {
        Weighting::SuppliedErrors
    } else {
        Weighting::Uniform
    }
}

/// Fits Δ(B) = |g|·√(B⊥² + (B∥ + B)²). Supplied errors are used as 1σ
/// weights; `fix_g` (MHz/T) removes g from the fit.
#[pyfunction]
#[pyo3(signature = (b, freq, freq_err=None, fix_g=None))]
fn fit_hyperbola(b: Vec<f64>, freq: Vec<f64>, freq_err: Option<Vec<f64>>, fix_g: Option<f64>) -> PyResult<PyHyperbolaFit> {
    let s = series(&b, &freq, freq_err.as_deref())?;
    let opts = FitOptions { weighting: weighting(&freq_err), ..Default::default() };
    let inner = fitting::fit_hyperbola(&s, fix_g, &opts).map_err(err)?;
    Ok(PyHyperbolaFit { inner })
}

/// Combined g (MHz/T, 1σ) from free-g fits of several (b, freq) series.
#[pyfunction]
fn fit_gyromagnetic(series_set: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<(f64, f64)> {
    let all = series_set
        .iter()
        .map(|(b, f)| series(b, f, None))
        .collect::<PyResult<Vec<_>>>()?;
    let fit = fitting::fit_gyromagnetic(&all, &FitOptions::default()).map_err(err)?;
    Ok((fit.mean, fit.error))
}

/// λ of site `index` from a list of ρ values.
#[pyfunction]
fn prominence_of(index: usize, rhos: Vec<f64>) -> f64 {
    prominence::prominence(index, &rhos)
}

/// Field maximizing the prominence of `label`. Returns (λ, field, ρ at best).
#[pyfunction]
#[pyo3(signature = (
    model, sites, label, axis=None, b_min=prominence::DEFAULT_B_MIN, b_max=prominence::DEFAULT_B_MAX,
    angular_step_deg=prominence::DEFAULT_ANGULAR_STEP_DEG, magnitude_steps=prominence::DEFAULT_MAGNITUDE_STEPS,
    refine=true, branch="down"
))]
#[allow(clippy::too_many_arguments)]
fn maximize_prominence(
    model: &PySpinModel,
    sites: Vec<PySite>,
    label: &str,
    axis: Option<[f64; 3]>,
    b_min: f64,
    b_max: f64,
    angular_step_deg: f64,
    magnitude_steps: usize,
    refine: bool,
    branch: &str,
) -> PyResult<(f64, [f64; 3], f64)> {
    let sites = inner_sites(&sites);
    let index = crystal::find_site(&sites, label).map_err(err)?;
    let space = FieldSearchSpace {
        direction: axis.map_or(DirectionConstraint::FreeSphere, |a| DirectionConstraint::FixedAxis(vec3(a))),
        b_min,
        b_max,
        grid: GridSpec { angular_step_deg, magnitude_steps },
        refine,
    };
    let r = prominence::maximize_prominence(&model.inner, &sites, parse(branch)?, index, &space).map_err(err)?;
    Ok((r.lambda, arr(&r.best_field), r.rho_at_best))
}

/// Predicted lines along a (possibly tilted) axis. Each row is
/// (site, class, component, b, freq, rho).
#[pyfunction]
#[pyo3(signature = (model, sites, magnitudes, axis=[0.0, 0.0, 1.0], tilt_deg=0.0, azimuth_deg=0.0, branch="down"))]
#[allow(clippy::too_many_arguments)]
fn predict_linemap(
    model: &PySpinModel,
    sites: Vec<PySite>,
    magnitudes: Vec<f64>,
    axis: [f64; 3],
    tilt_deg: f64,
    azimuth_deg: f64,
    branch: &str,
) -> PyResult<Vec<(String, String, String, f64, f64, f64)>> {
    let mut spec = SweepSpec::along(vec3(axis), magnitudes, inner_sites(&sites)).with_tilt(tilt_deg, azimuth_deg);
    spec.branch = parse::<SpinBranch>(branch)?;
    let map = sweep::predict_linemap(&model.inner, &spec).map_err(err)?;
    Ok(map
        .rows
        .into_iter()
        .map(|r| (r.site, r.class.to_string(), r.component.to_string(), r.b, r.freq, r.rho))
        .collect())
}

#[pymodule]
fn oeem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ModelError", m.py().get_type::<ModelError>())?;
    m.add_class::<PySite>()?;
    m.add_class::<PyCoupling>()?;
    m.add_class::<PySpinModel>()?;
    m.add_class::<PyHyperbolaFit>()?;
    m.add_function(wrap_pyfunction!(site_catalog, m)?)?;
    m.add_function(wrap_pyfunction!(envelope, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_trace, m)?)?;
    m.add_function(wrap_pyfunction!(quantum_echo_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_single_spin, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(fit_hyperbola, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gyromagnetic, m)?)?;
    m.add_function(wrap_pyfunction!(prominence_of, m)?)?;
    m.add_function(wrap_pyfunction!(maximize_prominence, m)?)?;
    m.add_function(wrap_pyfunction!(predict_linemap, m)?)?;
    Ok(())
}
