use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use oeem_core::crystal::{find_site, MagneticClass, Vector3, YttriumSite};
use oeem_core::fitting::{fit_gyromagnetic, fit_hyperbola, FitOptions, Weighting, DEFAULT_INITIAL_G_MHZ_PER_T};
use oeem_core::io::{
    read_series, read_trace, write_linemap, write_peaks, write_prominence,
    write_records, write_series, write_spectrum, write_sweep_map, write_toml, write_trace,
    ProminenceBarRecord, SiteRecord, TraceMeta,
};
use oeem_core::modulation::{closed_form_single_spin, quantum_echo_oracle, uniform_grid, EchoMode};
use oeem_core::prominence::{
    maximize_prominence, rho_max_scan, DirectionConstraint, FieldSearchSpace, GridSpec, RhoScan,
    DEFAULT_SCAN_STEPS,
};
use oeem_core::spectral::{analyze, find_peaks, spectrum, PadTarget, PeakOptions, Window};
use oeem_core::spinmodel::{field_components, SpinBranch};
use oeem_core::sweep::{
    predict_linemap, simulate_sweep, simulate_trace, Component, Emitters, SimulationOptions, SweepSpec,
};
use oeem_core::OeemError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] OeemError),
    #[error("{0}")]
    Validation(String),
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the yttrium site catalog (positions in angstrom) and write sites.csv.
    Sites,
    /// Couplings, splittings and branching contrast at one bias field; writes predict.toml.
    Predict(PredictArgs),
    /// Line-position map versus field for both magnetic classes; writes linemap.csv.
    Sweep(SweepArgs),
    /// Synthesize an echo trace at one field; writes trace.csv and trace.csv.json.
    Simulate(SimulateArgs),
    /// Detrend, zero-pad and transform a trace; writes spectrum.csv, peaks.csv, detrend.toml.
    Spectrum(SpectrumArgs),
    /// Fit Δ(B) = |g|·sqrt(B⊥² + (B∥ + B)²) to a line series; writes fit_<name>.toml.
    FitHyperbola(FitArgs),
    /// Free-g fits of several series and their combined gyromagnetic ratio; writes gyro.toml.
    FitGyro(GyroArgs),
    /// Maximize each site's spin prominence over the bias field; writes prominence.csv.
    Prominence(ProminenceArgs),
    /// Compare the brute-force quantum echo with the closed form on random fields.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    /// Bias field along b, T (signed).
    #[arg(long, allow_hyphen_values = true, conflicts_with = "field")]
    field_b: Option<f64>,
    /// Bias field vector "D1,D2,b", T.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    field: Option<Vector3>,
}

impl FieldArgs {
    fn vector(&self) -> Result<Vector3, OeemError> {
        match (self.field_b, self.field) {
            (Some(b), _) => Ok(Vector3::new(0.0, 0.0, b)),
            (None, Some(v)) => Ok(v),
            (None, None) => Err(OeemError::InvalidInput("give --field-b or --field".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmitterArg {
    /// Single emitter of class I.
    I,
    /// Single emitter of class II.
    Ii,
    /// Equal mix of both classes.
    Ensemble,
}

impl From<EmitterArg> for Emitters {
    fn from(e: EmitterArg) -> Self {
        match e {
            EmitterArg::I => Emitters::Single(MagneticClass::I),
            EmitterArg::Ii => Emitters::Single(MagneticClass::II),
            EmitterArg::Ensemble => Emitters::Ensemble,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    field: FieldArgs,
    /// Site labels, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    site: Vec<String>,
    /// Er spin branch: down (lower) or up.
    #[arg(long, default_value = "down")]
    branch: SpinBranch,
    /// Magnetic class of the dopant: I or II.
    #[arg(long, default_value = "I")]
    class: MagneticClass,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Echo decay time T2, s.
    #[arg(long, default_value_t = 400e-6)]
    t2: f64,
    /// Stretch exponent of the decay (≥ 1).
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Detected quantity: amplitude or intensity (squared).
    #[arg(long, default_value = "amplitude")]
    mode: EchoMode,
    /// Delay step, s.
    #[arg(long, default_value_t = 1e-6)]
    dt: f64,
    /// Number of delays (first delay is 0).
    #[arg(long, default_value_t = 1000)]
    n_samples: usize,
    /// Gaussian noise σ added to each sample (trace units).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Which emitters contribute.
    #[arg(long, value_enum, default_value = "i")]
    emitters: EmitterArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep axis "D1,D2,b".
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,1", allow_hyphen_values = true)]
    axis: Vector3,
    /// First field, T.
    #[arg(long, default_value_t = -0.3, allow_hyphen_values = true)]
    b_min: f64,
    /// Last field, T.
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    b_max: f64,
    /// Number of evenly spaced fields; fields inside the zero-field threshold are skipped.
    #[arg(long, default_value_t = 61)]
    steps: usize,
    /// Misalignment of the field from the axis, degrees (≤ 10).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tilt_polar: f64,
    /// Azimuth of the misalignment, degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tilt_azimuth: f64,
    /// Site labels, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    site: Vec<String>,
    /// Er spin branch: down or up.
    #[arg(long, default_value = "down")]
    branch: SpinBranch,
    /// Branching contrast at which line intensity saturates.
    #[arg(long, default_value_t = 1.0)]
    rho_sat: f64,
    /// Write one line as a fit series: SITE:COMPONENT[:CLASS], component one of
    /// delta_g, delta_e, delta_plus, delta_minus. Repeatable.
    #[arg(long)]
    export_series: Vec<String>,
    /// 1σ frequency error attached to exported series, Hz.
    #[arg(long, default_value_t = 1.0)]
    freq_err: f64,
    /// Also simulate a spectrum at every field; writes sweep_map.csv.
    #[arg(long)]
    simulate: bool,
    #[command(flatten)]
    trace: TraceArgs,
    /// Zero-padding factor for simulated spectra.
    #[arg(long, default_value_t = 8)]
    pad_factor: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    field: FieldArgs,
    /// Site labels, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    site: Vec<String>,
    /// Er spin branch: down or up.
    #[arg(long, default_value = "down")]
    branch: SpinBranch,
    #[command(flatten)]
    trace: TraceArgs,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "trace.csv")]
    name: String,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Trace CSV (`tau_s,value`, or any layout with --adapter).
    #[arg(long)]
    trace: PathBuf,
    /// Read the trace through the [adapter] column mapping of the config file.
    #[arg(long)]
    adapter: bool,
    /// Zero-padding factor (grid spacing = 1/(2·N·dt·factor)).
    #[arg(long, default_value_t = 8, conflicts_with = "pad_length")]
    pad_factor: usize,
    /// Padded record length, s; rounded up to a whole factor.
    #[arg(long)]
    pad_length: Option<f64>,
    /// Taper: none or hann.
    #[arg(long, default_value = "none")]
    window: Window,
    /// Peak threshold in robust standard deviations above the median.
    #[arg(long, default_value_t = 5.0)]
    threshold_sigma: f64,
    /// Transform the raw trace without removing the decay.
    #[arg(long)]
    no_detrend: bool,
    /// Prefix for the output files.
    #[arg(long, default_value = "")]
    prefix: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Uniform,
    Supplied,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::Supplied => Weighting::SuppliedErrors,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Series CSV `b_tesla,freq_hz,freq_err_hz`.
    #[arg(long)]
    series: PathBuf,
    /// Fix the gyromagnetic ratio, MHz/T (signed).
    #[arg(long, allow_hyphen_values = true)]
    fix_g: Option<f64>,
    /// Start value of a free gyromagnetic ratio, MHz/T; its sign is reported.
    #[arg(long, allow_hyphen_values = true, default_value_t = DEFAULT_INITIAL_G_MHZ_PER_T)]
    initial_g: f64,
    /// uniform (covariance scaled by reduced χ²) or supplied (freq_err as 1σ).
    #[arg(long, value_enum, default_value = "uniform")]
    weighting: WeightingArg,
    /// Sign of B∥ preferred when two minima fit equally well (+1 or -1).
    #[arg(long, allow_hyphen_values = true)]
    prefer_sign: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GyroArgs {
    /// Series CSV files.
    #[arg(long, num_args = 1.., required = true)]
    series: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "uniform")]
    weighting: WeightingArg,
}

#[derive(Debug, Args)]
pub struct ProminenceArgs {
    /// Site labels, comma separated [default: all].
    #[arg(long, value_delimiter = ',')]
    site: Vec<String>,
    /// Restrict the field to this axis "D1,D2,b" [default: free direction].
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    axis: Option<Vector3>,
    /// Smallest field magnitude, T.
    #[arg(long, default_value_t = 1e-3)]
    b_min: f64,
    /// Largest field magnitude, T.
    #[arg(long, default_value_t = 1.0)]
    b_max: f64,
    /// Angular grid spacing, degrees.
    #[arg(long, default_value_t = 10.0)]
    angular_step: f64,
    /// Logarithmic magnitude steps.
    #[arg(long, default_value_t = 40)]
    magnitude_steps: usize,
    /// Skip the local refinement after the grid search.
    #[arg(long)]
    no_refine: bool,
    /// Er spin branch: down or up.
    #[arg(long, default_value = "down")]
    branch: SpinBranch,
    /// Also write rho_max.csv: the largest ρ per site over both signs along --axis (default b).
    #[arg(long)]
    rho_max: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Number of random field pairs.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Largest delay, s.
    #[arg(long, default_value_t = 300e-6)]
    tau_max: f64,
    /// Delay step, s.
    #[arg(long, default_value_t = 1e-6)]
    dt: f64,
    /// Largest total-field magnitude drawn, T.
    #[arg(long, default_value_t = 0.3)]
    b_max: f64,
    /// Pass threshold for the maximum absolute deviation.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

fn parse_vec3(s: &str) -> Result<Vector3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok(Vector3::new(*a, *b, *c)),
        _ => Err(format!("expected three comma-separated numbers, got {s:?}")),
    }
}

fn select_sites(cfg: &RunConfig, labels: &[String]) -> Result<Vec<YttriumSite>, OeemError> {
    if labels.is_empty() {
        return Ok(cfg.sites.clone());
    }
    labels
        .iter()
        .map(|l| find_site(&cfg.sites, l).map(|i| cfg.sites[i].clone()))
        .collect()
}

pub fn run(cfg: &RunConfig, command: Command) -> CmdResult {
    match command {
        Command::Sites => cmd_sites(cfg),
        Command::Predict(a) => cmd_predict(cfg, a),
        Command::Sweep(a) => cmd_sweep(cfg, a),
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Spectrum(a) => cmd_spectrum(cfg, a),
        Command::FitHyperbola(a) => cmd_fit_hyperbola(cfg, a),
        Command::FitGyro(a) => cmd_fit_gyro(cfg, a),
        Command::Prominence(a) => cmd_prominence(cfg, a),
        Command::Oracle(a) => cmd_oracle(cfg, a),
    }
}

fn cmd_sites(cfg: &RunConfig) -> CmdResult {
    let records: Vec<SiteRecord> = cfg.sites.iter().map(SiteRecord::from).collect();
    write_records(&cfg.out("sites.csv"), &records)?;
    println!("site,d1_angstrom,d2_angstrom,b_angstrom,distance_angstrom");
    for r in &records {
        println!(
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.site, r.d1_angstrom, r.d2_angstrom, r.b_angstrom, r.distance_angstrom
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SiteReport {
    site: String,
    rho: f64,
    p: f64,
    delta_g_hz: f64,
    delta_e_hz: f64,
    delta_plus_hz: f64,
    delta_minus_hz: f64,
    a_g_hz: f64,
    a_e_hz: f64,
    /// Er-field components along / across the bias field, T.
    b_par_g_tesla: f64,
    b_perp_g_tesla: f64,
    b_par_e_tesla: f64,
    b_perp_e_tesla: f64,
}

#[derive(Debug, Serialize)]
struct PredictReport {
    field_tesla: [f64; 3],
    branch: String,
    class: String,
    note: &'static str,
    site: Vec<SiteReport>,
}

fn cmd_predict(cfg: &RunConfig, a: PredictArgs) -> CmdResult {
    let field = a.field.vector()?;
    let sites = select_sites(cfg, &a.site)?;
    let couplings = cfg.model.couplings_in_class(&sites, &field, a.branch, a.class)?;
    let direction = field.normalize();
    let mut reports = Vec::with_capacity(couplings.len());
    for c in &couplings {
        let comp = field_components(c, &direction)?;
        reports.push(SiteReport {
            site: c.site_label.clone(),
            rho: c.rho,
            p: c.p,
            delta_g_hz: c.delta_g,
            delta_e_hz: c.delta_e,
            delta_plus_hz: c.delta_sum(),
            delta_minus_hz: c.delta_diff(),
            a_g_hz: c.a_g,
            a_e_hz: c.a_e,
            b_par_g_tesla: comp.par_g,
            b_perp_g_tesla: comp.perp_g,
            b_par_e_tesla: comp.par_e,
            b_perp_e_tesla: comp.perp_e,
        });
    }
    for r in &reports {
        println!(
            "{}: rho = {:.3}, delta_g = {:.2} kHz, delta_e = {:.2} kHz, |A_g| = {:.0} kHz, |A_e| = {:.0} kHz",
            r.site,
            r.rho,
            r.delta_g_hz / 1e3,
            r.delta_e_hz / 1e3,
            r.a_g_hz / 1e3,
            r.a_e_hz / 1e3
        );
    }
    let report = PredictReport {
        field_tesla: [field.x, field.y, field.z],
        branch: a.branch.to_string(),
        class: a.class.to_string(),
        note: "b_par/b_perp are projections on the bias field direction",
        site: reports,
    };
    write_toml(&cfg.out("predict.toml"), &report)?;
    Ok(())
}

fn trace_options(t: &TraceArgs, seed: u64, pad: PadTarget) -> SimulationOptions {
    SimulationOptions {
        t2: t.t2,
        gamma: t.gamma,
        mode: t.mode,
        pad,
        n_samples: t.n_samples,
        dt: t.dt,
        noise_sigma: t.noise,
        seed,
        emitters: t.emitters.into(),
        ..Default::default()
    }
}

fn parse_series_spec(s: &str) -> Result<(String, Component, MagneticClass), OeemError> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [site, comp] => Ok((site.to_string(), comp.parse()?, MagneticClass::I)),
        [site, comp, class] => Ok((site.to_string(), comp.parse()?, class.parse()?)),
        _ => Err(OeemError::InvalidInput(format!(
            "series spec {s:?} is not SITE:COMPONENT[:CLASS]"
        ))),
    }
}

fn cmd_sweep(cfg: &RunConfig, a: SweepArgs) -> CmdResult {
    if a.steps == 0 {
        return Err(OeemError::InvalidInput("--steps must be positive".into()).into());
    }
    let threshold = cfg.model.zero_field_threshold;
    let all: Vec<f64> = if a.steps == 1 {
        vec![a.b_min]
    } else {
        (0..a.steps)
            .map(|i| a.b_min + (a.b_max - a.b_min) * i as f64 / (a.steps - 1) as f64)
            .collect()
    };
    let magnitudes: Vec<f64> = all.iter().copied().filter(|b| b.abs() >= threshold).collect();
    if magnitudes.len() < all.len() {
        eprintln!(
            "skipped {} field point(s) inside the zero-field threshold of {threshold} T",
            all.len() - magnitudes.len()
        );
    }
    let spec = SweepSpec {
        branch: a.branch,
        rho_sat: a.rho_sat,
        ..SweepSpec::along(a.axis, magnitudes, select_sites(cfg, &a.site)?)
    }
    .with_tilt(a.tilt_polar, a.tilt_azimuth);
    let map = predict_linemap(&cfg.model, &spec)?;
    write_linemap(&cfg.out("linemap.csv"), &map)?;
    for s in &a.export_series {
        let (site, component, class) = parse_series_spec(s)?;
        find_site(&spec.sites, &site)?;
        let series = map.series(&site, class, component, a.freq_err);
        write_series(&cfg.out(&format!("series_{site}_{component}_{class}.csv")), &series)?;
    }
    if a.simulate {
        let opts = trace_options(&a.trace, cfg.seed, PadTarget::Factor(a.pad_factor));
        let points = simulate_sweep(&cfg.model, &spec, &opts)?;
        write_sweep_map(&cfg.out("sweep_map.csv"), &points)?;
    }
    println!("{} rows written to {}", map.rows.len(), cfg.out("linemap.csv").display());
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, a: SimulateArgs) -> CmdResult {
    let field = a.field.vector()?;
    let magnitude = field.norm();
    if magnitude == 0.0 {
        return Err(OeemError::ZeroField {
            magnitude,
            threshold: cfg.model.zero_field_threshold,
        }
        .into());
    }
    let spec = SweepSpec {
        branch: a.branch,
        ..SweepSpec::along(field / magnitude, vec![magnitude], select_sites(cfg, &a.site)?)
    };
    spec.validate()?;
    let opts = trace_options(&a.trace, cfg.seed, PadTarget::default());
    let trace = simulate_trace(&cfg.model, &spec, &opts, magnitude, cfg.seed)?;
    let meta = TraceMeta {
        mode: trace.mode,
        noise_sigma: trace.noise_sigma,
        rng_seed: trace.rng_seed,
        params: None,
        field_tesla: Some([field.x, field.y, field.z]),
    };
    let path = cfg.out(&a.name);
    write_trace(&path, &trace, &meta)?;
    println!("{} samples written to {}", trace.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct DetrendReport {
    detrended: bool,
    amplitude: f64,
    t2_s: f64,
    gamma: f64,
    residual_rms: f64,
    pad_factor: usize,
    native_resolution_hz: f64,
    spacing_hz: f64,
    threshold: f64,
    peaks: usize,
}

fn cmd_spectrum(cfg: &RunConfig, a: SpectrumArgs) -> CmdResult {
    let trace = if a.adapter {
        let adapter = cfg
            .adapter
            .as_ref()
            .ok_or_else(|| OeemError::Config("--adapter needs an [adapter] section in the config".into()))?;
        adapter.read(&a.trace)?
    } else {
        read_trace(&a.trace)?.0
    };
    let pad = match a.pad_length {
        Some(l) => PadTarget::Length(l),
        None => PadTarget::Factor(a.pad_factor),
    };
    let (fit, spec) = if a.no_detrend {
        (None, spectrum(&trace, pad, a.window)?)
    } else {
        let (d, s) = analyze(&trace, pad, a.window)?;
        (Some(d.fit), s)
    };
    let opts = PeakOptions {
        threshold_sigma: a.threshold_sigma,
        ..Default::default()
    };
    let peaks = find_peaks(&spec, &opts);
    write_spectrum(&cfg.out(&format!("{}spectrum.csv", a.prefix)), &spec)?;
    write_peaks(&cfg.out(&format!("{}peaks.csv", a.prefix)), &peaks)?;
    let report = DetrendReport {
        detrended: fit.is_some(),
        amplitude: fit.as_ref().map_or(0.0, |f| f.amplitude),
        t2_s: fit.as_ref().map_or(0.0, |f| f.t2),
        gamma: fit.as_ref().map_or(0.0, |f| f.gamma),
        residual_rms: fit.as_ref().map_or(0.0, |f| f.residual_rms),
        pad_factor: spec.pad_factor,
        native_resolution_hz: spec.native_resolution,
        spacing_hz: spec.spacing(),
        threshold: oeem_core::spectral::detection_threshold(&spec, &opts),
        peaks: peaks.len(),
    };
    write_toml(&cfg.out(&format!("{}detrend.toml", a.prefix)), &report)?;
    println!("freq_hz,magnitude,width_hz");
    for p in &peaks {
        println!("{},{},{}", p.frequency, p.magnitude, p.width);
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into())
}

fn cmd_fit_hyperbola(cfg: &RunConfig, a: FitArgs) -> CmdResult {
    let series = read_series(&a.series)?;
    let opts = FitOptions {
        weighting: a.weighting.into(),
        prefer_b_par_sign: a.prefer_sign,
        initial_g: a.initial_g,
    };
    let fit = fit_hyperbola(&series, a.fix_g, &opts)?;
    write_toml(&cfg.out(&format!("fit_{}.toml", stem(&a.series))), &fit)?;
    println!(
        "{}: B_par = {:.6} T, B_perp = {:.6} T, g = {:.6} MHz/T, rms = {:.3} Hz",
        fit.label, fit.b_par, fit.b_perp, fit.g_eff, fit.residual_rms
    );
    if fit.ambiguous_minima > 1 {
        eprintln!("{} equally good minima; B_par sign chosen by tie-breaking", fit.ambiguous_minima);
    }
    Ok(())
}

fn cmd_fit_gyro(cfg: &RunConfig, a: GyroArgs) -> CmdResult {
    let series = a
        .series
        .iter()
        .map(|p| read_series(p))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = FitOptions {
        weighting: a.weighting.into(),
        ..Default::default()
    };
    let gyro = fit_gyromagnetic(&series, &opts)?;
    write_toml(&cfg.out("gyro.toml"), &gyro)?;
    for f in &gyro.fits {
        println!("{}: g = {:.5} ± {:.5} MHz/T", f.label, f.g_eff, f.errors[2]);
    }
    println!("combined: g = {:.5} ± {:.5} MHz/T", gyro.mean, gyro.error);
    Ok(())
}

#[derive(Debug, Serialize)]
struct RhoMaxRecord {
    site: String,
    rho_max: f64,
    b_tesla: f64,
}

fn cmd_prominence(cfg: &RunConfig, a: ProminenceArgs) -> CmdResult {
    let selected = select_sites(cfg, &a.site)?;
    let space = FieldSearchSpace {
        direction: match a.axis {
            Some(v) => DirectionConstraint::FixedAxis(v),
            None => DirectionConstraint::FreeSphere,
        },
        b_min: a.b_min,
        b_max: a.b_max,
        grid: GridSpec {
            angular_step_deg: a.angular_step,
            magnitude_steps: a.magnitude_steps,
        },
        refine: !a.no_refine,
    };
    let mut results = Vec::with_capacity(selected.len());
    let mut bars = Vec::with_capacity(selected.len());
    let mut scans = Vec::new();
    for s in &selected {
        let i = find_site(&cfg.sites, &s.label)?;
        let r = maximize_prominence(&cfg.model, &cfg.sites, a.branch, i, &space)?;
        println!("{}: lambda_max = {:.3}, rho = {:.3}", r.site_label, r.lambda, r.rho_at_best);
        bars.push(ProminenceBarRecord {
            site: r.site_label.clone(),
            distance_angstrom: cfg.sites[i].distance,
            lambda_max: r.lambda,
        });
        if a.rho_max {
            let axis = a.axis.unwrap_or_else(Vector3::z);
            let RhoScan { rho_max, b_at_max } = rho_max_scan(
                &cfg.model,
                &cfg.sites,
                a.branch,
                i,
                &axis,
                (a.b_min, a.b_max),
                DEFAULT_SCAN_STEPS,
            )?;
            scans.push(RhoMaxRecord {
                site: r.site_label.clone(),
                rho_max,
                b_tesla: b_at_max,
            });
        }
        results.push(r);
    }
    write_prominence(&cfg.out("prominence.csv"), &results)?;
    write_records(&cfg.out("prominence_bars.csv"), &bars)?;
    if a.rho_max {
        write_records(&cfg.out("rho_max.csv"), &scans)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleReport {
    trials: usize,
    samples_per_trial: usize,
    max_deviation: f64,
    tolerance: f64,
    pass: bool,
    seed: u64,
}

fn random_field(rng: &mut ChaCha8Rng, b_max: f64) -> Vector3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    let magnitude = rng.random_range(1e-3..b_max);
    Vector3::new(r * phi.cos(), r * phi.sin(), z) * magnitude
}

fn cmd_oracle(cfg: &RunConfig, a: OracleArgs) -> CmdResult {
    if !(a.dt > 0.0 && a.tau_max >= 0.0 && a.b_max > 1e-3) {
        return Err(OeemError::InvalidInput("need dt > 0, tau_max ≥ 0 and b_max > 1 mT".into()).into());
    }
    let n = (a.tau_max / a.dt).round() as usize + 1;
    let tau = uniform_grid(n, a.dt);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_dev: f64 = 0.0;
    for _ in 0..a.trials {
        let bg = random_field(&mut rng, a.b_max);
        let be = random_field(&mut rng, a.b_max);
        let q = quantum_echo_oracle(&cfg.model.constants, &bg, &be, &tau);
        let c = closed_form_single_spin(&cfg.model.constants, &bg, &be, &tau);
        for (x, y) in q.iter().zip(&c) {
            max_dev = max_dev.max((x - y).abs());
        }
    }
    let pass = max_dev <= a.tolerance;
    let report = OracleReport {
        trials: a.trials,
        samples_per_trial: n,
        max_deviation: max_dev,
        tolerance: a.tolerance,
        pass,
        seed: cfg.seed,
    };
    write_toml(&cfg.out("oracle.toml"), &report)?;
    let relation = if pass { "≤" } else { ">" };
    println!(
        "max deviation {max_dev:.3e} {relation} {:e} over {} trials",
        a.tolerance, a.trials
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "oracle deviation {max_dev:e} exceeds {:e}",
            a.tolerance
        )))
    }
}
