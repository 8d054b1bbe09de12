//! From echo traces to modulation spectra: subtract a fitted stretched
//! exponential, zero-pad, Fourier transform and pick peaks.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{OeemError, Result};
use crate::modulation::{stretched_exponential, EchoTrace};
use crate::optim::{levenberg_marquardt, LmOptions};

pub const MIN_DETREND_SAMPLES: usize = 8;
pub const DEFAULT_PAD_FACTOR: usize = 8;
pub const DEFAULT_THRESHOLD_SIGMA: f64 = 5.0;
/// MAD → σ for Gaussian noise.
const MAD_TO_SIGMA: f64 = 1.4826;

/// Fitted A₀·exp[−(2τ/T2)^γ].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    pub t2: f64,
    pub gamma: f64,
    pub residual_rms: f64,
}

impl DecayFit {
    pub fn eval(&self, tau: f64) -> f64 {
        self.amplitude * stretched_exponential(tau, self.t2, self.gamma)
    }
}

#[derive(Debug, Clone)]
pub struct Detrended {
    pub residual: EchoTrace,
    pub fit: DecayFit,
}

fn decay_jacobian(tau: &[f64], p: &DVector<f64>) -> DMatrix<f64> {
    let (a0, t2, gamma) = (p[0], p[1], p[2]);
    DMatrix::from_fn(tau.len(), 3, |i, j| {
        let u = 2.0 * tau[i] / t2;
        if u <= 0.0 {
            return if j == 0 { 1.0 } else { 0.0 };
        }
        let ug = u.powf(gamma);
        let e = (-ug).exp();
        match j {
            0 => e,
            1 => a0 * e * gamma * ug / t2,
            _ => -a0 * e * ug * u.ln(),
        }
    })
}

/// Fits and subtracts the stretched-exponential envelope (γ ≥ 1).
///
/// An identically zero trace has no envelope to fit and is reported as
/// `FitFailure`.
pub fn detrend(trace: &EchoTrace) -> Result<Detrended> {
    trace.validate()?;
    if trace.len() < MIN_DETREND_SAMPLES {
        return Err(OeemError::InsufficientData {
            needed: MIN_DETREND_SAMPLES,
            got: trace.len(),
        });
    }
    let tau = &trace.tau;
    let y = &trace.values;
    if y.iter().all(|v| *v == 0.0) {
        return Err(OeemError::FitFailure("trace is identically zero".into()));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(OeemError::FitFailure("trace contains non-finite values".into()));
    }

    // Initial guesses: the first samples set A0; the first moment of the
    // signal gives T2 for an exponential (⟨τ⟩ = T2/2).
    let head = y.iter().take(4).sum::<f64>() / y.len().min(4) as f64;
    let a0 = if head != 0.0 { head } else { y[0] };
    let span = tau[tau.len() - 1] - tau[0];
    let sum: f64 = y.iter().sum();
    let moment: f64 = tau.iter().zip(y).map(|(t, v)| t * v).sum();
    let mut t2_guess = if sum != 0.0 { 2.0 * moment / sum } else { span };
    if !(t2_guess > 0.0) || !t2_guess.is_finite() {
        t2_guess = span;
    }
    let t2_guess = t2_guess.clamp(span * 1e-3, span * 1e3);

    let residuals = |p: &DVector<f64>| {
        DVector::from_iterator(
            tau.len(),
            tau.iter()
                .zip(y)
                .map(|(t, v)| p[0] * stretched_exponential(*t, p[1], p[2]) - v),
        )
    };
    let jacobian = |p: &DVector<f64>| decay_jacobian(tau, p);
    let opts = LmOptions {
        lower: Some(DVector::from_vec(vec![f64::NEG_INFINITY, span * 1e-6, 1.0])),
        upper: Some(DVector::from_vec(vec![f64::INFINITY, f64::INFINITY, 20.0])),
        ..Default::default()
    };

    let mut best: Option<crate::optim::LmReport> = None;
    for scale in [1.0, 0.5, 2.0] {
        for gamma in [1.0, 1.5] {
            let x0 = DVector::from_vec(vec![a0, t2_guess * scale, gamma]);
            if let Ok(rep) = levenberg_marquardt(residuals, jacobian, x0, &opts) {
                if best.as_ref().is_none_or(|b| rep.cost < b.cost) {
                    best = Some(rep);
                }
            }
        }
    }
    let rep = best.ok_or_else(|| OeemError::FitFailure("decay fit did not converge".into()))?;
    let fit = DecayFit {
        amplitude: rep.params[0],
        t2: rep.params[1],
        gamma: rep.params[2],
        residual_rms: (rep.cost / y.len() as f64).sqrt(),
    };
    let values = tau.iter().zip(y).map(|(t, v)| v - fit.eval(*t)).collect();
    Ok(Detrended {
        residual: EchoTrace {
            tau: tau.clone(),
            values,
            mode: trace.mode,
            noise_sigma: trace.noise_sigma,
            rng_seed: trace.rng_seed,
        },
        fit,
    })
}

/// Optional taper applied before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    None,
    Hann,
}

impl std::str::FromStr for Window {
    type Err = OeemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Window::None),
            "hann" => Ok(Window::Hann),
            other => Err(OeemError::InvalidInput(format!("unknown window {other:?}"))),
        }
    }
}

/// How far to zero-pad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PadTarget {
    /// Integer multiple of the native grid density.
    Factor(usize),
    /// Total padded record length in seconds; rounded up to a whole factor.
    Length(f64),
}

impl Default for PadTarget {
    fn default() -> Self {
        PadTarget::Factor(DEFAULT_PAD_FACTOR)
    }
}

/// One-sided magnitude spectrum.
///
/// The transform runs over a buffer of 2·pad_factor·N samples, so the bin
/// spacing is native_resolution / pad_factor with native_resolution =
/// 1/(2·N·dt). Magnitudes are unnormalized DFT moduli |X_k|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub pad_factor: usize,
    /// Hz
    pub native_resolution: f64,
    /// Length of the transformed buffer.
    pub fft_len: usize,
    /// Σ|x| of the signal the spectrum was derived from; sets the absolute
    /// floor used by peak detection.
    pub reference_magnitude: f64,
}

impl Spectrum {
    pub fn spacing(&self) -> f64 {
        self.native_resolution / self.pad_factor as f64
    }

    /// Σ x² recovered from the one-sided spectrum (Parseval, unnormalized
    /// forward DFT of even length).
    pub fn parseval_energy(&self) -> f64 {
        let m = self.fft_len as f64;
        let last = self.magnitude.len() - 1;
        let sum: f64 = self
            .magnitude
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let w = if k == 0 || k == last { 1.0 } else { 2.0 };
                w * v * v
            })
            .sum();
        sum / m
    }
}

pub fn pad_factor_for(trace: &EchoTrace, target: PadTarget) -> Result<usize> {
    match target {
        PadTarget::Factor(0) => Err(OeemError::InvalidInput("pad factor must be ≥ 1".into())),
        PadTarget::Factor(k) => Ok(k),
        PadTarget::Length(seconds) => {
            if !(seconds > 0.0) {
                return Err(OeemError::InvalidInput("pad length must be positive".into()));
            }
            let native = 2.0 * trace.duration();
            Ok(((seconds / native).ceil() as usize).max(1))
        }
    }
}

/// Zero-padded DFT magnitude of a (detrended) trace.
pub fn spectrum(trace: &EchoTrace, pad: PadTarget, window: Window) -> Result<Spectrum> {
    trace.validate()?;
    let pad_factor = pad_factor_for(trace, pad)?;
    let n = trace.len();
    let dt = trace.spacing();
    let m = 2 * pad_factor * n;
    let mut buffer: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
    for (k, v) in trace.values.iter().enumerate() {
        let w = match window {
            Window::None => 1.0,
            Window::Hann if n > 1 => {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
            }
            Window::Hann => 1.0,
        };
        buffer[k] = Complex::new(v * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buffer);
    let df = 1.0 / (m as f64 * dt);
    let half = m / 2;
    Ok(Spectrum {
        freq: (0..=half).map(|k| k as f64 * df).collect(),
        magnitude: buffer[..=half].iter().map(|c| c.norm()).collect(),
        pad_factor,
        native_resolution: 1.0 / (2.0 * n as f64 * dt),
        fft_len: m,
        reference_magnitude: trace.values.iter().map(|v| v.abs()).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Hz
    pub frequency: f64,
    pub magnitude: f64,
    /// Full width at half maximum, Hz.
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakOptions {
    pub threshold_sigma: f64,
    /// Peaks must also exceed this fraction of `reference_magnitude`, which
    /// keeps rounding noise in otherwise empty spectra from registering.
    pub floor_relative: f64,
}

impl Default for PeakOptions {
    fn default() -> Self {
        PeakOptions {
            threshold_sigma: DEFAULT_THRESHOLD_SIGMA,
            floor_relative: 1e-6,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Detection threshold: median + k·1.4826·MAD, raised to the absolute floor.
pub fn detection_threshold(spec: &Spectrum, opts: &PeakOptions) -> f64 {
    let mut m = spec.magnitude.clone();
    let med = median(&mut m);
    let mut dev: Vec<f64> = spec.magnitude.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut dev);
    let robust = med + opts.threshold_sigma * MAD_TO_SIGMA * mad;
    robust.max(opts.floor_relative * spec.reference_magnitude)
}

/// Local maxima above the detection threshold, sorted by frequency, with
/// parabolic sub-bin refinement. The DC and Nyquist bins are never peaks.
pub fn find_peaks(spec: &Spectrum, opts: &PeakOptions) -> Vec<Peak> {
    let mag = &spec.magnitude;
    if mag.len() < 3 {
        return Vec::new();
    }
    let threshold = detection_threshold(spec, opts);
    let df = spec.spacing();
    let mut peaks = Vec::new();
    for k in 1..mag.len() - 1 {
        let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
        if !(b > a && b >= c && b > threshold) {
            continue;
        }
        let denom = a - 2.0 * b + c;
        let offset = if denom != 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let height = b - 0.25 * (a - c) * offset;
        peaks.push(Peak {
            frequency: (k as f64 + offset) * df,
            magnitude: height,
            width: half_max_width(mag, k, height) * df,
        });
    }
    peaks
}

fn half_max_width(mag: &[f64], k: usize, height: f64) -> f64 {
    let half = 0.5 * height;
    let mut left = k as f64;
    let mut i = k;
    while i > 0 {
        if mag[i - 1] <= half {
            let frac = (mag[i] - half) / (mag[i] - mag[i - 1]);
            left = i as f64 - frac;
            break;
        }
        i -= 1;
        left = i as f64;
    }
    let mut right = k as f64;
    let mut j = k;
    while j + 1 < mag.len() {
        if mag[j + 1] <= half {
            let frac = (mag[j] - half) / (mag[j] - mag[j + 1]);
            right = j as f64 + frac;
            break;
        }
        j += 1;
        right = j as f64;
    }
    right - left
}

/// Detrend followed by the spectrum; the peak floor refers to the trace as
/// recorded rather than to the residual.
pub fn analyze(trace: &EchoTrace, pad: PadTarget, window: Window) -> Result<(Detrended, Spectrum)> {
    let detrended = detrend(trace)?;
    let mut spec = spectrum(&detrended.residual, pad, window)?;
    spec.reference_magnitude = trace.values.iter().map(|v| v.abs()).sum();
    Ok((detrended, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{uniform_grid, EchoMode};
    use std::f64::consts::PI;

    fn trace_from(tau: Vec<f64>, f: impl Fn(f64) -> f64) -> EchoTrace {
        let values = tau.iter().map(|&t| f(t)).collect();
        EchoTrace::new(tau, values, EchoMode::Amplitude).unwrap()
    }

    /// Direct O(N·M) DFT magnitude at one frequency, independent of the FFT.
    fn dft_magnitude(trace: &EchoTrace, f: f64) -> f64 {
        let (re, im) = trace.tau.iter().zip(&trace.values).fold((0.0, 0.0), |(re, im), (t, v)| {
            let ph = -2.0 * PI * f * t;
            (re + v * ph.cos(), im + v * ph.sin())
        });
        re.hypot(im)
    }

    #[test]
    fn pure_exponential_detrends_to_nothing() {
        let tau = uniform_grid(400, 1e-6);
        let trace = trace_from(tau, |t| 0.8 * (-2.0 * t / 150e-6).exp());
        let d = detrend(&trace).unwrap();
        let rms = (d.residual.values.iter().map(|v| v * v).sum::<f64>() / 400.0).sqrt();
        assert!(rms <= 1e-6 * 0.8, "{rms}");
        assert!((d.fit.t2 / 150e-6 - 1.0).abs() < 1e-6);
        assert!((d.fit.gamma - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stretched_exponential_recovered() {
        let tau = uniform_grid(300, 2e-6);
        let trace = trace_from(tau, |t| 1.1 * stretched_exponential(t, 300e-6, 1.7));
        let d = detrend(&trace).unwrap();
        assert!((d.fit.gamma - 1.7).abs() < 1e-6);
        assert!((d.fit.amplitude - 1.1).abs() < 1e-8);
    }

    #[test]
    fn modulated_decay_leaves_the_tone() {
        let f = 40e3;
        let t2 = 400e-6;
        let tau = uniform_grid(600, 1e-6);
        let trace = trace_from(tau.clone(), |t| (-2.0 * t / t2).exp() * (1.0 + 0.3 * (2.0 * PI * f * t).cos()));
        let d = detrend(&trace).unwrap();
        // independent construction of the expected residual component
        let tone = trace_from(tau, |t| 0.3 * (-2.0 * t / t2).exp() * (2.0 * PI * f * t).cos());
        let at_tone = dft_magnitude(&d.residual, f);
        let expected = dft_magnitude(&tone, f);
        assert!((at_tone / expected - 1.0).abs() < 0.05, "{at_tone} vs {expected}");
        // the tone dominates everything away from it
        let spec = spectrum(&d.residual, PadTarget::Factor(4), Window::None).unwrap();
        let (kmax, _) = spec
            .magnitude
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!((spec.freq[kmax] - f).abs() <= spec.native_resolution);
    }

    #[test]
    fn zero_trace_is_a_fit_failure() {
        let trace = trace_from(uniform_grid(50, 1e-6), |_| 0.0);
        assert!(matches!(detrend(&trace), Err(OeemError::FitFailure(_))));
        let short = trace_from(uniform_grid(5, 1e-6), |t| (-t).exp());
        assert!(matches!(detrend(&short), Err(OeemError::InsufficientData { .. })));
    }

    #[test]
    fn sinusoid_peak_location_and_padding() {
        let n = 512;
        let dt = 1e-6;
        let f = 61.3e3;
        let trace = trace_from(uniform_grid(n, dt), |t| (2.0 * PI * f * t).sin());
        let duration = n as f64 * dt;
        let mut locations = Vec::new();
        for pad in [1, 2, 4, 8] {
            let spec = spectrum(&trace, PadTarget::Factor(pad), Window::None).unwrap();
            assert!((spec.spacing() - 1.0 / (2.0 * duration * pad as f64)).abs() < 1e-9 * spec.spacing());
            let (k, _) = spec
                .magnitude
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            assert!((spec.freq[k] - f).abs() <= spec.spacing());
            let peaks = find_peaks(&spec, &PeakOptions::default());
            let top = peaks.iter().max_by(|a, b| a.magnitude.total_cmp(&b.magnitude)).unwrap();
            assert!((top.frequency - f).abs() <= 1.0 / (2.0 * duration * pad as f64));
            locations.push(top.frequency);
        }
        for l in &locations {
            assert!((l - locations[0]).abs() <= 1.0 / (2.0 * duration));
        }
        let s1 = spectrum(&trace, PadTarget::Factor(1), Window::None).unwrap();
        let s8 = spectrum(&trace, PadTarget::Factor(8), Window::None).unwrap();
        assert_eq!(s8.freq.len() - 1, 8 * (s1.freq.len() - 1));
    }

    #[test]
    fn decayed_sinusoid_gives_exactly_one_peak() {
        let n = 512;
        let dt = 1e-6;
        let f = 61.3e3;
        let decay = n as f64 * dt / 14.0;
        let trace = trace_from(uniform_grid(n, dt), |t| (2.0 * PI * f * t).sin() * (-t / decay).exp());
        for pad in [1, 2, 4, 8] {
            let spec = spectrum(&trace, PadTarget::Factor(pad), Window::None).unwrap();
            let peaks = find_peaks(&spec, &PeakOptions::default());
            assert_eq!(peaks.len(), 1, "pad {pad}: {peaks:?}");
            assert!((peaks[0].frequency - f).abs() < 1e3);
        }
    }

    #[test]
    fn pad_length_target_rounds_up() {
        let trace = trace_from(uniform_grid(100, 1e-6), |t| t);
        // native length 2 * 100 µs; 1.5 ms needs a factor of 8
        assert_eq!(pad_factor_for(&trace, PadTarget::Length(1.5e-3)).unwrap(), 8);
        assert!(pad_factor_for(&trace, PadTarget::Factor(0)).is_err());
    }

    #[test]
    fn parseval() {
        let trace = trace_from(uniform_grid(333, 1e-6), |t| (2.0 * PI * 2e4 * t).cos() * (-t / 1e-4).exp() + 0.1);
        let spec = spectrum(&trace, PadTarget::Factor(1), Window::None).unwrap();
        let energy: f64 = trace.values.iter().map(|v| v * v).sum();
        assert!((spec.parseval_energy() / energy - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_spectrum_has_no_peaks() {
        let trace = trace_from(uniform_grid(64, 1e-6), |_| 0.0);
        let spec = spectrum(&trace, PadTarget::Factor(2), Window::None).unwrap();
        assert!(find_peaks(&spec, &PeakOptions::default()).is_empty());
    }

    #[test]
    fn two_close_tones_resolved() {
        let n = 1000;
        let dt = 1e-6;
        // native bin 1/(2 N dt)
        let bin = 1.0 / (2.0 * n as f64 * dt);
        let (f1, f2) = (100e3, 100e3 + 3.0 * bin);
        let trace = trace_from(uniform_grid(n, dt), |t| {
            let decay = (-t / 2e-3).exp();
            decay * ((2.0 * PI * f1 * t).cos() + (2.0 * PI * f2 * t).cos())
        });
        let spec = spectrum(&trace, PadTarget::Factor(8), Window::None).unwrap();
        let peaks = find_peaks(&spec, &PeakOptions::default());
        let near: Vec<_> = peaks.iter().filter(|p| p.frequency > f1 - bin && p.frequency < f2 + bin).collect();
        assert_eq!(near.len(), 2, "{peaks:?}");
        assert!((near[0].frequency - f1).abs() <= bin);
        assert!((near[1].frequency - f2).abs() <= bin);
    }
}
