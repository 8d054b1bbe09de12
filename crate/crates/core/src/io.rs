//! CSV and report files. Every table has a fixed header; writes go through a
//! temporary file in the target directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crystal::{MagneticClass, YttriumSite};
use crate::error::{OeemError, Result};
use crate::fitting::{LinePoint, LinePositionSeries};
use crate::modulation::{EchoMode, EchoTrace, ModulationParams};
use crate::prominence::ProminenceResult;
use crate::spectral::{Peak, Spectrum};
use crate::sweep::{Component, LineMap, LineMapRow, SweepPoint};

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| OeemError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| OeemError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| OeemError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| OeemError::io(path, e))?;
    tmp.persist(path).map_err(|e| OeemError::io(path, e.error))?;
    Ok(())
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| OeemError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes a header-only file when `records` is empty.
pub fn write_records_with_header<T: Serialize>(path: &Path, header: &[&str], records: &[T]) -> Result<()> {
    if records.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        let bytes = w
            .into_inner()
            .map_err(|e| OeemError::io(path, e.into_error()))?;
        return write_atomic(path, &bytes);
    }
    write_records(path, records)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| OeemError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    r.deserialize().map(|rec| rec.map_err(OeemError::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tau_s: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub freq_hz: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub freq_hz: f64,
    pub magnitude: f64,
    pub width_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub b_tesla: f64,
    pub freq_hz: f64,
    pub freq_err_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineMapRecord {
    pub site: String,
    pub class: MagneticClass,
    pub component: Component,
    pub b_tesla: f64,
    pub freq_hz: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepMapRecord {
    pub b_tesla: f64,
    pub freq_hz: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProminenceRecord {
    pub site: String,
    pub lambda_max: f64,
    pub b_d1: f64,
    pub b_d2: f64,
    pub b_b: f64,
    pub rho_best: f64,
}

/// One bar of the per-site maximum-prominence chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProminenceBarRecord {
    pub site: String,
    pub distance_angstrom: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: String,
    pub d1_angstrom: f64,
    pub d2_angstrom: f64,
    pub b_angstrom: f64,
    pub distance_angstrom: f64,
}

impl From<&YttriumSite> for SiteRecord {
    fn from(s: &YttriumSite) -> Self {
        SiteRecord {
            site: s.label.clone(),
            d1_angstrom: s.position.x,
            d2_angstrom: s.position.y,
            b_angstrom: s.position.z,
            distance_angstrom: s.distance,
        }
    }
}

/// Sidecar metadata stored next to a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub mode: EchoMode,
    pub noise_sigma: f64,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModulationParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_tesla: Option<[f64; 3]>,
}

/// `trace.csv` → `trace.csv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_trace(path: &Path, trace: &EchoTrace, meta: &TraceMeta) -> Result<()> {
    let records: Vec<TraceRecord> = trace
        .tau
        .iter()
        .zip(&trace.values)
        .map(|(&tau_s, &value)| TraceRecord { tau_s, value })
        .collect();
    write_records(path, &records)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| OeemError::InvalidInput(format!("metadata: {e}")))?;
    write_atomic(&sidecar_path(path), json.as_bytes())
}

/// Reads a trace CSV; the sidecar is optional and only sets the mode and
/// noise bookkeeping.
pub fn read_trace(path: &Path) -> Result<(EchoTrace, Option<TraceMeta>)> {
    let records: Vec<TraceRecord> = read_records(path)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| OeemError::io(&side, e))?;
        Some(
            serde_json::from_str::<TraceMeta>(&text)
                .map_err(|e| OeemError::Config(format!("{}: {e}", side.display())))?,
        )
    } else {
        None
    };
    let mode = meta.as_ref().map(|m| m.mode).unwrap_or_default();
    let mut trace = EchoTrace::new(
        records.iter().map(|r| r.tau_s).collect(),
        records.iter().map(|r| r.value).collect(),
        mode,
    )?;
    if let Some(m) = &meta {
        trace.noise_sigma = m.noise_sigma;
        trace.rng_seed = m.rng_seed;
    }
    Ok((trace, meta))
}

/// Column mapping for traces recorded elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceAdapter {
    pub time_column: String,
    pub value_column: String,
    /// Multiplies the time column to give seconds.
    pub time_scale: f64,
    pub value_scale: f64,
    pub delimiter: char,
    /// Lines skipped before the header.
    pub skip_lines: usize,
    pub mode: EchoMode,
}

impl Default for TraceAdapter {
    fn default() -> Self {
        TraceAdapter {
            time_column: "tau_s".into(),
            value_column: "value".into(),
            time_scale: 1.0,
            value_scale: 1.0,
            delimiter: ',',
            skip_lines: 0,
            mode: EchoMode::Amplitude,
        }
    }
}

impl TraceAdapter {
    pub fn read(&self, path: &Path) -> Result<EchoTrace> {
        if !self.delimiter.is_ascii() {
            return Err(OeemError::Config("delimiter must be an ASCII character".into()));
        }
        let text = fs::read_to_string(path).map_err(|e| OeemError::io(path, e))?;
        let body: String = text
            .lines()
            .skip(self.skip_lines)
            .collect::<Vec<_>>()
            .join("\n");
        let mut r = csv::ReaderBuilder::new()
            .delimiter(self.delimiter as u8)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(body.as_bytes());
        let headers = r.headers()?.clone();
        let column = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                OeemError::Config(format!("{}: no column '{name}'", path.display()))
            })
        };
        let (it, iv) = (column(&self.time_column)?, column(&self.value_column)?);
        let mut tau = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or("");
                s.parse::<f64>().map_err(|_| {
                    OeemError::InvalidInput(format!("{}: cannot parse '{s}' as a number", path.display()))
                })
            };
            tau.push(parse(it)? * self.time_scale);
            values.push(parse(iv)? * self.value_scale);
        }
        EchoTrace::new(tau, values, self.mode)
    }
}

pub fn write_spectrum(path: &Path, spec: &Spectrum) -> Result<()> {
    let records: Vec<SpectrumRecord> = spec
        .freq
        .iter()
        .zip(&spec.magnitude)
        .map(|(&freq_hz, &magnitude)| SpectrumRecord { freq_hz, magnitude })
        .collect();
    write_records(path, &records)
}

pub fn read_spectrum(path: &Path) -> Result<Vec<SpectrumRecord>> {
    read_records(path)
}

pub fn write_peaks(path: &Path, peaks: &[Peak]) -> Result<()> {
    let records: Vec<PeakRecord> = peaks
        .iter()
        .map(|p| PeakRecord {
            freq_hz: p.frequency,
            magnitude: p.magnitude,
            width_hz: p.width,
        })
        .collect();
    write_records_with_header(path, &["freq_hz", "magnitude", "width_hz"], &records)
}

pub fn read_peaks(path: &Path) -> Result<Vec<Peak>> {
    Ok(read_records::<PeakRecord>(path)?
        .into_iter()
        .map(|r| Peak {
            frequency: r.freq_hz,
            magnitude: r.magnitude,
            width: r.width_hz,
        })
        .collect())
}

pub fn write_series(path: &Path, series: &LinePositionSeries) -> Result<()> {
    let records: Vec<SeriesRecord> = series
        .points
        .iter()
        .map(|p| SeriesRecord {
            b_tesla: p.b,
            freq_hz: p.freq,
            freq_err_hz: p.freq_err,
        })
        .collect();
    write_records_with_header(path, &["b_tesla", "freq_hz", "freq_err_hz"], &records)
}

/// Reads a series; the label defaults to the file stem.
pub fn read_series(path: &Path) -> Result<LinePositionSeries> {
    let points = read_records::<SeriesRecord>(path)?
        .into_iter()
        .map(|r| LinePoint {
            b: r.b_tesla,
            freq: r.freq_hz,
            freq_err: r.freq_err_hz,
        })
        .collect();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LinePositionSeries::new(label, points))
}

pub fn write_linemap(path: &Path, map: &LineMap) -> Result<()> {
    let records: Vec<LineMapRecord> = map
        .rows
        .iter()
        .map(|r| LineMapRecord {
            site: r.site.clone(),
            class: r.class,
            component: r.component,
            b_tesla: r.b,
            freq_hz: r.freq,
            rho: r.rho,
        })
        .collect();
    write_records(path, &records)
}

/// Reads a line map; intensities are recomputed from `rho_sat`.
pub fn read_linemap(path: &Path, rho_sat: f64) -> Result<LineMap> {
    let rows = read_records::<LineMapRecord>(path)?
        .into_iter()
        .map(|r| LineMapRow {
            site: r.site,
            class: r.class,
            component: r.component,
            b: r.b_tesla,
            freq: r.freq_hz,
            rho: r.rho,
            intensity: (r.rho / rho_sat).min(1.0),
        })
        .collect();
    Ok(LineMap { rows })
}

pub fn write_sweep_map(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let records: Vec<SweepMapRecord> = points
        .iter()
        .flat_map(|p| {
            p.spectrum
                .freq
                .iter()
                .zip(&p.spectrum.magnitude)
                .map(move |(&freq_hz, &magnitude)| SweepMapRecord {
                    b_tesla: p.b,
                    freq_hz,
                    magnitude,
                })
        })
        .collect();
    write_records(path, &records)
}

pub fn read_sweep_map(path: &Path) -> Result<Vec<SweepMapRecord>> {
    read_records(path)
}

pub fn prominence_record(r: &ProminenceResult) -> ProminenceRecord {
    ProminenceRecord {
        site: r.site_label.clone(),
        lambda_max: r.lambda,
        b_d1: r.best_field.x,
        b_d2: r.best_field.y,
        b_b: r.best_field.z,
        rho_best: r.rho_at_best,
    }
}

pub fn write_prominence(path: &Path, results: &[ProminenceResult]) -> Result<()> {
    let records: Vec<ProminenceRecord> = results.iter().map(prominence_record).collect();
    write_records(path, &records)
}

pub fn read_prominence(path: &Path) -> Result<Vec<ProminenceRecord>> {
    read_records(path)
}

/// Writes `value` as a TOML report.
pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| OeemError::InvalidInput(format!("report serialization: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OeemError::io(path, e))?;
    toml::from_str(&text).map_err(|e| OeemError::Config(format!("{}: {e}", path.display())))
}
