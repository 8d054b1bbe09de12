//! Run configuration: a TOML file whose values are overridden by flags.

use std::path::{Path, PathBuf};

use oeem_core::crystal::{default_site_catalog, load_site_catalog, PhysicalConstants, YttriumSite};
use oeem_core::io::TraceAdapter;
use oeem_core::spinmodel::{GTensorConfig, GTensorPair, SpinModel, DEFAULT_ZERO_FIELD_THRESHOLD};
use oeem_core::{OeemError, Result};
use serde::Deserialize;

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUTPUT_DIR: &str = "oeem-out";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsOverride {
    pub g_y: Option<f64>,
    pub zero_field_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub g_tensor_file: Option<PathBuf>,
    pub g_tensor_variant: Option<String>,
    pub site_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub constants: ConstantsOverride,
    pub adapter: Option<TraceAdapter>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OeemError::io(path, e))?;
        toml::from_str(&text).map_err(|e| OeemError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: SpinModel,
    pub sites: Vec<YttriumSite>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub adapter: Option<TraceAdapter>,
}

pub struct Overrides {
    pub config: Option<PathBuf>,
    pub g_tensor_file: Option<PathBuf>,
    pub g_tensor_variant: Option<String>,
    pub site_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub g_y: Option<f64>,
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(OeemError::Config(format!("{what} '{}' does not exist", path.display())))
    }
}

impl RunConfig {
    pub fn resolve(o: Overrides) -> Result<Self> {
        let file = match &o.config {
            Some(p) => {
                must_exist(p, "config file")?;
                RunConfigFile::load(p)?
            }
            None => RunConfigFile::default(),
        };
        let g_file = o.g_tensor_file.or(file.g_tensor_file);
        let variant = o.g_tensor_variant.or(file.g_tensor_variant);
        let g_pair: GTensorPair = match &g_file {
            Some(p) => {
                must_exist(p, "g-tensor file")?;
                GTensorConfig::load(p)?.select(variant.as_deref())?.clone()
            }
            None if variant.is_some() => {
                return Err(OeemError::Config("a g-tensor variant needs a g-tensor file".into()))
            }
            None => GTensorPair::er_yso_site1(),
        };
        let site_file = o.site_file.or(file.site_file);
        let sites = match &site_file {
            Some(p) => {
                must_exist(p, "site file")?;
                load_site_catalog(p)?
            }
            None => default_site_catalog(),
        };
        let mut constants = PhysicalConstants::default();
        if let Some(g_y) = o.g_y.or(file.constants.g_y) {
            constants.g_y = g_y;
        }
        constants.validate()?;
        let threshold = file
            .constants
            .zero_field_threshold
            .unwrap_or(DEFAULT_ZERO_FIELD_THRESHOLD);
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(OeemError::Config("zero_field_threshold must be positive".into()));
        }
        Ok(RunConfig {
            model: SpinModel::new(constants, g_pair).with_threshold(threshold),
            sites,
            output_dir: o
                .output_dir
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            seed: o.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            adapter: file.adapter,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
