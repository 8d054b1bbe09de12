//! Simulation and analysis of optical echo envelope modulation from nuclear
//! spins around an anisotropic electronic spin.
//!
//! The pipeline runs from first-principles couplings ([`spinmodel`]) through
//! synthetic echo traces ([`modulation`]) and their spectra ([`spectral`]) to
//! field-dependent line fits ([`fitting`]), bias-field optimization
//! ([`prominence`]) and field sweeps ([`sweep`]).

pub mod crystal;
pub mod error;
pub mod fitting;
pub mod io;
pub mod modulation;
pub mod optim;
pub mod prominence;
pub mod spectral;
pub mod spinmodel;
pub mod sweep;

pub use error::{OeemError, Result};
