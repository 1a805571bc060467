//! Configuration and manifest types. All files are JSON; defaults follow
//! the documented measurement context (-75 dB attenuation, 15 mK, 50 Ω).

use crate::errors::CliError;
use reskit::kinetic::EndType;
use reskit::sigmodel::{GridSpec, ResonatorParams, SweepDirection};
use reskit::xrd::{Background, PseudoVoigtPeak};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_atten_db() -> f64 {
    -75.0
}
fn default_temperature_k() -> f64 {
    0.015
}
fn default_impedance_ohm() -> f64 {
    50.0
}

/// Measurement context shared by every trace of a sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SharedSettings {
    #[serde(default = "default_atten_db")]
    pub attenuation_db: f64,
    #[serde(default = "default_temperature_k")]
    pub temperature_k: f64,
    #[serde(default = "default_impedance_ohm")]
    pub z0_ohm: f64,
    #[serde(default = "default_impedance_ohm")]
    pub zr_ohm: f64,
}

impl Default for SharedSettings {
    fn default() -> Self {
        Self {
            attenuation_db: default_atten_db(),
            temperature_k: default_temperature_k(),
            z0_ohm: default_impedance_ohm(),
            zr_ohm: default_impedance_ohm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Lm,
    Control,
}

/// Device metadata carried through to kinetic-fraction grouping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonatorMeta {
    pub end_type: EndType,
    pub category: Category,
    pub width_um: f64,
    pub f_design_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trace_path: String,
    pub source_power_dbm: f64,
    pub sweep_direction: SweepDirection,
}

/// Input manifest for `sweep` and `nonlin`: one trace per power plus the
/// shared measurement context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub shared: SharedSettings,
    #[serde(default)]
    pub resonator_meta: Option<ResonatorMeta>,
}

impl SweepManifest {
    /// Loads and validates a manifest. Trace paths are resolved relative to
    /// the manifest's directory; they must exist, powers must be distinct,
    /// and the attenuation must be nonpositive.
    pub fn load(path: &Path) -> Result<(Self, Vec<PathBuf>), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let manifest: SweepManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if manifest.entries.is_empty() {
            return Err(CliError::input("manifest has no entries"));
        }
        if manifest.shared.attenuation_db > 0.0 {
            return Err(CliError::Input(format!(
                "attenuation_db must be nonpositive, got {}",
                manifest.shared.attenuation_db
            )));
        }
        let mut powers: Vec<f64> = manifest.entries.iter().map(|e| e.source_power_dbm).collect();
        powers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if powers.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::input("duplicate source_power_dbm entries in manifest"));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut resolved = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let p = base.join(&entry.trace_path);
            if !p.is_file() {
                return Err(CliError::Input(format!(
                    "trace file not found: {}",
                    p.display()
                )));
            }
            resolved.push(p);
        }
        Ok((manifest, resolved))
    }
}

/// One trace to synthesize. `a_n0` overrides `params.beta` when given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTraceSpec {
    pub params: ResonatorParams,
    #[serde(default)]
    pub a_n0: Option<f64>,
    pub grid: GridSpec,
    #[serde(default)]
    pub noise_sigma: f64,
    pub source_power_dbm: f64,
    #[serde(default = "default_direction")]
    pub sweep_direction: SweepDirection,
}

fn default_direction() -> SweepDirection {
    SweepDirection::Up
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub traces: Vec<SynthTraceSpec>,
    #[serde(default)]
    pub shared: SharedSettings,
    #[serde(default)]
    pub resonator_meta: Option<ResonatorMeta>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let config: SynthConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if config.traces.is_empty() {
            return Err(CliError::input("synth config has no traces"));
        }
        for (i, t) in config.traces.iter().enumerate() {
            if t.grid.points < 2 {
                return Err(CliError::Input(format!(
                    "trace {i}: grid needs at least 2 points, got {}",
                    t.grid.points
                )));
            }
            if t.noise_sigma < 0.0 {
                return Err(CliError::Input(format!("trace {i}: negative noise_sigma")));
            }
        }
        Ok(config)
    }
}

/// One peak to fit plus the lattice interpretation of its position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XrdPeakSpec {
    pub label: String,
    pub guess: PseudoVoigtPeak,
    /// Fit window [lo, hi] in degrees 2θ.
    pub window_deg: (f64, f64),
    pub lambda_nm: f64,
    #[serde(default = "default_order")]
    pub order: u32,
    /// 00l index for the c-lattice parameter (1, 2, or 4).
    #[serde(default)]
    pub l_index: Option<u32>,
    /// Bulk spacing for out-of-plane strain.
    #[serde(default)]
    pub d_bulk_nm: Option<f64>,
}

fn default_order() -> u32 {
    1
}

fn default_background() -> Background {
    Background::Constant
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XrdConfig {
    #[serde(default = "default_background")]
    pub background: Background,
    pub peaks: Vec<XrdPeakSpec>,
}

impl XrdConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let config: XrdConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if config.peaks.is_empty() {
            return Err(CliError::input("xrd config has no peaks"));
        }
        Ok(config)
    }
}
