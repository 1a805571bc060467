//! `reskit synth`: generates trace CSVs plus a manifest ready for `sweep`
//! or `nonlin`. Trace i uses RNG seed `base_seed + i`, so the same config
//! and seed always reproduce the same bytes.

use crate::config::{ManifestEntry, SweepManifest, SynthConfig};
use crate::errors::{from_model, CliError};
use crate::jsonio::{canonical_json, write_atomic};
use crate::traceio::trace_csv_bytes;
use reskit::sigmodel::synth_trace;
use std::path::Path;

pub fn run(config_path: &Path, out_dir: &Path, base_seed: u64) -> Result<(), CliError> {
    let config = SynthConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut entries = Vec::with_capacity(config.traces.len());
    for (i, spec) in config.traces.iter().enumerate() {
        let mut params = spec.params;
        if let Some(a_n0) = spec.a_n0 {
            params.beta = params.beta_for_a_n0(a_n0);
        }
        let sweep = synth_trace(
            &params,
            spec.grid,
            spec.noise_sigma,
            base_seed.wrapping_add(i as u64),
            spec.sweep_direction,
        )
        .map_err(|e| from_model(e, &format!("trace {i}")))?;
        let name = format!("trace_{i:03}.csv");
        let path = out_dir.join(&name);
        write_atomic(&path, &trace_csv_bytes(&sweep.freqs_hz, &sweep.s21))
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        log::info!("wrote {} ({} points)", path.display(), sweep.freqs_hz.len());
        entries.push(ManifestEntry {
            trace_path: name,
            source_power_dbm: spec.source_power_dbm,
            sweep_direction: spec.sweep_direction,
        });
    }

    let manifest = SweepManifest {
        entries,
        shared: config.shared,
        resonator_meta: config.resonator_meta.clone(),
    };
    let text = canonical_json(&manifest)
        .map_err(|e| CliError::Internal(format!("manifest serialization: {e}")))?;
    let manifest_path = out_dir.join("manifest.json");
    write_atomic(&manifest_path, text.as_bytes())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", manifest_path.display())))?;
    Ok(())
}
