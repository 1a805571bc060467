//! `reskit nonlin`: per-trace kinetic-inductance nonlinearity extraction
//! (E*, a_n0) with parametric-bootstrap confidence intervals, plus a
//! CI-weighted aggregate E*. A trace that turns out linear is reported as a
//! per-trace error, not a command failure. `--iterations 0` skips the
//! bootstrap and reports point estimates with null intervals.

use crate::commands::emit_report;
use crate::config::{SharedSettings, SweepManifest};
use crate::errors::{from_nonlin, from_pipe, CliError};
use crate::traceio::read_trace_csv;
use reskit::nonlin::{
    analyze_nonlin, extract_scaling_energy, freq_shift, nonlinearity_parameter, stored_energy,
    weighted_e_star, BootstrapOptions, NonlinError,
};
use reskit::respipe::{full_pipeline, remove_delay, PipelineConfig};
use reskit::sigmodel::FrequencySweep;
use sha2::{Digest, Sha256};
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct TraceNonlin {
    pub trace_path: String,
    pub source_power_dbm: f64,
    pub e_star_j: f64,
    /// Null when the bootstrap was skipped.
    pub e_star_ci95_j: Option<(f64, f64)>,
    pub e_star_photons: f64,
    pub a_n0: f64,
    pub a_n0_ci95: Option<(f64, f64)>,
    pub bootstrap_iterations: usize,
    pub fit_converged: bool,
}

#[derive(Debug, Serialize)]
pub struct TraceOutcome {
    pub trace_path: String,
    pub result: Option<TraceNonlin>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub e_star_j: f64,
    /// "ci_weighted" over 1/(CI width)², or "mean" when there are no CIs.
    pub method: String,
    pub traces_used: usize,
    pub traces_excluded: usize,
}

#[derive(Debug, Serialize)]
pub struct NonlinReport {
    pub provenance: super::sweep::Provenance,
    pub shared: SharedSettings,
    pub traces: Vec<TraceOutcome>,
    pub aggregate: Option<Aggregate>,
}

fn analyze_one(
    path: &Path,
    entry_power_dbm: f64,
    direction: reskit::sigmodel::SweepDirection,
    shared: &SharedSettings,
    iterations: usize,
    seed: u64,
) -> Result<TraceNonlin, CliError> {
    let (freqs_hz, s21) = read_trace_csv(path)?;
    let sweep = FrequencySweep {
        freqs_hz,
        s21,
        source_power_dbm: entry_power_dbm,
        attenuation_db: shared.attenuation_db,
        temperature_k: shared.temperature_k,
        sweep_direction: direction,
    };
    let pipe = full_pipeline(&sweep, &PipelineConfig::default())
        .map_err(|e| from_pipe(e, &path.display().to_string()))?;
    let fit = pipe.fit;
    let z = remove_delay(&sweep, fit.tau_s);
    let p_g_w = sweep.generator_power_w();
    let ctx = path.display().to_string();

    if iterations == 0 {
        let shifts = freq_shift(&fit, &z);
        let energies = stored_energy(&fit, p_g_w, &sweep.freqs_hz, &z);
        let scaling =
            extract_scaling_energy(&energies, &shifts).map_err(|e| from_nonlin(e, &ctx))?;
        let a_n0 = nonlinearity_parameter(
            fit.q_l.value,
            fit.q_c.value,
            fit.f_r0_hz.value,
            p_g_w,
            scaling.e_star_j,
        )
        .map_err(|e| from_nonlin(e, &ctx))?;
        let omega = std::f64::consts::TAU * fit.f_r0_hz.value;
        return Ok(TraceNonlin {
            trace_path: ctx,
            source_power_dbm: entry_power_dbm,
            e_star_j: scaling.e_star_j,
            e_star_ci95_j: None,
            e_star_photons: scaling.e_star_j / (reskit::phys::HBAR * omega),
            a_n0,
            a_n0_ci95: None,
            bootstrap_iterations: 0,
            fit_converged: fit.converged,
        });
    }

    let options = BootstrapOptions {
        iterations,
        seed,
        use_covariance: false,
    };
    let ext = analyze_nonlin(&fit, p_g_w, &sweep.freqs_hz, &z, &options)
        .map_err(|e| from_nonlin(e, &ctx))?;
    Ok(TraceNonlin {
        trace_path: ctx,
        source_power_dbm: entry_power_dbm,
        e_star_j: ext.e_star_j,
        e_star_ci95_j: Some(ext.e_star_ci95_j),
        e_star_photons: ext.e_star_photons,
        a_n0: ext.a_n0,
        a_n0_ci95: Some(ext.a_n0_ci95),
        bootstrap_iterations: ext.bootstrap_iterations,
        fit_converged: fit.converged,
    })
}

pub fn run(
    manifest_path: &Path,
    seed: u64,
    iterations: usize,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let (manifest, paths) = SweepManifest::load(manifest_path)?;
    let manifest_bytes = std::fs::read(manifest_path)?;
    let config_sha256 = Sha256::digest(&manifest_bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let mut traces = Vec::with_capacity(manifest.entries.len());
    for (entry, path) in manifest.entries.iter().zip(&paths) {
        match analyze_one(
            path,
            entry.source_power_dbm,
            entry.sweep_direction,
            &manifest.shared,
            iterations,
            seed,
        ) {
            Ok(t) => traces.push(TraceOutcome {
                trace_path: entry.trace_path.clone(),
                result: Some(t),
                error: None,
            }),
            // internal numerical failures abort; data-level problems (a
            // linear trace, unreadable CSV) are reported per trace
            Err(e @ CliError::Internal(_)) => return Err(e),
            Err(CliError::Input(msg)) => {
                log::warn!("{}: {msg}", entry.trace_path);
                traces.push(TraceOutcome {
                    trace_path: entry.trace_path.clone(),
                    result: None,
                    error: Some(msg),
                });
            }
        }
    }

    let ok: Vec<&TraceNonlin> = traces.iter().filter_map(|t| t.result.as_ref()).collect();
    let aggregate = if ok.len() < 2 {
        None
    } else if iterations == 0 {
        let mean = ok.iter().map(|t| t.e_star_j).sum::<f64>() / ok.len() as f64;
        Some(Aggregate {
            e_star_j: mean,
            method: "mean".to_string(),
            traces_used: ok.len(),
            traces_excluded: 0,
        })
    } else {
        let values: Vec<f64> = ok.iter().map(|t| t.e_star_j).collect();
        let widths: Vec<f64> = ok
            .iter()
            .map(|t| t.e_star_ci95_j.map_or(0.0, |(lo, hi)| hi - lo))
            .collect();
        match weighted_e_star(&values, &widths) {
            Ok((mean, excluded)) => Some(Aggregate {
                e_star_j: mean,
                method: "ci_weighted".to_string(),
                traces_used: values.len() - excluded,
                traces_excluded: excluded,
            }),
            Err(NonlinError::NothingUsable) => None,
            Err(e) => return Err(from_nonlin(e, "aggregate")),
        }
    };

    let report = NonlinReport {
        provenance: super::sweep::Provenance {
            config_sha256,
            seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        shared: manifest.shared,
        traces,
        aggregate,
    };
    emit_report(&report, output)
}
