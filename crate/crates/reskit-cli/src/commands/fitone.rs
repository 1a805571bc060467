//! `reskit fitone`: runs the staged pipeline on one trace CSV. A fit that
//! finished without converging is still a result (`converged: false`), so
//! the exit code stays 0; only precondition violations and numerical
//! failures are errors.

use crate::commands::emit_report;
use crate::errors::{from_pipe, CliError};
use crate::traceio::read_trace_csv;
use reskit::respipe::{full_pipeline, PipelineConfig};
use reskit::sigmodel::{FrequencySweep, SweepDirection};
use std::path::Path;

pub fn run(
    trace: &Path,
    power_dbm: f64,
    tau_s: Option<f64>,
    atten_db: f64,
    temp_k: f64,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let (freqs_hz, s21) = read_trace_csv(trace)?;
    let sweep = FrequencySweep {
        freqs_hz,
        s21,
        source_power_dbm: power_dbm,
        attenuation_db: atten_db,
        temperature_k: temp_k,
        sweep_direction: SweepDirection::Up,
    };
    let config = PipelineConfig {
        tau_override_s: tau_s,
        ..PipelineConfig::default()
    };
    let result =
        full_pipeline(&sweep, &config).map_err(|e| from_pipe(e, &trace.display().to_string()))?;
    if !result.fit.converged {
        log::warn!("{}: fit did not converge", trace.display());
    }
    emit_report(&result, output)
}
