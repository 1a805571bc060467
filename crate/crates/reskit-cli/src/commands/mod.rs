pub mod fitone;
pub mod kinetic;
pub mod nonlin;
pub mod sweep;
pub mod synth;
pub mod xrd;

use crate::errors::CliError;
use crate::jsonio::{canonical_json, write_atomic};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Writes a report as canonical JSON: atomically to `output` when given,
/// otherwise to stdout.
pub fn emit_report<T: Serialize>(value: &T, output: Option<&Path>) -> Result<(), CliError> {
    let text = canonical_json(value)
        .map_err(|e| CliError::Internal(format!("report serialization: {e}")))?;
    match output {
        Some(path) => write_atomic(path, text.as_bytes())
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| CliError::Internal(format!("stdout: {e}")))
        }
    }
}
