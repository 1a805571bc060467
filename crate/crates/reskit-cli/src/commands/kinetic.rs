//! `reskit kinetic`: kinetic-inductance fraction analysis. Input is a CSV
//! with header `width_um,f_meas_hz,f_design_hz,end_type` (end_type `open`
//! or `short`); output is one 1/alpha_L-vs-width OLS fit per end type.

use crate::commands::emit_report;
use crate::errors::{from_kinetic, CliError};
use reskit::kinetic::{fit_inverse_alpha_vs_width, EndType, WidthFrequencyPoint};
use std::path::Path;

const HEADER: &str = "width_um,f_meas_hz,f_design_hz,end_type";

fn read_points(path: &Path) -> Result<Vec<WidthFrequencyPoint>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let at = |line: usize, msg: String| CliError::Input(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(at(1, "empty file, expected header".to_string()));
    };
    if header.trim_end_matches('\r') != HEADER {
        return Err(at(1, format!("expected header `{HEADER}`, got `{header}`")));
    }
    let mut points = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(at(line_no, format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |k: usize, name: &str| -> Result<f64, CliError> {
            let v: f64 = fields[k]
                .trim()
                .parse()
                .map_err(|_| at(line_no, format!("cannot parse {name} from `{}`", fields[k])))?;
            if !v.is_finite() {
                return Err(at(line_no, format!("{name} is not finite")));
            }
            Ok(v)
        };
        let end_type = match fields[3].trim() {
            "open" => EndType::Open,
            "short" => EndType::Short,
            other => {
                return Err(at(
                    line_no,
                    format!("end_type must be `open` or `short`, got `{other}`"),
                ))
            }
        };
        points.push(WidthFrequencyPoint {
            width_um: num(0, "width_um")?,
            f_meas_hz: num(1, "f_meas_hz")?,
            f_design_hz: num(2, "f_design_hz")?,
            end_type,
        });
    }
    if points.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    Ok(points)
}

pub fn run(points_path: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let points = read_points(points_path)?;
    let fits = fit_inverse_alpha_vs_width(&points)
        .map_err(|e| from_kinetic(e, &points_path.display().to_string()))?;
    emit_report(&fits, output)
}
