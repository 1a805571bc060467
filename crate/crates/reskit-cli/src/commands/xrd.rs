//! `reskit xrd`: pseudo-Voigt peak fits on a diffractogram CSV (header
//! `two_theta_deg,counts`) followed by Bragg spacing, c-lattice parameter,
//! and out-of-plane strain where the config provides the reflection index
//! and bulk spacing.

use crate::commands::emit_report;
use crate::config::XrdConfig;
use crate::errors::{from_xrd, CliError};
use reskit::xrd::{bragg_spacing, c_lattice, fit_peaks, out_of_plane_strain, FittedPeak, PeakInit};
use serde::Serialize;
use std::path::Path;

const HEADER: &str = "two_theta_deg,counts";

#[derive(Debug, Serialize)]
pub struct PeakReport {
    pub label: String,
    pub fit: FittedPeak,
    pub lambda_nm: f64,
    pub d_hkl_nm: f64,
    pub c_nm: Option<f64>,
    pub strain_zz: Option<f64>,
}

fn read_diffractogram(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
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
    let mut two_theta = Vec::new();
    let mut counts = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(at(line_no, format!("expected 2 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 2];
        for (k, name) in ["two_theta_deg", "counts"].iter().enumerate() {
            vals[k] = fields[k]
                .trim()
                .parse()
                .map_err(|_| at(line_no, format!("cannot parse {name} from `{}`", fields[k])))?;
            if !vals[k].is_finite() {
                return Err(at(line_no, format!("{name} is not finite")));
            }
        }
        if let Some(prev) = two_theta.last() {
            if vals[0] <= *prev {
                return Err(at(
                    line_no,
                    format!(
                        "two_theta_deg must be strictly ascending ({} after {prev})",
                        vals[0]
                    ),
                ));
            }
        }
        two_theta.push(vals[0]);
        counts.push(vals[1]);
    }
    if two_theta.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    Ok((two_theta, counts))
}

pub fn run(
    diffractogram: &Path,
    config_path: &Path,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let config = XrdConfig::load(config_path)?;
    let (two_theta, counts) = read_diffractogram(diffractogram)?;

    let inits: Vec<PeakInit> = config
        .peaks
        .iter()
        .map(|p| PeakInit {
            guess: p.guess,
            window_deg: p.window_deg,
        })
        .collect();
    let ctx = diffractogram.display().to_string();
    let fitted =
        fit_peaks(&two_theta, &counts, &inits, config.background).map_err(|e| from_xrd(e, &ctx))?;

    let mut report = Vec::with_capacity(fitted.len());
    for (spec, fit) in config.peaks.iter().zip(fitted) {
        let d = bragg_spacing(fit.peak.center_2theta_deg, spec.lambda_nm, spec.order)
            .map_err(|e| from_xrd(e, &spec.label))?;
        let c_nm = spec
            .l_index
            .map(|l| c_lattice(d, l).map_err(|e| from_xrd(e, &spec.label)))
            .transpose()?;
        let strain_zz = spec
            .d_bulk_nm
            .map(|d_bulk| out_of_plane_strain(d, d_bulk).map_err(|e| from_xrd(e, &spec.label)))
            .transpose()?;
        if !fit.converged {
            log::warn!("peak {}: fit did not converge", spec.label);
        }
        report.push(PeakReport {
            label: spec.label.clone(),
            fit,
            lambda_nm: spec.lambda_nm,
            d_hkl_nm: d,
            c_nm,
            strain_zz,
        });
    }
    emit_report(&report, output)
}
