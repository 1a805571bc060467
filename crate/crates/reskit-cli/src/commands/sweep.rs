//! `reskit sweep`: fits every trace of a manifest, splits records into
//! linear and nonlinear regimes, fits the TLS saturation model on the
//! linear ladder, the phenomenological power law on the whole ladder, and
//! evaluates the loss budget at the requested power. Sections that cannot
//! be computed are reported as null with a reason; that is not an error.

use crate::commands::emit_report;
use crate::config::{ResonatorMeta, SharedSettings, SweepManifest};
use crate::errors::{from_pipe, from_sweep, CliError};
use crate::jsonio::{fmt_f64, write_atomic};
use crate::traceio::read_trace_csv;
use rayon::prelude::*;
use reskit::powersweep::{
    fit_powerlaw, fit_tls, loss_budget, quality_filter, LossBudget, PowerLawFit, Regime,
    TLSFit, TraceFitRecord,
};
use reskit::respipe::{full_pipeline, PipelineConfig};
use reskit::sigmodel::FrequencySweep;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub toolkit_version: String,
}

#[derive(Debug, Serialize)]
pub struct TlsSection {
    pub fit: TLSFit,
    /// Relative-error quality gate on the fitted TLS parameters.
    pub quality_ok: bool,
}

#[derive(Debug, Serialize)]
pub struct ReportBundle {
    pub provenance: Provenance,
    pub shared: SharedSettings,
    pub resonator_meta: Option<ResonatorMeta>,
    pub records: Vec<TraceFitRecord>,
    pub tls: Option<TlsSection>,
    pub tls_unavailable_reason: Option<String>,
    pub power_law: Option<PowerLawFit>,
    pub power_law_unavailable_reason: Option<String>,
    pub loss_budget: Option<LossBudget>,
}

pub fn run(
    manifest_path: &Path,
    seed: u64,
    eval_power_dbm: f64,
    regime_threshold: f64,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let (manifest, paths) = SweepManifest::load(manifest_path)?;
    if manifest.entries.len() < 2 {
        return Err(CliError::input(
            "sweep needs at least 2 traces at distinct powers",
        ));
    }
    let manifest_bytes = std::fs::read(manifest_path)?;
    let config_sha256 = hex_digest(&manifest_bytes);

    let shared = manifest.shared;
    let mut records: Vec<TraceFitRecord> = manifest
        .entries
        .par_iter()
        .zip(paths.par_iter())
        .map(|(entry, path)| {
            let (freqs_hz, s21) = read_trace_csv(path)?;
            let sweep = FrequencySweep {
                freqs_hz,
                s21,
                source_power_dbm: entry.source_power_dbm,
                attenuation_db: shared.attenuation_db,
                temperature_k: shared.temperature_k,
                sweep_direction: entry.sweep_direction,
            };
            let result = full_pipeline(&sweep, &PipelineConfig::default())
                .map_err(|e| from_pipe(e, &path.display().to_string()))?;
            TraceFitRecord::new(
                result.fit,
                entry.source_power_dbm,
                shared.attenuation_db,
                shared.z0_ohm,
                shared.zr_ohm,
                regime_threshold,
            )
            .map_err(|e| from_sweep(e, &path.display().to_string()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    records.sort_by(|a, b| a.source_power_dbm.partial_cmp(&b.source_power_dbm).unwrap());

    let linear: Vec<TraceFitRecord> = records
        .iter()
        .filter(|r| r.regime == Regime::Linear)
        .cloned()
        .collect();
    let nonlinear_count = records.len() - linear.len();

    let (tls, tls_reason) = if linear.len() < 5 {
        (
            None,
            Some(format!(
                "TLS fit needs at least 5 linear-regime records, got {}",
                linear.len()
            )),
        )
    } else {
        let f_r0 = median(linear.iter().map(|r| r.fit.f_r0_hz.value).collect());
        let fit = fit_tls(&linear, shared.temperature_k, f_r0)
            .map_err(|e| from_sweep(e, "tls fit"))?;
        let quality_ok = quality_filter(&fit);
        (Some(TlsSection { fit, quality_ok }), None)
    };

    let (power_law, pl_reason) = if nonlinear_count == 0 {
        (
            None,
            Some("all records are in the linear regime; the power-law section is unavailable".to_string()),
        )
    } else if records.len() < 4 {
        (
            None,
            Some(format!(
                "power-law fit needs at least 4 records, got {}",
                records.len()
            )),
        )
    } else {
        let fit = fit_powerlaw(&records).map_err(|e| from_sweep(e, "power-law fit"))?;
        (Some(fit), None)
    };

    let budget = match (&tls, &power_law) {
        (Some(t), Some(p)) => Some(
            loss_budget(&t.fit, p, &records, shared.attenuation_db, eval_power_dbm)
                .map_err(|e| from_sweep(e, "loss budget"))?,
        ),
        _ => None,
    };

    let report = ReportBundle {
        provenance: Provenance {
            config_sha256,
            seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        shared,
        resonator_meta: manifest.resonator_meta.clone(),
        records,
        tls,
        tls_unavailable_reason: tls_reason,
        power_law,
        power_law_unavailable_reason: pl_reason,
        loss_budget: budget,
    };

    match output {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
            emit_report(&report, Some(&dir.join("report.json")))?;
            write_atomic(&dir.join("qi_vs_n.csv"), qi_vs_n_csv(&report.records).as_bytes())
                .map_err(|e| CliError::Input(format!("cannot write qi_vs_n.csv: {e}")))?;
            if let Some(b) = &report.loss_budget {
                write_atomic(&dir.join("loss_budget.csv"), budget_csv(b).as_bytes())
                    .map_err(|e| CliError::Input(format!("cannot write loss_budget.csv: {e}")))?;
            }
            Ok(())
        }
        None => emit_report(&report, None),
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn qi_vs_n_csv(records: &[TraceFitRecord]) -> String {
    let mut out = String::from("n_bar,q_i,a_n0,regime,source_power_dbm\n");
    for r in records {
        let regime = match r.regime {
            Regime::Linear => "linear",
            Regime::Nonlinear => "nonlinear",
        };
        out.push_str(&format!(
            "{},{},{},{regime},{}\n",
            fmt_f64(r.n_bar),
            fmt_f64(r.q_i()),
            fmt_f64(r.a_n0),
            fmt_f64(r.source_power_dbm),
        ));
    }
    out
}

fn budget_csv(b: &LossBudget) -> String {
    format!(
        "component,delta\ntls,{}\nother,{}\npower,{}\n",
        fmt_f64(b.delta_tls),
        fmt_f64(b.delta_other),
        fmt_f64(b.delta_power),
    )
}
