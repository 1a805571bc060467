//! Trace CSV I/O. Canonical format: header `freq_hz,s21_re,s21_im`,
//! strictly ascending frequency, UTF-8, LF endings. Read errors carry line
//! numbers (the header is line 1).

use crate::errors::CliError;
use crate::jsonio::fmt_f64;
use num_complex::Complex64;
use std::path::Path;

pub const TRACE_HEADER: &str = "freq_hz,s21_re,s21_im";

pub fn read_trace_csv(path: &Path) -> Result<(Vec<f64>, Vec<Complex64>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let at = |line: usize, msg: String| {
        CliError::Input(format!("{}:{line}: {msg}", path.display()))
    };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(at(1, "empty file, expected header".to_string()));
    };
    if header.trim_end_matches('\r') != TRACE_HEADER {
        return Err(at(1, format!("expected header `{TRACE_HEADER}`, got `{header}`")));
    }
    let mut freqs = Vec::new();
    let mut s21 = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(at(line_no, format!("expected 3 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 3];
        for (k, (field, name)) in fields
            .iter()
            .zip(["freq_hz", "s21_re", "s21_im"])
            .enumerate()
        {
            vals[k] = field.trim().parse().map_err(|_| {
                at(line_no, format!("cannot parse {name} from `{field}`"))
            })?;
            if !vals[k].is_finite() {
                return Err(at(line_no, format!("{name} is not finite")));
            }
        }
        if let Some(prev) = freqs.last() {
            if vals[0] <= *prev {
                return Err(at(
                    line_no,
                    format!("freq_hz must be strictly ascending ({} after {prev})", vals[0]),
                ));
            }
        }
        freqs.push(vals[0]);
        s21.push(Complex64::new(vals[1], vals[2]));
    }
    if freqs.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no data rows after the header",
            path.display()
        )));
    }
    Ok((freqs, s21))
}

pub fn trace_csv_bytes(freqs: &[f64], s21: &[Complex64]) -> Vec<u8> {
    let mut out = String::with_capacity(64 * (freqs.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (f, z) in freqs.iter().zip(s21) {
        out.push_str(&fmt_f64(*f));
        out.push(',');
        out.push_str(&fmt_f64(z.re));
        out.push(',');
        out.push_str(&fmt_f64(z.im));
        out.push('\n');
    }
    out.into_bytes()
}
