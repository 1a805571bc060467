//! Kinetic-inductance-fraction analysis: α_L from measured vs designed
//! fundamental frequencies and the width-linearity test of 1/α_L.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KineticError {
    #[error("frequencies must satisfy 0 < f_meas <= f_design (got {f_meas} vs {f_design})")]
    FrequencyOrder { f_meas: f64, f_design: f64 },
    #[error("group `{0}` has {1} distinct widths; at least 3 required")]
    TooFewWidths(String, usize),
    #[error("group `{0}` has no usable points (all alpha_fraction = 0)")]
    NothingUsable(String),
}

/// Resonator end geometry; open and short groups are fitted separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndType {
    Open,
    Short,
}

impl std::fmt::Display for EndType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EndType::Open => write!(f, "open"),
            EndType::Short => write!(f, "short"),
        }
    }
}

/// One resonator: center strip width with measured and designed fundamentals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WidthFrequencyPoint {
    pub width_um: f64,
    pub f_meas_hz: f64,
    pub f_design_hz: f64,
    pub end_type: EndType,
}

/// `α_L = 1 - (f_meas/f_design)²`, the kinetic-inductance fraction.
pub fn alpha_fraction(f_meas_hz: f64, f_design_hz: f64) -> Result<f64, KineticError> {
    if !(f_meas_hz > 0.0 && f_meas_hz <= f_design_hz) {
        return Err(KineticError::FrequencyOrder {
            f_meas: f_meas_hz,
            f_design: f_design_hz,
        });
    }
    let r = f_meas_hz / f_design_hz;
    Ok(1.0 - r * r)
}

/// OLS fit of 1/α_L against width for one end-type group. The intercept is
/// free; theory predicts 1, and the deviation is a diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseAlphaFit {
    pub end_type: EndType,
    /// Slope in 1/μm.
    pub slope_per_um: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
    /// Points dropped because α_L = 0 makes 1/α_L infinite.
    pub points_excluded: usize,
}

/// Fits 1/α_L vs width by ordinary least squares, one fit per end type.
/// Requires at least 3 distinct widths per group; α_L = 0 points are
/// excluded (logged as a warning).
pub fn fit_inverse_alpha_vs_width(
    points: &[WidthFrequencyPoint],
) -> Result<BTreeMap<EndType, InverseAlphaFit>, KineticError> {
    let mut groups: BTreeMap<EndType, Vec<&WidthFrequencyPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.end_type).or_default().push(p);
    }
    let mut out = BTreeMap::new();
    for (end_type, pts) in groups {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut excluded = 0;
        for p in &pts {
            let alpha = alpha_fraction(p.f_meas_hz, p.f_design_hz)?;
            if alpha == 0.0 {
                log::warn!(
                    "excluding width {} um ({end_type}): alpha_fraction is zero",
                    p.width_um
                );
                excluded += 1;
            } else {
                xs.push(p.width_um);
                ys.push(1.0 / alpha);
            }
        }
        if xs.is_empty() {
            return Err(KineticError::NothingUsable(end_type.to_string()));
        }
        let mut widths: Vec<f64> = xs.clone();
        widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        widths.dedup();
        if widths.len() < 3 {
            return Err(KineticError::TooFewWidths(end_type.to_string(), widths.len()));
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ssr: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
        out.insert(
            end_type,
            InverseAlphaFit {
                end_type,
                slope_per_um: slope,
                intercept,
                r_squared,
                points_used: xs.len(),
                points_excluded: excluded,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn point(width: f64, alpha: f64, end_type: EndType) -> WidthFrequencyPoint {
        let f_design = 6e9;
        WidthFrequencyPoint {
            width_um: width,
            f_meas_hz: f_design * (1.0 - alpha).sqrt(),
            f_design_hz: f_design,
            end_type,
        }
    }

    #[test]
    fn alpha_fraction_examples() {
        assert_eq!(alpha_fraction(6e9, 6e9).unwrap(), 0.0);
        assert_relative_eq!(alpha_fraction(3e9, 6e9).unwrap(), 0.75, max_relative = 1e-14);
        assert_relative_eq!(
            alpha_fraction(0.9 * 6e9, 6e9).unwrap(),
            0.19,
            max_relative = 1e-12
        );
        assert!(alpha_fraction(6.1e9, 6e9).is_err());
        assert!(alpha_fraction(0.0, 6e9).is_err());
    }

    #[test]
    fn inverse_alpha_linear_model_recovered() {
        // 1/alpha = 1 + 0.05 W
        let pts: Vec<WidthFrequencyPoint> = [4.0, 8.0, 12.0, 16.0, 24.0]
            .iter()
            .map(|&w| point(w, 1.0 / (1.0 + 0.05 * w), EndType::Open))
            .collect();
        let fits = fit_inverse_alpha_vs_width(&pts).unwrap();
        let f = &fits[&EndType::Open];
        assert_relative_eq!(f.slope_per_um, 0.05, max_relative = 1e-9);
        assert!((f.intercept - 1.0).abs() < 1e-9);
        assert!(f.r_squared > 0.999999);
        assert_eq!(f.points_used, 5);
        assert_eq!(f.points_excluded, 0);
    }

    #[test]
    fn groups_fitted_separately() {
        let mut pts: Vec<WidthFrequencyPoint> = [4.0, 8.0, 12.0]
            .iter()
            .map(|&w| point(w, 1.0 / (1.0 + 0.05 * w), EndType::Open))
            .collect();
        pts.extend(
            [4.0, 8.0, 12.0]
                .iter()
                .map(|&w| point(w, 1.0 / (2.0 + 0.10 * w), EndType::Short)),
        );
        let fits = fit_inverse_alpha_vs_width(&pts).unwrap();
        assert_relative_eq!(
            fits[&EndType::Open].slope_per_um,
            0.05,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            fits[&EndType::Short].slope_per_um,
            0.10,
            max_relative = 1e-9
        );
        assert_relative_eq!(fits[&EndType::Short].intercept, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn duplicate_widths_with_scatter() {
        let pts = vec![
            point(4.0, 0.5, EndType::Open),
            point(4.0, 0.45, EndType::Open),
            point(8.0, 0.4, EndType::Open),
            point(12.0, 0.3, EndType::Open),
        ];
        let f = &fit_inverse_alpha_vs_width(&pts).unwrap()[&EndType::Open];
        assert!(f.r_squared < 1.0);
        assert!(f.r_squared > 0.0);
    }

    #[test]
    fn constant_alpha_gives_zero_slope() {
        let pts: Vec<WidthFrequencyPoint> = [4.0, 8.0, 12.0, 16.0]
            .iter()
            .map(|&w| point(w, 0.3, EndType::Short))
            .collect();
        let f = &fit_inverse_alpha_vs_width(&pts).unwrap()[&EndType::Short];
        assert!(f.slope_per_um.abs() < 1e-12);
        assert_relative_eq!(f.intercept, 1.0 / 0.3, max_relative = 1e-12);
    }

    #[test]
    fn zero_alpha_points_excluded() {
        let pts = vec![
            point(2.0, 0.0, EndType::Open),
            point(4.0, 1.0 / (1.0 + 0.05 * 4.0), EndType::Open),
            point(8.0, 1.0 / (1.0 + 0.05 * 8.0), EndType::Open),
            point(12.0, 1.0 / (1.0 + 0.05 * 12.0), EndType::Open),
        ];
        let f = &fit_inverse_alpha_vs_width(&pts).unwrap()[&EndType::Open];
        assert_eq!(f.points_excluded, 1);
        assert_eq!(f.points_used, 3);
        assert_relative_eq!(f.slope_per_um, 0.05, max_relative = 1e-9);
    }

    #[test]
    fn too_few_distinct_widths_rejected() {
        let pts = vec![
            point(4.0, 0.5, EndType::Open),
            point(4.0, 0.4, EndType::Open),
            point(8.0, 0.3, EndType::Open),
        ];
        assert!(matches!(
            fit_inverse_alpha_vs_width(&pts),
            Err(KineticError::TooFewWidths(_, 2))
        ));
    }

    proptest! {
        #[test]
        fn alpha_fraction_inverse_identity(alpha in 0.0f64..0.99, f_design in 1e9f64..2e10) {
            let f_meas = f_design * (1.0 - alpha).sqrt();
            let back = alpha_fraction(f_meas, f_design).unwrap();
            prop_assert!((back - alpha).abs() < 1e-12);
        }

        #[test]
        fn model_data_fits_with_unit_intercept(c in 0.01f64..10.0) {
            // g = c/W gives 1/alpha = 1 + W/c exactly
            let pts: Vec<WidthFrequencyPoint> = [3.0, 6.0, 9.0, 15.0]
                .iter()
                .map(|&w| point(w, 1.0 / (1.0 + w / c), EndType::Open))
                .collect();
            let f = &fit_inverse_alpha_vs_width(&pts).unwrap()[&EndType::Open];
            prop_assert!(f.r_squared > 0.999999);
            prop_assert!((f.intercept - 1.0).abs() < 1e-9);
            prop_assert!((f.slope_per_um - 1.0 / c).abs() / (1.0 / c) < 1e-9);
        }
    }
}
