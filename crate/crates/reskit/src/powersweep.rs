//! Power-sweep analysis: photon-number conversion, linear/nonlinear regime
//! classification, TLS saturation fitting, phenomenological power-law
//! fitting, loss-budget decomposition, and group statistics.

use crate::numcore::{lm_fit, student_t_quantile, FitOptions, FitProblem, NumError};
use crate::phys::{BOLTZMANN_KB, HBAR, PLANCK_H};
use crate::respipe::FullFitResult;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("parameter `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Default regime split on the nonlinearity parameter.
pub const DEFAULT_REGIME_THRESHOLD: f64 = 0.05;
/// Default sample temperature, kelvin.
pub const DEFAULT_TEMPERATURE_K: f64 = 0.015;
/// Default line and resonator impedances, ohm.
pub const DEFAULT_IMPEDANCE_OHM: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Linear,
    Nonlinear,
}

/// One fitted trace of a power sweep with its derived quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFitRecord {
    pub source_power_dbm: f64,
    pub p_g_w: f64,
    pub fit: FullFitResult,
    pub n_bar: f64,
    pub a_n0: f64,
    pub regime: Regime,
}

impl TraceFitRecord {
    pub fn new(
        fit: FullFitResult,
        source_power_dbm: f64,
        attenuation_db: f64,
        z0_ohm: f64,
        zr_ohm: f64,
        regime_threshold: f64,
    ) -> Result<Self, SweepError> {
        let p_g_w = crate::phys::dbm_to_watts(source_power_dbm, attenuation_db);
        let n_bar = photon_number(
            fit.q_l.value,
            fit.q_c.value,
            fit.f_r0_hz.value,
            z0_ohm,
            zr_ohm,
            p_g_w,
        )?;
        let r = fit.a.value * fit.q_l.value / fit.q_c.value;
        let a_n0 = fit.beta.value * r * r * fit.q_l.value;
        let regime = if a_n0 < regime_threshold {
            Regime::Linear
        } else {
            Regime::Nonlinear
        };
        Ok(Self {
            source_power_dbm,
            p_g_w,
            fit,
            n_bar,
            a_n0,
            regime,
        })
    }

    pub fn q_i(&self) -> f64 {
        self.fit.q_i
    }
}

/// Mean photon number `⟨n⟩ = (2/ħω²)(Z0/Zr)(Q_l²/Q_c) P_g`.
pub fn photon_number(
    q_l: f64,
    q_c: f64,
    f_r0_hz: f64,
    z0_ohm: f64,
    zr_ohm: f64,
    p_g_w: f64,
) -> Result<f64, SweepError> {
    for (name, v) in [
        ("q_l", q_l),
        ("q_c", q_c),
        ("f_r0_hz", f_r0_hz),
        ("z0_ohm", z0_ohm),
        ("zr_ohm", zr_ohm),
        ("p_g_w", p_g_w),
    ] {
        if !(v > 0.0) {
            return Err(SweepError::NonPositive(name));
        }
    }
    let omega = TAU * f_r0_hz;
    Ok(2.0 / (HBAR * omega * omega) * (z0_ohm / zr_ohm) * (q_l * q_l / q_c) * p_g_w)
}

/// A fitted TLS-model parameter with its standard error and 95% CI.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TlsParam {
    pub value: f64,
    pub se: f64,
    pub ci95: (f64, f64),
}

/// TLS saturation fit `1/Q_i = tanh(hf/2kT)/(Q_TLS0 √(1+(⟨n⟩/n_c)^α)) + 1/Q_other`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TLSFit {
    pub q_tls0: TlsParam,
    pub n_c: TlsParam,
    pub alpha_tls: TlsParam,
    pub q_other: TlsParam,
    pub temperature_k: f64,
    pub f_r0_hz: f64,
    pub dof: usize,
    pub converged: bool,
    /// Set when fewer than 5 records or under 2 decades of ⟨n⟩ span.
    pub low_confidence: bool,
}

impl TLSFit {
    /// Saturable TLS quality factor at a given photon number.
    pub fn q_tls(&self, n_bar: f64) -> f64 {
        q_tls_model(
            self.q_tls0.value,
            self.n_c.value,
            self.alpha_tls.value,
            self.temperature_k,
            self.f_r0_hz,
            n_bar,
        )
    }
}

fn tanh_factor(f_hz: f64, temperature_k: f64) -> f64 {
    (PLANCK_H * f_hz / (2.0 * BOLTZMANN_KB * temperature_k)).tanh()
}

pub fn q_tls_model(
    q_tls0: f64,
    n_c: f64,
    alpha_tls: f64,
    temperature_k: f64,
    f_hz: f64,
    n_bar: f64,
) -> f64 {
    q_tls0 * (1.0 + (n_bar / n_c).powf(alpha_tls)).sqrt() / tanh_factor(f_hz, temperature_k)
}

/// Fits the TLS saturation model to linear-regime records.
pub fn fit_tls(
    records: &[TraceFitRecord],
    temperature_k: f64,
    f_r0_hz: f64,
) -> Result<TLSFit, SweepError> {
    if records.len() < 5 {
        return Err(SweepError::TooFewRecords {
            needed: 5,
            got: records.len(),
        });
    }
    let ns: Vec<f64> = records.iter().map(|r| r.n_bar).collect();
    let qis: Vec<f64> = records.iter().map(|r| r.q_i()).collect();
    fit_tls_curve(&ns, &qis, temperature_k, f_r0_hz)
}

/// Same fit on bare `(⟨n⟩, Q_i)` pairs.
pub fn fit_tls_curve(
    n_bars: &[f64],
    q_is: &[f64],
    temperature_k: f64,
    f_r0_hz: f64,
) -> Result<TLSFit, SweepError> {
    if n_bars.len() != q_is.len() {
        return Err(SweepError::Num(NumError::MismatchedLengths));
    }
    if n_bars.len() < 5 {
        return Err(SweepError::TooFewRecords {
            needed: 5,
            got: n_bars.len(),
        });
    }
    for &n in n_bars {
        if !(n > 0.0) {
            return Err(SweepError::NonPositive("n_bar"));
        }
    }
    for &q in q_is {
        if !(q > 0.0) {
            return Err(SweepError::NonPositive("q_i"));
        }
    }
    let tanh = tanh_factor(f_r0_hz, temperature_k);
    let losses: Vec<f64> = q_is.iter().map(|q| 1.0 / q).collect();

    // initial guesses: Q_other from the highest-power point, Q_TLS0 from the
    // excess loss at the lowest power, n_c at the geometric center
    let i_lo = n_bars
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let i_hi = n_bars
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let q_other0 = 1.5 * q_is[i_hi];
    let excess = (losses[i_lo] - 1.0 / q_other0).max(0.1 * losses[i_lo]);
    let q_tls0_init = tanh / excess;
    let n_c0 = 10f64.powf(
        n_bars.iter().map(|n| n.log10()).sum::<f64>() / n_bars.len() as f64,
    );
    let init = [q_tls0_init, n_c0, 1.0, q_other0];

    // residuals on the loss 1/Q_i, scaled to order unity for conditioning
    let scale = losses.iter().sum::<f64>() / losses.len() as f64;
    let problem = FitProblem::new(4, n_bars.len(), |p, out| {
        let (q_tls0, n_c, alpha, q_other) = (p[0], p[1], p[2], p[3]);
        for i in 0..n_bars.len() {
            let q_tls = q_tls0 * (1.0 + (n_bars[i] / n_c).powf(alpha)).sqrt() / tanh;
            out[i] = (1.0 / q_tls + 1.0 / q_other - losses[i]) / scale;
        }
    })?
    .with_bounds(
        vec![1.0, 1e-12, 1e-6, 1.0],
        vec![f64::INFINITY, f64::INFINITY, 2.0, f64::INFINITY],
    )?;
    let fit = lm_fit(&problem, &init, FitOptions::default())?;

    let t = if fit.dof >= 1 {
        student_t_quantile(fit.dof, 0.975)?
    } else {
        f64::NAN
    };
    let param = |k: usize| TlsParam {
        value: fit.params[k],
        se: fit.standard_errors[k],
        ci95: (
            fit.params[k] - t * fit.standard_errors[k],
            fit.params[k] + t * fit.standard_errors[k],
        ),
    };
    let span_decades = (n_bars[i_hi] / n_bars[i_lo]).log10();
    Ok(TLSFit {
        q_tls0: param(0),
        n_c: param(1),
        alpha_tls: param(2),
        q_other: param(3),
        temperature_k,
        f_r0_hz,
        dof: fit.dof,
        converged: fit.converged,
        low_confidence: n_bars.len() < 5 || span_decades < 2.0,
    })
}

/// True iff the 95% CIs of both `Q_TLS0` and `Q_other` strictly exclude zero.
pub fn quality_filter(tls: &TLSFit) -> bool {
    tls.q_tls0.ci95.0 > 0.0 && tls.q_other.ci95.0 > 0.0
}

/// Phenomenological power law `log10 Q_i = k (log10⟨n⟩)^b + c`. Not a
/// physics model; used only to evaluate high-power loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub k: f64,
    pub b: f64,
    pub c: f64,
    pub standard_errors: [f64; 3],
    pub dof: usize,
    pub converged: bool,
    /// ⟨n⟩ range of the data the fit was built from.
    pub n_bar_support: (f64, f64),
}

impl PowerLawFit {
    pub fn q_i_at(&self, n_bar: f64) -> f64 {
        10f64.powf(self.k * n_bar.log10().powf(self.b) + self.c)
    }
}

pub fn fit_powerlaw(records: &[TraceFitRecord]) -> Result<PowerLawFit, SweepError> {
    let ns: Vec<f64> = records.iter().map(|r| r.n_bar).collect();
    let qis: Vec<f64> = records.iter().map(|r| r.q_i()).collect();
    fit_powerlaw_curve(&ns, &qis)
}

pub fn fit_powerlaw_curve(n_bars: &[f64], q_is: &[f64]) -> Result<PowerLawFit, SweepError> {
    if n_bars.len() != q_is.len() {
        return Err(SweepError::Num(NumError::MismatchedLengths));
    }
    if n_bars.len() < 4 {
        return Err(SweepError::TooFewRecords {
            needed: 4,
            got: n_bars.len(),
        });
    }
    for &n in n_bars {
        if !(n > 0.0) {
            return Err(SweepError::NonPositive("n_bar"));
        }
    }
    for &q in q_is {
        if !(q > 0.0) {
            return Err(SweepError::NonPositive("q_i"));
        }
    }
    let ts: Vec<f64> = n_bars.iter().map(|n| n.log10()).collect();
    let ys: Vec<f64> = q_is.iter().map(|q| q.log10()).collect();

    // init from the b=1 straight line
    let tm = ts.iter().sum::<f64>() / ts.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let stt: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
    let sty: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let k0 = if stt > 0.0 { sty / stt } else { 0.0 };
    let init = [k0, 1.0, ym - k0 * tm];

    let problem = FitProblem::new(3, ts.len(), |p, out| {
        for i in 0..ts.len() {
            out[i] = p[0] * ts[i].powf(p[1]) + p[2] - ys[i];
        }
    })?;
    let fit = lm_fit(&problem, &init, FitOptions::default())?;
    let lo = n_bars.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = n_bars.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PowerLawFit {
        k: fit.params[0],
        b: fit.params[1],
        c: fit.params[2],
        standard_errors: [
            fit.standard_errors[0],
            fit.standard_errors[1],
            fit.standard_errors[2],
        ],
        dof: fit.dof,
        converged: fit.converged,
        n_bar_support: (lo, hi),
    })
}

/// Loss decomposition at a stated source power.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBudget {
    pub delta_tls: f64,
    pub delta_other: f64,
    pub delta_power: f64,
    pub eval_power_dbm: f64,
    /// Photon number the power law was evaluated at.
    pub n_bar_eval: f64,
    /// Set when the evaluation point lies outside the power-law support.
    pub extrapolated: bool,
    /// Set when the raw power-dependent excess came out negative and was
    /// floored at zero.
    pub delta_power_floored: bool,
}

/// Maps a source power to a photon number by log-log interpolation of the
/// per-record `(P_g, ⟨n⟩)` relation (extrapolated linearly at the ends).
fn n_bar_at_power(records: &[TraceFitRecord], p_g_w: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.p_g_w.log10(), r.n_bar.log10()))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let x = p_g_w.log10();
    let y = if pts.len() == 1 {
        // ⟨n⟩ ∝ P_g at fixed quality factors
        pts[0].1 + (x - pts[0].0)
    } else {
        let mut j = 1;
        while j < pts.len() - 1 && pts[j].0 < x {
            j += 1;
        }
        let (x0, y0) = pts[j - 1];
        let (x1, y1) = pts[j];
        if x1 == x0 {
            y0
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    };
    10f64.powf(y)
}

pub fn loss_budget(
    tls: &TLSFit,
    powerlaw: &PowerLawFit,
    records: &[TraceFitRecord],
    attenuation_db: f64,
    eval_power_dbm: f64,
) -> Result<LossBudget, SweepError> {
    if records.is_empty() {
        return Err(SweepError::TooFewRecords { needed: 1, got: 0 });
    }
    let p_eval = crate::phys::dbm_to_watts(eval_power_dbm, attenuation_db);
    let n_eval = n_bar_at_power(records, p_eval);
    let q_i_eval = powerlaw.q_i_at(n_eval);
    let raw = 1.0 / q_i_eval - 1.0 / tls.q_other.value;
    let floored = raw < 0.0;
    Ok(LossBudget {
        delta_tls: 1.0 / tls.q_tls0.value,
        delta_other: 1.0 / tls.q_other.value,
        delta_power: raw.max(0.0),
        eval_power_dbm,
        n_bar_eval: n_eval,
        extrapolated: n_eval < powerlaw.n_bar_support.0 || n_eval > powerlaw.n_bar_support.1,
        delta_power_floored: floored,
    })
}

/// Mean, standard error of the mean, and count for one loss component.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupStat {
    pub mean: f64,
    /// `None` for a single sample.
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn mean_sem(values: &[f64]) -> Result<GroupStat, SweepError> {
    if values.is_empty() {
        return Err(SweepError::TooFewRecords { needed: 1, got: 0 });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    Ok(GroupStat { mean, sem, n })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossGroupStats {
    pub delta_tls: GroupStat,
    pub delta_other: GroupStat,
    pub delta_power: GroupStat,
}

/// Per-category statistics over loss budgets; categories with no members are
/// simply absent from the map.
pub fn group_stats(
    labeled: &[(String, LossBudget)],
) -> BTreeMap<String, LossGroupStats> {
    let mut groups: BTreeMap<String, Vec<&LossBudget>> = BTreeMap::new();
    for (label, budget) in labeled {
        groups.entry(label.clone()).or_default().push(budget);
    }
    groups
        .into_iter()
        .map(|(label, items)| {
            let tls: Vec<f64> = items.iter().map(|b| b.delta_tls).collect();
            let other: Vec<f64> = items.iter().map(|b| b.delta_other).collect();
            let power: Vec<f64> = items.iter().map(|b| b.delta_power).collect();
            (
                label,
                LossGroupStats {
                    delta_tls: mean_sem(&tls).expect("nonempty group"),
                    delta_other: mean_sem(&other).expect("nonempty group"),
                    delta_power: mean_sem(&power).expect("nonempty group"),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn photon_number_oracle() {
        // -30 dBm source through -75 dB of attenuation
        let p_g = crate::phys::dbm_to_watts(-30.0, -75.0);
        assert_relative_eq!(p_g, 3.162e-14, max_relative = 5e-4);
        let n = photon_number(5e4, 1e5, 5e9, 50.0, 50.0, p_g).unwrap();
        assert_relative_eq!(n, 1.52e4, max_relative = 5e-3);
    }

    #[test]
    fn photon_number_scalings() {
        let n1 = photon_number(5e4, 1e5, 5e9, 50.0, 50.0, 1e-13).unwrap();
        let n2 = photon_number(5e4, 1e5, 5e9, 50.0, 50.0, 2e-13).unwrap();
        assert_relative_eq!(n2, 2.0 * n1, max_relative = 1e-14);
        let nq = photon_number(2.5e4, 1e5, 5e9, 50.0, 50.0, 1e-13).unwrap();
        assert_relative_eq!(nq, n1 / 4.0, max_relative = 1e-14);
        let nf = photon_number(5e4, 1e5, 1e10, 50.0, 50.0, 1e-13).unwrap();
        assert_relative_eq!(nf, n1 / 4.0, max_relative = 1e-14);
        assert!(photon_number(0.0, 1e5, 5e9, 50.0, 50.0, 1e-13).is_err());
    }

    #[test]
    fn tls_model_limits() {
        // deep low-power limit: the tanh factor is 1 to machine precision
        let q = q_tls_model(1e6, 10.0, 0.7, 0.015, 5e9, 1e-9);
        assert_relative_eq!(q, 1e6, max_relative = 1e-6);
        // at n = n_c with alpha = 1 the enhancement is exactly sqrt(2)
        let q2 = q_tls_model(1e6, 10.0, 1.0, 0.015, 5e9, 10.0);
        let expect = 1e6 * 2f64.sqrt() / (PLANCK_H * 5e9 / (2.0 * BOLTZMANN_KB * 0.015)).tanh();
        assert_relative_eq!(q2, expect, max_relative = 1e-12);
    }

    #[test]
    fn tls_monotone_in_photon_number() {
        let mut prev = 0.0;
        for i in 0..60 {
            let n = 10f64.powf(-3.0 + 0.2 * i as f64);
            let q = q_tls_model(8e5, 25.0, 0.6, 0.015, 4.5e9, n);
            assert!(q > prev);
            prev = q;
        }
    }

    fn synth_tls_data() -> (Vec<f64>, Vec<f64>) {
        let (q_tls0, n_c, alpha, q_other) = (1e6, 10.0, 0.7, 5e5);
        let ns: Vec<f64> = (0..12).map(|i| 10f64.powf(-1.0 + 0.5 * i as f64)).collect();
        let qs: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let q_tls = q_tls_model(q_tls0, n_c, alpha, 0.015, 5e9, n);
                1.0 / (1.0 / q_tls + 1.0 / q_other)
            })
            .collect();
        (ns, qs)
    }

    #[test]
    fn tls_fit_round_trip() {
        let (ns, qs) = synth_tls_data();
        let fit = fit_tls_curve(&ns, &qs, 0.015, 5e9).unwrap();
        assert!(fit.converged);
        assert!(!fit.low_confidence);
        assert_relative_eq!(fit.q_tls0.value, 1e6, max_relative = 1e-4);
        assert_relative_eq!(fit.n_c.value, 10.0, max_relative = 1e-4);
        assert_relative_eq!(fit.alpha_tls.value, 0.7, max_relative = 1e-4);
        assert_relative_eq!(fit.q_other.value, 5e5, max_relative = 1e-4);
        assert!(quality_filter(&fit));
    }

    #[test]
    fn tls_fit_rejects_small_samples() {
        let (ns, qs) = synth_tls_data();
        assert!(matches!(
            fit_tls_curve(&ns[..4], &qs[..4], 0.015, 5e9),
            Err(SweepError::TooFewRecords { .. })
        ));
    }

    #[test]
    fn tls_fit_first_order_optimality() {
        // residuals at the solution are orthogonal to the Jacobian columns
        let (ns, qs) = synth_tls_data();
        let fit = fit_tls_curve(&ns, &qs, 0.015, 5e9).unwrap();
        let p = [
            fit.q_tls0.value,
            fit.n_c.value,
            fit.alpha_tls.value,
            fit.q_other.value,
        ];
        let tanh = (PLANCK_H * 5e9 / (2.0 * BOLTZMANN_KB * 0.015)).tanh();
        let resid = |p: &[f64]| -> Vec<f64> {
            ns.iter()
                .zip(&qs)
                .map(|(&n, &q)| {
                    let q_tls = p[0] * (1.0 + (n / p[1]).powf(p[2])).sqrt() / tanh;
                    1.0 / q_tls + 1.0 / p[3] - 1.0 / q
                })
                .collect()
        };
        let r0 = resid(&p);
        for j in 0..4 {
            let h = 1e-6 * p[j].abs();
            let mut pp = p;
            pp[j] += h;
            let mut pm = p;
            pm[j] -= h;
            let (rp, rm) = (resid(&pp), resid(&pm));
            let col: Vec<f64> = rp
                .iter()
                .zip(&rm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            let dot: f64 = r0.iter().zip(&col).map(|(a, b)| a * b).sum();
            let scale: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-300);
            assert!(
                (dot / scale).abs() < 1e-8,
                "gradient component {j} = {dot:e}"
            );
        }
    }

    #[test]
    fn quality_filter_boundary() {
        let (ns, qs) = synth_tls_data();
        let mut fit = fit_tls_curve(&ns, &qs, 0.015, 5e9).unwrap();
        fit.q_other.ci95 = (1e5, 9e5);
        fit.q_tls0.ci95 = (2e5, 2e6);
        assert!(quality_filter(&fit));
        fit.q_other.ci95 = (-1e5, 9e5);
        assert!(!quality_filter(&fit));
        fit.q_other.ci95 = (0.0, 9e5);
        assert!(!quality_filter(&fit), "touching zero must fail");
    }

    #[test]
    fn powerlaw_round_trip() {
        let (k, b, c) = (-0.5, 1.0, 6.0);
        let ns: Vec<f64> = (1..=8).map(|i| 10f64.powf(i as f64)).collect();
        let qs: Vec<f64> = ns
            .iter()
            .map(|n| 10f64.powf(k * n.log10().powf(b) + c))
            .collect();
        let fit = fit_powerlaw_curve(&ns, &qs).unwrap();
        assert_relative_eq!(fit.k, k, max_relative = 1e-8);
        assert_relative_eq!(fit.b, b, max_relative = 1e-8);
        assert_relative_eq!(fit.c, c, max_relative = 1e-8);
        // b = 1 closed form at n = 1e6
        assert_relative_eq!(
            fit.q_i_at(1e6),
            10f64.powf(6.0 * k + c),
            max_relative = 1e-7
        );
    }

    #[test]
    fn powerlaw_constant_data() {
        let ns: Vec<f64> = (1..=6).map(|i| 10f64.powf(i as f64)).collect();
        let qs = vec![2e5; 6];
        let fit = fit_powerlaw_curve(&ns, &qs).unwrap();
        assert!(fit.k.abs() < 1e-8);
        assert_relative_eq!(fit.c, 2e5f64.log10(), max_relative = 1e-8);
        assert!(fit_powerlaw_curve(&ns[..3], &qs[..3]).is_err());
        assert!(fit_powerlaw_curve(&[1.0, 2.0, 3.0, -1.0], &qs[..4]).is_err());
    }

    fn dummy_tls(q_tls0: f64, q_other: f64) -> TLSFit {
        let p = |v: f64| TlsParam {
            value: v,
            se: 0.1 * v,
            ci95: (0.8 * v, 1.2 * v),
        };
        TLSFit {
            q_tls0: p(q_tls0),
            n_c: p(10.0),
            alpha_tls: p(0.7),
            q_other: p(q_other),
            temperature_k: 0.015,
            f_r0_hz: 5e9,
            dof: 8,
            converged: true,
            low_confidence: false,
        }
    }

    fn dummy_records() -> Vec<TraceFitRecord> {
        // fabricated (P_g, n_bar) pairs consistent with n ∝ P_g
        let mut out = Vec::new();
        for dbm in [-40.0, -20.0, 0.0] {
            let p_g = crate::phys::dbm_to_watts(dbm, -75.0);
            let n = photon_number(5e4, 1e5, 5e9, 50.0, 50.0, p_g).unwrap();
            out.push(TraceFitRecord {
                source_power_dbm: dbm,
                p_g_w: p_g,
                fit: fabricated_fit(),
                n_bar: n,
                a_n0: 0.2,
                regime: Regime::Nonlinear,
            });
        }
        out
    }

    fn fabricated_fit() -> FullFitResult {
        let e = |v: f64| crate::respipe::ParamEst { value: v, se: 0.0 };
        FullFitResult {
            a: e(1.0),
            alpha_rad: e(0.0),
            phi_rad: e(0.0),
            q_l: e(5e4),
            q_c: e(1e5),
            f_r0_hz: e(5e9),
            beta: e(0.0),
            tau_s: 0.0,
            dof: 10,
            residual_norm: 0.0,
            q_i: 1e5,
            q_i_ci95: (9e4, Some(1.1e5)),
            q_c_corrected: 1e5,
            phi_physical: true,
            converged: true,
            covariance: None,
        }
    }

    #[test]
    fn loss_budget_arithmetic() {
        let tls = dummy_tls(1e6, 5e5);
        let records = dummy_records();
        // power law pinned so Q_i(any n) = 2e5
        let pl = PowerLawFit {
            k: 0.0,
            b: 1.0,
            c: 2e5f64.log10(),
            standard_errors: [0.0; 3],
            dof: 5,
            converged: true,
            n_bar_support: (1.0, 1e12),
        };
        let b = loss_budget(&tls, &pl, &records, -75.0, 10.0).unwrap();
        assert_relative_eq!(b.delta_power, 3e-6, max_relative = 1e-10);
        assert_relative_eq!(b.delta_tls, 1e-6, max_relative = 1e-12);
        assert_relative_eq!(b.delta_other, 2e-6, max_relative = 1e-12);
        assert!(!b.delta_power_floored);

        // Q_i at evaluation equal to Q_other: no excess loss
        let pl_eq = PowerLawFit {
            c: 5e5f64.log10(),
            ..pl.clone()
        };
        let b2 = loss_budget(&tls, &pl_eq, &records, -75.0, 10.0).unwrap();
        assert!(b2.delta_power.abs() < 1e-18);

        // Q_i above Q_other: floored at zero and flagged
        let pl_hi = PowerLawFit {
            c: 1e6f64.log10(),
            ..pl
        };
        let b3 = loss_budget(&tls, &pl_hi, &records, -75.0, 10.0).unwrap();
        assert_eq!(b3.delta_power, 0.0);
        assert!(b3.delta_power_floored);
    }

    #[test]
    fn loss_budget_photon_interpolation() {
        // records span -40..0 dBm; +10 dBm lies beyond them, so the mapping
        // extrapolates the exact n ∝ P_g relation and must land on it
        let records = dummy_records();
        let p_eval = crate::phys::dbm_to_watts(10.0, -75.0);
        let n = n_bar_at_power(&records, p_eval);
        let expect = photon_number(5e4, 1e5, 5e9, 50.0, 50.0, p_eval).unwrap();
        assert_relative_eq!(n, expect, max_relative = 1e-9);
    }

    #[test]
    fn group_stats_basics() {
        assert!(mean_sem(&[]).is_err());
        let single = mean_sem(&[3.0]).unwrap();
        assert_eq!(single.n, 1);
        assert!(single.sem.is_none());
        let pair = mean_sem(&[1e-6, 3e-6]).unwrap();
        assert_relative_eq!(pair.mean, 2e-6, max_relative = 1e-12);
        assert_relative_eq!(pair.sem.unwrap(), 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn group_stats_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(2e-6, 5e-7).unwrap();
        let draws: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let s = mean_sem(&draws).unwrap();
        assert!((s.mean - 2e-6).abs() < 3.0 * s.sem.unwrap());
    }

    #[test]
    fn group_stats_by_category() {
        let mk = |tls: f64| LossBudget {
            delta_tls: tls,
            delta_other: 2.0 * tls,
            delta_power: 0.5 * tls,
            eval_power_dbm: 10.0,
            n_bar_eval: 1e9,
            extrapolated: false,
            delta_power_floored: false,
        };
        let labeled = vec![
            ("open_lm".to_string(), mk(1e-6)),
            ("open_lm".to_string(), mk(3e-6)),
            ("short_control".to_string(), mk(2e-6)),
        ];
        let stats = group_stats(&labeled);
        assert_eq!(stats.len(), 2);
        let open = &stats["open_lm"];
        assert_relative_eq!(open.delta_tls.mean, 2e-6, max_relative = 1e-12);
        assert_eq!(open.delta_tls.n, 2);
        let short = &stats["short_control"];
        assert_eq!(short.delta_power.n, 1);
        assert!(short.delta_power.sem.is_none());
    }

    #[test]
    fn low_power_budget_identity() {
        // delta_tls + delta_other reproduces the fitted zero-power loss
        let (ns, qs) = synth_tls_data();
        let fit = fit_tls_curve(&ns, &qs, 0.015, 5e9).unwrap();
        let total = 1.0 / fit.q_tls0.value + 1.0 / fit.q_other.value;
        assert_relative_eq!(
            total,
            1.0 / 1e6 + 1.0 / 5e5,
            max_relative = 1e-3
        );
    }
}
