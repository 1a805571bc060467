//! Staged fitting pipeline for a single resonance trace: cable-delay fit and
//! removal, algebraic circle fit, phase unwrapping, phase fit of the
//! nonlinear model, impedance-mismatch (φ) correction, and the final direct
//! complex fit with parameter uncertainties.

mod circle;
mod unwrap;

pub use circle::{circle_fit, CircleFit};
pub use unwrap::{unwrap_phase, UnwrapMode, UnwrapOptions};

use crate::numcore::{self, lm_fit, FitOptions, FitProblem, NumError};
use crate::sigmodel::{FrequencySweep, ModelError, SweepDirection};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipeError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points are collinear or otherwise degenerate")]
    DegenerateGeometry,
    #[error("sweep contains no samples")]
    EmptySweep,
    #[error("too few background points outside the excluded window")]
    TooFewBackgroundPoints,
    #[error("frequency grid is not strictly monotonic")]
    NonMonotonicGrid,
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipeError>,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn at_stage(stage: &'static str) -> impl FnOnce(PipeError) -> PipeError {
    move |e| PipeError::Stage {
        stage,
        source: Box::new(e),
    }
}

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParamEst {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DelayFit {
    /// Cable delay in seconds.
    pub tau_s: f64,
    /// Phase intercept of the background fit, rad.
    pub intercept_rad: f64,
}

/// Result of the four-parameter phase fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseFitResult {
    pub q_l: ParamEst,
    pub f_r0_hz: ParamEst,
    pub beta: ParamEst,
    pub theta_rad: ParamEst,
    pub dof: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Final resonator parameters from the direct complex fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullFitResult {
    pub a: ParamEst,
    pub alpha_rad: ParamEst,
    pub phi_rad: ParamEst,
    pub q_l: ParamEst,
    pub q_c: ParamEst,
    pub f_r0_hz: ParamEst,
    pub beta: ParamEst,
    /// Cable delay fixed in stage 1 and carried through.
    pub tau_s: f64,
    pub dof: usize,
    pub residual_norm: f64,
    /// Internal quality factor via `1/Q_i = 1/Q_l - cos(φ)/Q_c`.
    pub q_i: f64,
    /// 95% confidence interval for `Q_i`; upper bound `None` when unbounded.
    pub q_i_ci95: (f64, Option<f64>),
    /// Diameter-corrected coupling quality factor `Q_c / cos(φ)`.
    pub q_c_corrected: f64,
    /// False when `|φ| ≥ π/2` (diameter correction not physical).
    pub phi_physical: bool,
    pub converged: bool,
    #[serde(skip)]
    pub covariance: Option<nalgebra::DMatrix<f64>>,
}

impl FullFitResult {
    /// Parameter order used by the direct fit (and the bootstrap):
    /// `[a, alpha, phi, q_l, q_c, f_r0, beta]`.
    pub fn param_estimates(&self) -> [ParamEst; 7] {
        [
            self.a,
            self.alpha_rad,
            self.phi_rad,
            self.q_l,
            self.q_c,
            self.f_r0_hz,
            self.beta,
        ]
    }
}

/// Linear-model fit with a free resonance frequency (φ rotation analysis).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiRotationFit {
    pub f_r_hz: ParamEst,
    pub q_l: ParamEst,
    pub q_c: ParamEst,
    pub phi_rad: ParamEst,
    pub q_i: f64,
    pub converged: bool,
}

/// Fits the unwrapped background phase of the raw trace to a line plus a
/// `1/(f - f_dip)` resonance-tail term and reads the cable delay off the
/// linear slope (`-2πτ`). Without the tail term the arctan phase of the
/// resonance, which decays only like `cos(φ)/(2 Q_c x)` outside the excluded
/// window, tilts the line and biases τ. The resonance is excluded either by
/// the caller-provided window or by an automatic dip/FWHM detection.
pub fn fit_cable_delay(
    sweep: &FrequencySweep,
    exclude_window: Option<(f64, f64)>,
) -> Result<DelayFit, PipeError> {
    let n = sweep.freqs_hz.len();
    if n == 0 {
        return Err(PipeError::EmptySweep);
    }
    let window = exclude_window.unwrap_or_else(|| auto_exclude_window(sweep));
    let f_dip = (window.0 + window.1) / 2.0;
    let phases: Vec<f64> = sweep.s21.iter().map(|z| z.arg()).collect();
    let unwrapped = unwrap_phase(&phases, UnwrapMode::Standard, &UnwrapOptions::default());

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (f, p) in sweep.freqs_hz.iter().zip(&unwrapped) {
        if *f < window.0 || *f > window.1 {
            xs.push(*f);
            ys.push(*p);
        }
    }
    if xs.len() < 10 {
        return Err(PipeError::TooFewBackgroundPoints);
    }
    // linear least squares on [1, f - f̄, 1/(f - f_dip)], centered for
    // conditioning; the span scale keeps the columns comparable in size.
    // When the background is a thin shell at the grid edges the tail column
    // is collinear with the linear one (both odd, sampled only at ±X), so
    // the three-column fit is used only when it is well conditioned.
    let fx = xs.iter().sum::<f64>() / xs.len() as f64;
    let span = (xs.last().unwrap() - xs.first().unwrap()).abs().max(1.0);
    let rhs = nalgebra::DVector::from_column_slice(&ys);
    let solve = |cols: usize| -> Result<(nalgebra::DVector<f64>, f64), PipeError> {
        let design = nalgebra::DMatrix::from_fn(xs.len(), cols, |i, j| match j {
            0 => 1.0,
            1 => (xs[i] - fx) / span,
            _ => span / (xs[i] - f_dip),
        });
        let mut normed = design.clone();
        for mut c in normed.column_iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
        }
        let sv = normed.singular_values();
        let cond = sv.min() / sv.max().max(1e-300);
        let coeffs = design
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|_| PipeError::DegenerateGeometry)?;
        Ok((coeffs, cond))
    };
    let (with_tail, cond) = solve(3)?;
    let coeffs = if cond > 1e-2 { with_tail } else { solve(2)?.0 };
    let slope = coeffs[1] / span;
    let intercept = coeffs[0] - slope * fx;
    Ok(DelayFit {
        tau_s: -slope / TAU,
        intercept_rad: intercept,
    })
}

/// Dip location and FWHM from the transmission magnitude.
fn dip_and_fwhm(freqs: &[f64], mags: &[f64]) -> (usize, f64) {
    let n = mags.len();
    let (i_dip, _) = mags
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let edge = (mags[0] + mags[n - 1]) / 2.0;
    let half = (edge + mags[i_dip]) / 2.0;
    let mut lo = i_dip;
    while lo > 0 && mags[lo] < half {
        lo -= 1;
    }
    let mut hi = i_dip;
    while hi + 1 < n && mags[hi] < half {
        hi += 1;
    }
    let fwhm = (freqs[hi] - freqs[lo])
        .abs()
        .max((freqs[n - 1] - freqs[0]).abs() / n as f64);
    (i_dip, fwhm)
}

/// Exclusion window from the transmission dip: dip frequency ± 10 FWHM.
fn auto_exclude_window(sweep: &FrequencySweep) -> (f64, f64) {
    let mags: Vec<f64> = sweep.s21.iter().map(|z| z.norm()).collect();
    let (i_dip, fwhm) = dip_and_fwhm(&sweep.freqs_hz, &mags);
    let f_dip = sweep.freqs_hz[i_dip];
    (f_dip - 10.0 * fwhm, f_dip + 10.0 * fwhm)
}

/// Multiplies each sample by `e^{+i2πfτ}`, the exact inverse of the cable
/// delay factor.
pub fn remove_delay(sweep: &FrequencySweep, tau_s: f64) -> Vec<Complex64> {
    sweep
        .freqs_hz
        .iter()
        .zip(&sweep.s21)
        .map(|(f, z)| z * Complex64::from_polar(1.0, TAU * f * tau_s))
        .collect()
}

/// Centered trace: `z1 = z - z_c` and its circularization
/// `z1_circ = R e^{i∠z1}`. Samples with `z1 ≈ 0` (undefined angle) are
/// flagged invalid and excluded from the phase fit.
#[derive(Debug, Clone)]
pub struct CenteredTrace {
    pub z1: Vec<Complex64>,
    pub z1_circ: Vec<Complex64>,
    pub valid: Vec<bool>,
}

pub fn center_and_circularize(z_trace: &[Complex64], circle: &CircleFit) -> CenteredTrace {
    let center = circle.center();
    let mut z1 = Vec::with_capacity(z_trace.len());
    let mut z1_circ = Vec::with_capacity(z_trace.len());
    let mut valid = Vec::with_capacity(z_trace.len());
    for z in z_trace {
        let d = z - center;
        let ok = d.norm() > 1e-12 * circle.radius;
        z1.push(d);
        z1_circ.push(if ok {
            Complex64::from_polar(circle.radius, d.arg())
        } else {
            Complex64::new(circle.radius, 0.0)
        });
        valid.push(ok);
    }
    CenteredTrace { z1, z1_circ, valid }
}

/// Configuration for the phase fit stage.
#[derive(Debug, Clone)]
pub struct PhaseFitConfig {
    /// Feedline input power in watts, used for the dynamic β initial guess.
    pub p_g_w: Option<f64>,
    /// Empirical constant of the dynamic β guess `β₀ P_g / R`, W⁻¹.
    pub beta0_per_w: f64,
    pub unwrap_mode: UnwrapMode,
    pub unwrap_options: UnwrapOptions,
    /// Optional overrides for the automatic initial guesses
    /// `[q_l, f_r0, beta, theta]`.
    pub init_overrides: [Option<f64>; 4],
    pub options: FitOptions,
}

impl Default for PhaseFitConfig {
    fn default() -> Self {
        Self {
            p_g_w: None,
            beta0_per_w: 1e9,
            unwrap_mode: UnwrapMode::Standard,
            unwrap_options: UnwrapOptions::default(),
            init_overrides: [None; 4],
            options: FitOptions::default(),
        }
    }
}

fn phase_model(
    freqs: &[f64],
    z1_circ: &[Complex64],
    radius: f64,
    p: &[f64],
    out: &mut [f64],
) {
    let (q_l, f_r0, beta, theta) = (p[0], p[1], p[2], p[3]);
    let z1_off = Complex64::from_polar(radius, PI - theta);
    for i in 0..freqs.len() {
        let u = (z1_circ[i] - z1_off).norm_sqr();
        let fr = f_r0 * (1.0 - beta * u);
        out[i] = 2.0 * (2.0 * q_l * (1.0 - freqs[i] / fr)).atan() - theta;
    }
}

/// Automatic initial guesses from the unwrapped phase: the resonance sits at
/// the steepest phase point, the FWHM is the spacing between the ±π/2 phase
/// crossings, and the off-resonance angle comes from the trace endpoints.
fn phase_inits(freqs: &[f64], angles: &[f64], z1: &[Complex64]) -> (f64, f64, f64) {
    let smooth = unwrap_phase(
        angles,
        UnwrapMode::Smoothed,
        &UnwrapOptions {
            sigma_points: 2.0,
            ..Default::default()
        },
    );
    let n = freqs.len();
    let mut i_peak = n / 2;
    let mut steepest = 0.0;
    for i in 1..n {
        let df = freqs[i] - freqs[i - 1];
        if df == 0.0 {
            continue;
        }
        let s = ((smooth[i] - smooth[i - 1]) / df).abs();
        if s > steepest {
            steepest = s;
            i_peak = i;
        }
    }
    let f_peak = freqs[i_peak];
    let mid = smooth[i_peak];
    // phase decreases through resonance; find the ±π/2 crossings
    let mut f_lo = freqs[0];
    for i in (0..i_peak).rev() {
        if (smooth[i] - mid).abs() >= PI / 2.0 {
            f_lo = freqs[i];
            break;
        }
    }
    let mut f_hi = freqs[n - 1];
    for (i, s) in smooth.iter().enumerate().skip(i_peak) {
        if (s - mid).abs() >= PI / 2.0 {
            f_hi = freqs[i];
            break;
        }
    }
    let span = (freqs[n - 1] - freqs[0]).abs();
    let mut fwhm = (f_hi - f_lo).abs();
    if fwhm <= 0.0 {
        fwhm = span / 10.0;
    }
    let q_l_init = (f_peak / fwhm).max(1.0);

    // circular mean of a few wrapped endpoint angles gives π - θ
    let take = (n / 20).clamp(1, 8);
    let mut acc = Complex64::new(0.0, 0.0);
    for z in z1.iter().take(take).chain(z1.iter().rev().take(take)) {
        acc += z / z.norm().max(1e-300);
    }
    let theta_init = PI - acc.arg();
    (q_l_init, f_peak, theta_init)
}

/// Four-parameter phase fit (`Q_l`, `f_r0`, `β`, `θ`) of the unwrapped
/// centered-trace angle against the nonlinear phase model, with the measured
/// circularized trace substituted into the nonlinear term.
pub fn phase_fit(
    freqs: &[f64],
    trace: &CenteredTrace,
    radius: f64,
    config: &PhaseFitConfig,
) -> Result<PhaseFitResult, PipeError> {
    let mut fs = Vec::new();
    let mut zc = Vec::new();
    let mut z1v = Vec::new();
    for i in 0..freqs.len() {
        if trace.valid[i] {
            fs.push(freqs[i]);
            zc.push(trace.z1_circ[i]);
            z1v.push(trace.z1[i]);
        }
    }
    if fs.len() < 8 {
        return Err(PipeError::TooFewPoints {
            needed: 8,
            got: fs.len(),
        });
    }

    let angles: Vec<f64> = z1v.iter().map(|z| z.arg()).collect();
    let unwrapped = unwrap_phase(&angles, config.unwrap_mode, &config.unwrap_options);

    let (ql0, f0, th0) = phase_inits(&fs, &angles, &z1v);
    // dynamic guess, clamped so the implied starting nonlinearity a_n0 =
    // 4βQ_lR² stays at or below 1 (a wild guess cannot strand the fit)
    let beta_cap = 1.0 / (4.0 * ql0 * radius * radius);
    let beta_guess = config
        .p_g_w
        .map(|p| (config.beta0_per_w * p / radius).min(beta_cap))
        .unwrap_or(0.0);
    let init = [
        config.init_overrides[0].unwrap_or(ql0),
        config.init_overrides[1].unwrap_or(f0),
        config.init_overrides[2].unwrap_or(beta_guess),
        config.init_overrides[3].unwrap_or(th0),
    ];

    // pin the 2π branch of the data to the model at the initial guess
    let mut model0 = vec![0.0; fs.len()];
    phase_model(&fs, &zc, radius, &init, &mut model0);
    let mean_diff = unwrapped
        .iter()
        .zip(&model0)
        .map(|(d, m)| d - m)
        .sum::<f64>()
        / fs.len() as f64;
    let shift = TAU * (mean_diff / TAU).round();
    let data: Vec<f64> = unwrapped.iter().map(|d| d - shift).collect();

    let f_min = fs.first().unwrap().min(*fs.last().unwrap());
    let f_max = fs.first().unwrap().max(*fs.last().unwrap());
    let problem = FitProblem::new(4, fs.len(), |p, out| {
        phase_model(&fs, &zc, radius, p, out);
        for (o, d) in out.iter_mut().zip(&data) {
            *o -= d;
        }
    })?
    .with_bounds(
        vec![1.0, f_min, 0.0, f64::NEG_INFINITY],
        vec![f64::INFINITY, f_max, f64::INFINITY, f64::INFINITY],
    )?;

    let mut fit = lm_fit(&problem, &init, config.options)?;
    if init[2] > 0.0 && config.init_overrides[2].is_none() {
        // a linear start sometimes wins when the dynamic β guess is poor
        let linear_init = [init[0], init[1], 0.0, init[3]];
        let alt = lm_fit(&problem, &linear_init, config.options)?;
        if alt.residual_norm < fit.residual_norm {
            fit = alt;
        }
    }
    Ok(PhaseFitResult {
        q_l: ParamEst {
            value: fit.params[0],
            se: fit.standard_errors[0],
        },
        f_r0_hz: ParamEst {
            value: fit.params[1],
            se: fit.standard_errors[1],
        },
        beta: ParamEst {
            value: fit.params[2],
            se: fit.standard_errors[2],
        },
        theta_rad: ParamEst {
            value: fit.params[3],
            se: fit.standard_errors[3],
        },
        dof: fit.dof,
        residual_norm: fit.residual_norm,
        converged: fit.converged,
    })
}

/// Direct-fit residuals: re/im components of `z_i - z_fit(f_i, z_i)` (two
/// per sample, so the objective is the usual `Σ|z_i - z_fit|²`), with the
/// measured trace substituted into the nonlinear frequency-shift term.
/// Parameter order: `[a, alpha, phi, q_l, q_c, f_r0, beta]`.
pub(crate) fn direct_residuals(
    freqs: &[f64],
    z_trace: &[Complex64],
    p: &[f64],
    out: &mut [f64],
) {
    let (a, alpha, phi, q_l, q_c, f_r0, beta) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
    let z_off = Complex64::from_polar(a, alpha);
    let dip_amp = Complex64::from_polar(q_l / q_c, phi);
    for i in 0..freqs.len() {
        let u = (z_trace[i] - z_off).norm_sqr();
        let fr = f_r0 * (1.0 - beta * u);
        let detune = Complex64::new(1.0, 2.0 * q_l * (freqs[i] / fr - 1.0));
        let model = z_off * (Complex64::new(1.0, 0.0) - dip_amp / detune);
        let d = z_trace[i] - model;
        out[2 * i] = d.re;
        out[2 * i + 1] = d.im;
    }
}

/// One-dimensional refinement of φ with every other parameter frozen.
/// Returns the refined φ, or the initial value (flagged) on non-convergence.
pub fn phi_correction(
    freqs: &[f64],
    z_trace: &[Complex64],
    fixed: &[f64; 7],
    phi_init: f64,
    options: FitOptions,
) -> Result<(f64, bool), PipeError> {
    let problem = FitProblem::new(1, 2 * freqs.len(), |p, out| {
        let mut full = *fixed;
        full[2] = p[0];
        direct_residuals(freqs, z_trace, &full, out);
    })?;
    let fit = lm_fit(&problem, &[phi_init], options)?;
    if fit.converged {
        Ok((fit.params[0], true))
    } else {
        Ok((phi_init, false))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(TAU) - PI;
    if x == -PI {
        x = PI;
    }
    x
}

fn derive_qi_block(
    q_l: f64,
    q_c: f64,
    phi: f64,
    dof: usize,
    covariance: Option<&nalgebra::DMatrix<f64>>,
    idx: (usize, usize, usize),
) -> (f64, (f64, Option<f64>)) {
    let inv_qi = 1.0 / q_l - phi.cos() / q_c;
    let q_i = 1.0 / inv_qi;
    let ci = covariance
        .and_then(|cov| {
            // gradient of 1/Q_i wrt (q_l, q_c, phi)
            let g = [
                -1.0 / (q_l * q_l),
                phi.cos() / (q_c * q_c),
                phi.sin() / q_c,
            ];
            let order = [idx.0, idx.1, idx.2];
            let mut var = 0.0;
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    var += gi * gj * cov[(order[i], order[j])];
                }
            }
            if !(var.is_finite() && var >= 0.0) || dof == 0 {
                return None;
            }
            let t = numcore::student_t_quantile(dof, 0.975).ok()?;
            let half = t * var.sqrt();
            let lo_inv = inv_qi + half;
            let hi_inv = inv_qi - half;
            let lower = 1.0 / lo_inv;
            let upper = if hi_inv > 0.0 { Some(1.0 / hi_inv) } else { None };
            Some((lower, upper))
        })
        .unwrap_or((f64::NAN, None));
    (q_i, ci)
}

/// Final seven-parameter complex fit. `inits` in the order
/// `[a, alpha, phi, q_l, q_c, f_r0, beta]`; `tau_s` is carried through.
pub fn direct_fit(
    freqs: &[f64],
    z_trace: &[Complex64],
    inits: &[f64; 7],
    tau_s: f64,
    options: FitOptions,
) -> Result<FullFitResult, PipeError> {
    if freqs.len() < 8 {
        return Err(PipeError::TooFewPoints {
            needed: 8,
            got: freqs.len(),
        });
    }
    let f_min = freqs.first().unwrap().min(*freqs.last().unwrap());
    let problem = FitProblem::new(7, 2 * freqs.len(), |p, out| {
        direct_residuals(freqs, z_trace, p, out);
    })?
    .with_bounds(
        vec![1e-12, f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0, 1.0, f_min, 0.0],
        vec![f64::INFINITY; 7],
    )?;
    let fit = lm_fit(&problem, inits, options)?;

    let p = &fit.params;
    let phi = wrap_angle(p[2]);
    let (q_i, q_i_ci95) = derive_qi_block(p[3], p[4], phi, fit.dof, fit.covariance.as_ref(), (3, 4, 2));
    let est = |k: usize| ParamEst {
        value: fit.params[k],
        se: fit.standard_errors[k],
    };
    Ok(FullFitResult {
        a: est(0),
        alpha_rad: ParamEst {
            value: wrap_angle(p[1]),
            se: fit.standard_errors[1],
        },
        phi_rad: ParamEst {
            value: phi,
            se: fit.standard_errors[2],
        },
        q_l: est(3),
        q_c: est(4),
        f_r0_hz: est(5),
        beta: est(6),
        tau_s,
        dof: fit.dof,
        residual_norm: fit.residual_norm,
        q_i,
        q_i_ci95,
        q_c_corrected: p[4] / phi.cos(),
        phi_physical: phi.abs() < PI / 2.0,
        converged: fit.converged,
        covariance: fit.covariance,
    })
}

/// Fits the LINEAR hanger model with a free resonance frequency
/// (no β term), for per-power `f_r(P)` and `Q_i(P)` trend extraction.
pub fn phi_rotation_fit(
    freqs: &[f64],
    z_trace: &[Complex64],
    inits: &[f64; 6],
    options: FitOptions,
) -> Result<PhiRotationFit, PipeError> {
    if freqs.len() < 7 {
        return Err(PipeError::TooFewPoints {
            needed: 7,
            got: freqs.len(),
        });
    }
    let f_min = freqs.first().unwrap().min(*freqs.last().unwrap());
    let problem = FitProblem::new(6, 2 * freqs.len(), |p, out| {
        let full = [p[0], p[1], p[2], p[3], p[4], p[5], 0.0];
        direct_residuals(freqs, z_trace, &full, out);
    })?
    .with_bounds(
        vec![1e-12, f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0, 1.0, f_min],
        vec![f64::INFINITY; 6],
    )?;
    let fit = lm_fit(&problem, inits, options)?;
    let p = &fit.params;
    let phi = wrap_angle(p[2]);
    let (q_i, _) = derive_qi_block(p[3], p[4], phi, fit.dof, fit.covariance.as_ref(), (3, 4, 2));
    let est = |k: usize| ParamEst {
        value: fit.params[k],
        se: fit.standard_errors[k],
    };
    Ok(PhiRotationFit {
        f_r_hz: est(5),
        q_l: est(3),
        q_c: est(4),
        phi_rad: ParamEst {
            value: phi,
            se: fit.standard_errors[2],
        },
        q_i,
        converged: fit.converged,
    })
}

/// Pipeline configuration. All thresholds are overridable; the defaults
/// match the documented analysis procedure.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Skip the delay fit and use this τ instead.
    pub tau_override_s: Option<f64>,
    /// Frequency window excluded from the delay background fit.
    pub exclude_window_hz: Option<(f64, f64)>,
    /// Force an unwrap mode instead of the SNR/nonlinearity auto-selection.
    pub unwrap_mode: Option<UnwrapMode>,
    pub beta0_per_w: f64,
    /// Below this estimated SNR the smoothed unwrap is used.
    pub snr_threshold_db: f64,
    /// Above this preliminary nonlinearity estimate the bifurcation-aware
    /// unwrap is used.
    pub nonlinearity_threshold: f64,
    /// Half-width, in dip FWHMs, of the window around the resonance that the
    /// circle/phase/direct stages operate on. Wide scans are cropped to this
    /// so residual delay twist far from resonance cannot bias the fit.
    pub fit_window_fwhm: f64,
    pub options: FitOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_override_s: None,
            exclude_window_hz: None,
            unwrap_mode: None,
            beta0_per_w: 1e9,
            snr_threshold_db: 20.0,
            nonlinearity_threshold: 0.05,
            fit_window_fwhm: 30.0,
            options: FitOptions::default(),
        }
    }
}

/// Per-stage diagnostics recorded by [`full_pipeline`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub tau_s: f64,
    pub delay_intercept_rad: f64,
    pub circle: CircleFit,
    pub snr_db_estimate: f64,
    pub unwrap_mode: UnwrapMode,
    pub phase_fit: PhaseFitResult,
    pub phi_init_rad: f64,
    pub phi_correction_converged: bool,
    /// Preliminary nonlinearity estimate `4 β Q_l R²` from the phase fit.
    pub a_n0_estimate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResult {
    pub fit: FullFitResult,
    pub diagnostics: PipelineDiagnostics,
}

/// Noise variance estimate from adjacent-sample differences near the trace
/// edges (off resonance the model varies slowly, so differences are noise).
fn noise_sigma2(z: &[Complex64]) -> Option<f64> {
    let n = z.len();
    if n < 4 {
        return None;
    }
    let take = (n / 10).max(2);
    let mut diffs = Vec::new();
    for w in z.iter().take(take).collect::<Vec<_>>().windows(2) {
        diffs.push((w[1] - w[0]).norm_sqr());
    }
    for w in z.iter().rev().take(take).collect::<Vec<_>>().windows(2) {
        diffs.push((w[1] - w[0]).norm_sqr());
    }
    let sigma2 = diffs.iter().sum::<f64>() / diffs.len() as f64 / 4.0;
    (sigma2 > 0.0).then_some(sigma2)
}

/// Off-resonance SNR estimate in dB from adjacent-sample differences.
fn estimate_snr_db(z: &[Complex64]) -> f64 {
    let n = z.len();
    let Some(sigma2) = noise_sigma2(z) else {
        return f64::INFINITY;
    };
    let amp = (z[0].norm() + z[n - 1].norm()) / 2.0;
    10.0 * (amp * amp / sigma2).log10()
}

/// Detects a bifurcation-like phase drop: a wrapped-difference fall with
/// magnitude between 1.1π and 1.9π (a real wrap would be ~2π).
fn has_bifurcation_drop(angles: &[f64], direction: SweepDirection) -> bool {
    let sign = match direction {
        SweepDirection::Up => 1.0,
        SweepDirection::Down => -1.0,
    };
    angles.windows(2).any(|w| {
        let d = sign * (w[1] - w[0]);
        (-1.9 * PI..-1.1 * PI).contains(&d)
    })
}

/// Runs the full staged fit: delay fit → removal → circle fit → unwrap →
/// phase fit → φ correction → direct fit.
pub fn full_pipeline(
    sweep: &FrequencySweep,
    config: &PipelineConfig,
) -> Result<PipelineResult, PipeError> {
    let n = sweep.freqs_hz.len();
    if n == 0 {
        return Err(PipeError::EmptySweep);
    }
    if n < 20 {
        return Err(PipeError::TooFewPoints { needed: 20, got: n });
    }
    if !sweep
        .freqs_hz
        .windows(2)
        .all(|w| w[1] > w[0])
    {
        return Err(PipeError::NonMonotonicGrid);
    }

    // stage 1: cable delay, fixed afterwards
    let delay = match config.tau_override_s {
        Some(tau) => DelayFit {
            tau_s: tau,
            intercept_rad: 0.0,
        },
        None => fit_cable_delay(sweep, config.exclude_window_hz).map_err(at_stage("delay"))?,
    };

    // stage 2: delay removal, crop to the resonance window, circle fit
    let z_full = remove_delay(sweep, delay.tau_s);
    let mags: Vec<f64> = z_full.iter().map(|z| z.norm()).collect();
    let (i_dip, fwhm) = dip_and_fwhm(&sweep.freqs_hz, &mags);
    let half_window = config.fit_window_fwhm * fwhm;
    let f_dip = sweep.freqs_hz[i_dip];
    let lo = sweep.freqs_hz.partition_point(|&f| f < f_dip - half_window);
    let hi = sweep.freqs_hz.partition_point(|&f| f <= f_dip + half_window);
    let (lo, hi) = if hi - lo >= 20 { (lo, hi) } else { (0, n) };
    let freqs = &sweep.freqs_hz[lo..hi];
    let z = &z_full[lo..hi];

    let circle = circle_fit(z).map_err(at_stage("circle"))?;
    let centered = center_and_circularize(z, &circle);

    // stage 3: unwrap-mode selection and phase fit
    let snr_db = estimate_snr_db(z);
    // the phase fit works on angles around the circle, so the relevant SNR
    // is radius over noise, not amplitude over noise: weak coupling makes
    // the circle much smaller than the trace amplitude
    let circle_snr_db = noise_sigma2(z)
        .map(|s2| 10.0 * (circle.radius * circle.radius / s2).log10())
        .unwrap_or(f64::INFINITY);
    let effective_snr_db = snr_db.min(circle_snr_db);
    let p_g = sweep.generator_power_w();
    let angles: Vec<f64> = centered.z1.iter().map(|z| z.arg()).collect();

    let make_cfg = |mode: UnwrapMode| PhaseFitConfig {
        p_g_w: Some(p_g),
        beta0_per_w: config.beta0_per_w,
        unwrap_mode: mode,
        unwrap_options: UnwrapOptions {
            direction: sweep.sweep_direction,
            ..Default::default()
        },
        init_overrides: [None; 4],
        options: config.options,
    };

    let (mode, phase) = match config.unwrap_mode {
        Some(m) => (
            m,
            phase_fit(freqs, &centered, circle.radius, &make_cfg(m)).map_err(at_stage("phase"))?,
        ),
        None if effective_snr_db < config.snr_threshold_db => (
            UnwrapMode::Smoothed,
            phase_fit(
                freqs,
                &centered,
                circle.radius,
                &make_cfg(UnwrapMode::Smoothed),
            )
            .map_err(at_stage("phase"))?,
        ),
        None => {
            // fit against the standard unwrap; on any evidence of a
            // bifurcation (an in-band phase fall, or a nonlinear β estimate)
            // also fit against the bifurcation-aware unwrap and keep the
            // lower-residual interpretation. Noise-triggered false evidence
            // self-corrects because the corrupted unwrap fits worse.
            let std_fit = phase_fit(
                freqs,
                &centered,
                circle.radius,
                &make_cfg(UnwrapMode::Standard),
            );
            let consider_aware = has_bifurcation_drop(&angles, sweep.sweep_direction)
                || match &std_fit {
                    Ok(p) => {
                        4.0 * p.beta.value * p.q_l.value * circle.radius * circle.radius
                            > config.nonlinearity_threshold
                    }
                    Err(_) => true,
                };
            if consider_aware {
                let aware_fit = phase_fit(
                    freqs,
                    &centered,
                    circle.radius,
                    &make_cfg(UnwrapMode::BifurcationAware),
                );
                match (std_fit, aware_fit) {
                    (Ok(s), Ok(a)) => {
                        if a.residual_norm < s.residual_norm {
                            (UnwrapMode::BifurcationAware, a)
                        } else {
                            (UnwrapMode::Standard, s)
                        }
                    }
                    (Ok(s), Err(_)) => (UnwrapMode::Standard, s),
                    (Err(_), Ok(a)) => (UnwrapMode::BifurcationAware, a),
                    (Err(e), Err(_)) => return Err(at_stage("phase")(e)),
                }
            } else {
                (
                    UnwrapMode::Standard,
                    std_fit.map_err(at_stage("phase"))?,
                )
            }
        }
    };

    // stage 4: initial values for the direct fit
    let theta = phase.theta_rad.value;
    let z_off = circle.center() + Complex64::from_polar(circle.radius, PI - theta);
    let a_init = z_off.norm().max(1e-12);
    let alpha_init = z_off.arg();
    let q_c_init = (phase.q_l.value * a_init / (2.0 * circle.radius)).max(1.0);
    let phi_init = wrap_angle(PI - alpha_init - theta);

    let mut params = [
        a_init,
        alpha_init,
        phi_init,
        phase.q_l.value,
        phase.f_r0_hz.value, // placeholder, fixed two lines below
        phase.f_r0_hz.value,
        phase.beta.value,
    ];
    params[4] = q_c_init;

    // stage 5: φ correction with everything else frozen
    let (phi_corr, phi_conv) =
        phi_correction(freqs, z, &params, phi_init, config.options)
            .map_err(at_stage("phi_correction"))?;
    params[2] = phi_corr;

    // stage 6: direct complex fit
    let fit = direct_fit(freqs, z, &params, delay.tau_s, config.options)
        .map_err(at_stage("direct"))?;

    let a_n0_estimate =
        4.0 * phase.beta.value * phase.q_l.value * circle.radius * circle.radius;
    Ok(PipelineResult {
        fit,
        diagnostics: PipelineDiagnostics {
            tau_s: delay.tau_s,
            delay_intercept_rad: delay.intercept_rad,
            circle,
            snr_db_estimate: snr_db,
            unwrap_mode: mode,
            phase_fit: phase,
            phi_init_rad: phi_init,
            phi_correction_converged: phi_conv,
            a_n0_estimate,
        },
    })
}
