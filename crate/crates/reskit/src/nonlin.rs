//! Nonlinearity extraction: per-sample stored energy and fractional
//! frequency shift, scaling energy E* by origin regression, the
//! nonlinearity parameter a_n0, parametric-bootstrap confidence intervals,
//! cross-power aggregation, and the condensation-energy benchmark.

use crate::numcore::{linreg_origin, student_t_draw, NumError};
use crate::phys::{BOLTZMANN_KB, ELECTRON_VOLT, HBAR};
use crate::respipe::FullFitResult;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NonlinError {
    #[error("parameter `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("trace is linear (all frequency shifts zero); E* is undefined")]
    LinearTrace,
    #[error("fit carries no degrees of freedom for the bootstrap")]
    NoDof,
    #[error("no usable points after exclusions")]
    NothingUsable,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Scaling energy with its regression standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingEnergy {
    pub e_star_j: f64,
    pub se_j: f64,
    pub dof: usize,
}

/// Stored energy per sample: `E(f) = (2Q_l²/Q_c)·(1/(1+4Q_l²x²))·(P_g/ω_r)`
/// with `x = (f - f_r)/f_r` and `f_r` from the fitted β and the measured
/// trace.
pub fn stored_energy(
    fit: &FullFitResult,
    p_g_w: f64,
    freqs: &[f64],
    z_trace: &[Complex64],
) -> Vec<f64> {
    stored_energy_params(
        fit.q_l.value,
        fit.q_c.value,
        fit.f_r0_hz.value,
        fit.beta.value,
        Complex64::from_polar(fit.a.value, fit.alpha_rad.value),
        p_g_w,
        freqs,
        z_trace,
    )
}

#[allow(clippy::too_many_arguments)]
fn stored_energy_params(
    q_l: f64,
    q_c: f64,
    f_r0: f64,
    beta: f64,
    z_off: Complex64,
    p_g_w: f64,
    freqs: &[f64],
    z_trace: &[Complex64],
) -> Vec<f64> {
    freqs
        .iter()
        .zip(z_trace)
        .map(|(&f, z)| {
            let f_r = f_r0 * (1.0 - beta * (z - z_off).norm_sqr());
            let x = (f - f_r) / f_r;
            let lorentz = 1.0 / (1.0 + 4.0 * q_l * q_l * x * x);
            2.0 * q_l * q_l / q_c * lorentz * p_g_w / (TAU * f_r)
        })
        .collect()
}

/// Fractional frequency shift per sample: `δx = -β|z - z_off|²`.
pub fn freq_shift(fit: &FullFitResult, z_trace: &[Complex64]) -> Vec<f64> {
    let z_off = Complex64::from_polar(fit.a.value, fit.alpha_rad.value);
    freq_shift_params(fit.beta.value, z_off, z_trace)
}

fn freq_shift_params(beta: f64, z_off: Complex64, z_trace: &[Complex64]) -> Vec<f64> {
    z_trace
        .iter()
        .map(|z| -beta * (z - z_off).norm_sqr())
        .collect()
}

/// `E* = -slope` of the origin regression of E against δx.
pub fn extract_scaling_energy(
    energies: &[f64],
    shifts: &[f64],
) -> Result<ScalingEnergy, NonlinError> {
    if shifts.iter().all(|d| *d == 0.0) {
        return Err(NonlinError::LinearTrace);
    }
    let fit = linreg_origin(shifts, energies)?;
    Ok(ScalingEnergy {
        e_star_j: -fit.slope,
        se_j: fit.slope_se,
        dof: fit.dof,
    })
}

/// `a_n0 = (2Q_l³/Q_c)·P_g/(ω_r0·E*)`.
pub fn nonlinearity_parameter(
    q_l: f64,
    q_c: f64,
    f_r0_hz: f64,
    p_g_w: f64,
    e_star_j: f64,
) -> Result<f64, NonlinError> {
    for (name, v) in [
        ("q_l", q_l),
        ("q_c", q_c),
        ("f_r0_hz", f_r0_hz),
        ("p_g_w", p_g_w),
        ("e_star_j", e_star_j),
    ] {
        if !(v > 0.0) {
            return Err(NonlinError::NonPositive(name));
        }
    }
    Ok(2.0 * q_l.powi(3) / q_c * p_g_w / (TAU * f_r0_hz * e_star_j))
}

/// Bootstrap sample set with its percentile bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapDistribution {
    pub samples: Vec<f64>,
    pub p2_5: f64,
    pub p97_5: f64,
    pub point_estimate: f64,
}

impl BootstrapDistribution {
    fn from_samples(mut samples: Vec<f64>, point_estimate: f64) -> Self {
        let mut sorted: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |p: f64| -> f64 {
            if sorted.is_empty() {
                return f64::NAN;
            }
            // nearest-rank order statistic
            let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[k - 1]
        };
        let (p2_5, p97_5) = (pick(0.025), pick(0.975));
        samples.shrink_to_fit();
        Self {
            samples,
            p2_5,
            p97_5,
            point_estimate,
        }
    }
}

/// Options for [`bootstrap_nonlin`].
#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub iterations: usize,
    pub seed: u64,
    /// Perturb parameters jointly via the fit covariance instead of
    /// independent per-parameter draws (not the default).
    pub use_covariance: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            seed: 0,
            use_covariance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonlinBootstrap {
    pub e_star: BootstrapDistribution,
    pub a_n0: BootstrapDistribution,
}

fn e_star_a_n0_for_params(
    p: &[f64; 7],
    p_g_w: f64,
    freqs: &[f64],
    z_trace: &[Complex64],
) -> (f64, f64) {
    let (a, alpha, _phi, q_l, q_c, f_r0, beta) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
    if !(a > 0.0 && q_l > 0.0 && q_c > 0.0 && f_r0 > 0.0 && beta > 0.0) {
        return (f64::NAN, f64::NAN);
    }
    let z_off = Complex64::from_polar(a, alpha);
    let shifts = freq_shift_params(beta, z_off, z_trace);
    let energies = stored_energy_params(q_l, q_c, f_r0, beta, z_off, p_g_w, freqs, z_trace);
    match extract_scaling_energy(&energies, &shifts) {
        Ok(s) if s.e_star_j > 0.0 => {
            let a_n0 = 2.0 * q_l.powi(3) / q_c * p_g_w / (TAU * f_r0 * s.e_star_j);
            (s.e_star_j, a_n0)
        }
        _ => (f64::NAN, f64::NAN),
    }
}

/// Parametric bootstrap: every iteration independently perturbs each fit
/// parameter as `p0 + SE·t(dof)` (`f`, `z(f)`, and `P_g` held constant),
/// recomputes E* and a_n0, and the 2.5/97.5 percentiles bound the CI.
/// Deterministic for a given seed at any worker count: iteration `i` uses
/// RNG stream `i` of the base seed.
pub fn bootstrap_nonlin(
    fit: &FullFitResult,
    p_g_w: f64,
    freqs: &[f64],
    z_trace: &[Complex64],
    options: &BootstrapOptions,
) -> Result<NonlinBootstrap, NonlinError> {
    if fit.dof == 0 {
        return Err(NonlinError::NoDof);
    }
    let p0: Vec<f64> = fit.param_estimates().iter().map(|e| e.value).collect();
    let ses: Vec<f64> = fit.param_estimates().iter().map(|e| e.se).collect();
    let dof = fit.dof;

    // optional joint perturbation via the Cholesky factor of the covariance
    let chol = if options.use_covariance {
        fit.covariance.as_ref().and_then(|c| c.clone().cholesky())
    } else {
        None
    };

    let (point_e_star, point_a_n0) = e_star_a_n0_for_params(
        &[p0[0], p0[1], p0[2], p0[3], p0[4], p0[5], p0[6]],
        p_g_w,
        freqs,
        z_trace,
    );

    let pairs: Vec<(f64, f64)> = (0..options.iterations)
        .into_par_iter()
        .map(|i| {
            use rand::SeedableRng;
            use rand_chacha::rand_core::RngCore;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(i as u64);
            let _ = rng.next_u64();
            let mut draws = [0.0; 7];
            for d in draws.iter_mut() {
                *d = student_t_draw(dof, &mut rng).expect("dof checked above");
            }
            let mut p = [0.0; 7];
            if let Some(l) = &chol {
                let lm = l.l();
                for j in 0..7 {
                    let mut delta = 0.0;
                    for (k, d) in draws.iter().enumerate() {
                        delta += lm[(j, k)] * d;
                    }
                    p[j] = p0[j] + delta;
                }
            } else {
                for j in 0..7 {
                    p[j] = p0[j] + ses[j] * draws[j];
                }
            }
            e_star_a_n0_for_params(&p, p_g_w, freqs, z_trace)
        })
        .collect();

    let e_samples: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let a_samples: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(NonlinBootstrap {
        e_star: BootstrapDistribution::from_samples(e_samples, point_e_star),
        a_n0: BootstrapDistribution::from_samples(a_samples, point_a_n0),
    })
}

/// Weighted average of per-power E* values with weights `1/(CI width)²`.
/// Points with a nonpositive CI width are excluded; the number excluded is
/// returned alongside.
pub fn weighted_e_star(
    values_j: &[f64],
    ci_widths_j: &[f64],
) -> Result<(f64, usize), NonlinError> {
    if values_j.len() != ci_widths_j.len() {
        return Err(NonlinError::Num(NumError::MismatchedLengths));
    }
    let mut vals = Vec::new();
    let mut weights = Vec::new();
    let mut excluded = 0;
    for (v, w) in values_j.iter().zip(ci_widths_j) {
        if *w > 0.0 {
            vals.push(*v);
            weights.push(1.0 / (w * w));
        } else {
            excluded += 1;
        }
    }
    if vals.is_empty() {
        return Err(NonlinError::NothingUsable);
    }
    Ok((crate::numcore::weighted_mean(&vals, &weights)?, excluded))
}

/// Inputs for the condensation-energy benchmark.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CondensationInputs {
    /// Single-spin density of states, μm⁻³·eV⁻¹.
    pub n0_per_um3_ev: f64,
    /// Critical temperature, K.
    pub t_c_k: f64,
    /// Superconductor volume, μm³.
    pub volume_um3: f64,
}

/// `E_cond = N₀Δ²V/2` with the BCS gap `Δ = 1.75·k_B·T_c`, in joules.
pub fn condensation_energy(inputs: &CondensationInputs) -> Result<f64, NonlinError> {
    for (name, v) in [
        ("n0_per_um3_ev", inputs.n0_per_um3_ev),
        ("t_c_k", inputs.t_c_k),
        ("volume_um3", inputs.volume_um3),
    ] {
        if !(v > 0.0) {
            return Err(NonlinError::NonPositive(name));
        }
    }
    let delta_j = 1.75 * BOLTZMANN_KB * inputs.t_c_k;
    let n0_per_um3_j = inputs.n0_per_um3_ev / ELECTRON_VOLT;
    Ok(n0_per_um3_j * delta_j * delta_j * inputs.volume_um3 / 2.0)
}

/// Full nonlinearity extraction for one trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonlinExtraction {
    pub e_star_j: f64,
    pub e_star_ci95_j: (f64, f64),
    /// E* in units of the resonant photon energy ħω_r0.
    pub e_star_photons: f64,
    pub a_n0: f64,
    pub a_n0_ci95: (f64, f64),
    pub energies_j: Vec<f64>,
    pub shifts: Vec<f64>,
    pub bootstrap_iterations: usize,
    pub seed: u64,
}

/// Runs the whole extraction: shifts, energies, origin regression, and the
/// bootstrap CIs.
pub fn analyze_nonlin(
    fit: &FullFitResult,
    p_g_w: f64,
    freqs: &[f64],
    z_trace: &[Complex64],
    options: &BootstrapOptions,
) -> Result<NonlinExtraction, NonlinError> {
    let shifts = freq_shift(fit, z_trace);
    let energies = stored_energy(fit, p_g_w, freqs, z_trace);
    let scaling = extract_scaling_energy(&energies, &shifts)?;
    let a_n0 = nonlinearity_parameter(
        fit.q_l.value,
        fit.q_c.value,
        fit.f_r0_hz.value,
        p_g_w,
        scaling.e_star_j,
    )?;
    let boot = bootstrap_nonlin(fit, p_g_w, freqs, z_trace, options)?;
    let omega = TAU * fit.f_r0_hz.value;
    Ok(NonlinExtraction {
        e_star_j: scaling.e_star_j,
        e_star_ci95_j: (boot.e_star.p2_5, boot.e_star.p97_5),
        e_star_photons: scaling.e_star_j / (HBAR * omega),
        a_n0,
        a_n0_ci95: (boot.a_n0.p2_5, boot.a_n0.p97_5),
        energies_j: energies,
        shifts,
        bootstrap_iterations: options.iterations,
        seed: options.seed,
    })
}
