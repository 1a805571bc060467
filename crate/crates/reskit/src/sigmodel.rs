//! Forward model of hanger-coupled resonators: linear and kinetic-inductance
//! nonlinear transmission evaluation, plus synthetic sweep generation.
//!
//! The nonlinear response is found by reducing the implicit transmission
//! equation to a real cubic in `u = |z - z_off|²` and tracking roots by
//! continuation, which stays well-behaved inside the bifurcation region.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("beta must be nonnegative")]
    NegativeBeta,
    #[error("no admissible root of the nonlinear response equation at f = {0} Hz")]
    NoRoot(f64),
    #[error("frequency grid must contain at least 2 points")]
    GridTooSmall,
}

/// Hanger-model parameters: off-resonance amplitude `a` and phase `alpha`,
/// cable delay `tau`, impedance-mismatch phase `phi`, loaded and coupling
/// quality factors, linear-regime resonance frequency and the dimensionless
/// nonlinearity coefficient `beta` (0 for a linear resonator).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResonatorParams {
    pub a: f64,
    pub alpha: f64,
    pub tau: f64,
    pub phi: f64,
    pub q_l: f64,
    pub q_c: f64,
    pub f_r0: f64,
    pub beta: f64,
}

impl ResonatorParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.a <= 0.0 {
            return Err(ModelError::NonPositive("a"));
        }
        if self.q_l <= 0.0 {
            return Err(ModelError::NonPositive("q_l"));
        }
        if self.q_c <= 0.0 {
            return Err(ModelError::NonPositive("q_c"));
        }
        if self.f_r0 <= 0.0 {
            return Err(ModelError::NonPositive("f_r0"));
        }
        if self.beta < 0.0 {
            return Err(ModelError::NegativeBeta);
        }
        Ok(())
    }

    /// Off-resonance point `a·e^{iα}`.
    pub fn z_off(&self) -> Complex64 {
        Complex64::from_polar(self.a, self.alpha)
    }

    /// On-resonance `u = |z - z_off|²` in the linear limit.
    pub fn u_resonant(&self) -> f64 {
        (self.a * self.q_l / self.q_c).powi(2)
    }

    /// Nonlinearity parameter at `f_r0` implied by `beta`:
    /// `a_n0 = β a² Q_l³ / Q_c²`.
    pub fn a_n0(&self) -> f64 {
        self.beta * self.u_resonant() * self.q_l
    }

    /// `beta` that produces a given nonlinearity parameter at `f_r0`.
    pub fn beta_for_a_n0(&self, a_n0: f64) -> f64 {
        a_n0 / (self.u_resonant() * self.q_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDirection {
    Up,
    Down,
}

/// One complex transmission trace. Storage is always in ascending frequency;
/// `sweep_direction` records the acquisition order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencySweep {
    pub freqs_hz: Vec<f64>,
    pub s21: Vec<Complex64>,
    pub source_power_dbm: f64,
    pub attenuation_db: f64,
    pub temperature_k: f64,
    pub sweep_direction: SweepDirection,
}

impl FrequencySweep {
    /// Input power at the feedline in watts.
    pub fn generator_power_w(&self) -> f64 {
        crate::phys::dbm_to_watts(self.source_power_dbm, self.attenuation_db)
    }
}

/// Linear hanger transmission after delay removal:
/// `z(f) = a e^{iα} [1 - (Q_l/Q_c) e^{iφ} / (1 + 2i Q_l (f-f_r0)/f_r0)]`.
pub fn eval_linear_z(params: &ResonatorParams, f: f64) -> Complex64 {
    let detune = Complex64::new(1.0, 2.0 * params.q_l * (f - params.f_r0) / params.f_r0);
    let dip = Complex64::from_polar(params.q_l / params.q_c, params.phi) / detune;
    params.z_off() * (Complex64::new(1.0, 0.0) - dip)
}

/// Full transmission including the cable-delay factor `e^{-i2πfτ}`.
pub fn eval_s21(params: &ResonatorParams, f: f64) -> Complex64 {
    let delay = Complex64::from_polar(1.0, -TAU * f * params.tau);
    if params.beta == 0.0 {
        delay * eval_linear_z(params, f)
    } else {
        let mut state = ContinuationState::cold();
        delay * eval_nonlinear_z(params, f, &mut state).expect("physical parameters")
    }
}

/// Caller-owned continuation state for the nonlinear solver: the `u` root at
/// the previous frequency point.
#[derive(Debug, Clone, Copy)]
pub struct ContinuationState {
    prev_u: Option<f64>,
}

impl ContinuationState {
    pub fn cold() -> Self {
        Self { prev_u: None }
    }
}

/// Real roots of `c3 x³ + c2 x² + c1 x + c0 = 0`, unpolished.
fn cubic_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return vec![];
    }
    if c3.abs() < 1e-14 * scale {
        // quadratic / linear degeneration
        if c2.abs() < 1e-14 * scale {
            if c1 == 0.0 {
                return vec![];
            }
            return vec![-c0 / c1];
        }
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc < 0.0 {
            return vec![];
        }
        let s = disc.sqrt();
        return vec![(-c1 + s) / (2.0 * c2), (-c1 - s) / (2.0 * c2)];
    }
    let a = c2 / c3;
    let b = c1 / c3;
    let c = c0 / c3;
    // depressed cubic t^3 + p t + q with x = t - a/3
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if disc > 0.0 {
        let s = disc.sqrt();
        let t = (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt();
        vec![t + shift]
    } else if p == 0.0 {
        vec![shift - q.cbrt()]
    } else {
        // three real roots, trigonometric form
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - TAU * k as f64 / 3.0).cos() + shift)
            .collect()
    }
}

/// All physically admissible `u` roots at probe frequency `f`, ascending,
/// Newton-polished against the exact (non-polynomial) response equation.
pub(crate) fn admissible_u_roots(params: &ResonatorParams, f: f64) -> Vec<f64> {
    let beta = params.beta;
    let u_max = params.u_resonant();
    if beta == 0.0 {
        let y = f / params.f_r0 - 1.0;
        return vec![u_max / (1.0 + 4.0 * params.q_l * params.q_l * y * y)];
    }
    let ql2 = 4.0 * params.q_l * params.q_l;
    let rel = f / params.f_r0 - 1.0;
    // u[(1-βu)² + 4Q_l²(f/f_r0 - (1-βu))²] = u_max (1-βu)²
    let c3 = (1.0 + ql2) * beta * beta;
    let c2 = 2.0 * beta * (ql2 * rel - 1.0) - u_max * beta * beta;
    let c1 = 1.0 + ql2 * rel * rel + 2.0 * u_max * beta;
    let c0 = -u_max;

    let residual = |u: f64| -> f64 {
        let fr = params.f_r0 * (1.0 - beta * u);
        let y = f / fr - 1.0;
        u * (1.0 + ql2 * y * y) - u_max
    };
    let dresidual = |u: f64| -> f64 {
        let h = (u.abs() * 1e-7).max(u_max * 1e-12).max(1e-300);
        (residual(u + h) - residual(u - h)) / (2.0 * h)
    };

    let mut roots: Vec<f64> = cubic_roots(c3, c2, c1, c0)
        .into_iter()
        .filter(|u| u.is_finite() && *u > 0.0 && *u <= u_max * (1.0 + 1e-9) && beta * *u < 1.0)
        .map(|mut u| {
            for _ in 0..8 {
                let r = residual(u);
                let d = dresidual(u);
                if d == 0.0 {
                    break;
                }
                let step = r / d;
                u -= step;
                if step.abs() < 1e-15 * u.abs().max(u_max) {
                    break;
                }
            }
            u.clamp(0.0, u_max)
        })
        .filter(|u| residual(*u).abs() < 1e-9 * u_max)
        .collect();
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * u_max.max(1e-300));
    roots
}

fn z_from_u(params: &ResonatorParams, f: f64, u: f64) -> Complex64 {
    let fr = params.f_r0 * (1.0 - params.beta * u);
    let detune = Complex64::new(1.0, 2.0 * params.q_l * (f / fr - 1.0));
    let dip = Complex64::from_polar(params.q_l / params.q_c, params.phi) / detune;
    params.z_off() * (Complex64::new(1.0, 0.0) - dip)
}

/// Nonlinear (kinetic-inductance) transmission after delay removal. Inside
/// the bifurcation region the root nearest the continuation state is taken;
/// a cold start walks in from off resonance so the branch is the one
/// continuously connected to the approach side.
pub fn eval_nonlinear_z(
    params: &ResonatorParams,
    f: f64,
    state: &mut ContinuationState,
) -> Result<Complex64, ModelError> {
    if f <= 0.0 {
        return Err(ModelError::NonPositive("f"));
    }
    if state.prev_u.is_none() && params.beta > 0.0 {
        // walk in from ~50 linewidths off resonance on the approach side
        let linewidths = 50.0;
        let offset = linewidths * params.f_r0 / params.q_l;
        let f_far = if f <= params.f_r0 {
            (f - offset).max(f * 0.5)
        } else {
            f + offset
        };
        let steps = 64;
        let mut u_prev: Option<f64> = None;
        for k in 0..steps {
            let fk = f_far + (f - f_far) * k as f64 / steps as f64;
            let roots = admissible_u_roots(params, fk);
            if roots.is_empty() {
                return Err(ModelError::NoRoot(fk));
            }
            u_prev = Some(match u_prev {
                None => roots[0],
                Some(p) => nearest(&roots, p),
            });
        }
        state.prev_u = u_prev;
    }
    let roots = admissible_u_roots(params, f);
    if roots.is_empty() {
        return Err(ModelError::NoRoot(f));
    }
    let u = match state.prev_u {
        None => roots[0],
        Some(p) => nearest(&roots, p),
    };
    state.prev_u = Some(u);
    Ok(z_from_u(params, f, u))
}

fn nearest(roots: &[f64], target: f64) -> f64 {
    *roots
        .iter()
        .min_by(|a, b| {
            (*a - target)
                .abs()
                .partial_cmp(&(*b - target).abs())
                .unwrap()
        })
        .unwrap()
}

/// Frequency grid specification for synthetic sweeps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub f_start_hz: f64,
    pub f_stop_hz: f64,
    pub points: usize,
}

impl GridSpec {
    /// A grid centered on `f_r0` spanning the given number of linewidths.
    pub fn centered(params: &ResonatorParams, linewidths: f64, points: usize) -> Self {
        let half = 0.5 * linewidths * params.f_r0 / params.q_l;
        Self {
            f_start_hz: params.f_r0 - half,
            f_stop_hz: params.f_r0 + half,
            points,
        }
    }
}

/// Synthesizes a sweep: evaluates the (non)linear model in acquisition order,
/// applies the cable delay, then adds independent Gaussian noise per
/// quadrature. Deterministic for a given seed.
pub fn synth_trace(
    params: &ResonatorParams,
    grid: GridSpec,
    noise_sigma: f64,
    seed: u64,
    direction: SweepDirection,
) -> Result<FrequencySweep, ModelError> {
    params.validate()?;
    if grid.points < 2 {
        return Err(ModelError::GridTooSmall);
    }
    let n = grid.points;
    let freqs: Vec<f64> = (0..n)
        .map(|i| {
            grid.f_start_hz + (grid.f_stop_hz - grid.f_start_hz) * i as f64 / (n - 1) as f64
        })
        .collect();

    // acquisition order follows the sweep direction
    let order: Vec<usize> = match direction {
        SweepDirection::Up => (0..n).collect(),
        SweepDirection::Down => (0..n).rev().collect(),
    };

    let mut s21 = vec![Complex64::default(); n];
    let mut state = ContinuationState::cold();
    for &idx in &order {
        let f = freqs[idx];
        let z = if params.beta == 0.0 {
            eval_linear_z(params, f)
        } else {
            eval_nonlinear_z(params, f, &mut state)?
        };
        let delay = Complex64::from_polar(1.0, -TAU * f * params.tau);
        s21[idx] = delay * z;
    }

    if noise_sigma > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        // noise drawn in storage (ascending) order for reproducibility
        for z in s21.iter_mut() {
            let re: f64 = normal.sample(&mut rng);
            let im: f64 = normal.sample(&mut rng);
            *z += Complex64::new(re, im);
        }
    }

    Ok(FrequencySweep {
        freqs_hz: freqs,
        s21,
        source_power_dbm: 0.0,
        attenuation_db: 0.0,
        temperature_k: 0.015,
        sweep_direction: direction,
    })
}
