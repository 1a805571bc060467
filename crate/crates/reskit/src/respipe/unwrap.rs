//! Phase unwrapping in three flavors: the conventional ±π rule, a denoised
//! variant that smooths sin and cos separately before unwrapping, and a
//! bifurcation-aware variant with asymmetric jump thresholds that tolerates
//! the abrupt phase drop a bifurcated resonance produces mid-sweep.

use crate::numcore::gaussian_smooth;
use crate::sigmodel::SweepDirection;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnwrapMode {
    Standard,
    Smoothed,
    BifurcationAware,
}

#[derive(Debug, Clone, Copy)]
pub struct UnwrapOptions {
    /// Gaussian sigma in samples for `Smoothed` mode.
    pub sigma_points: f64,
    /// Rise beyond which a jump counts as a wrap in `BifurcationAware` mode.
    pub threshold_up: f64,
    /// Fall beyond which a jump counts as a wrap in `BifurcationAware` mode
    /// (magnitude; the tolerant side on an up-sweep).
    pub threshold_down: f64,
    pub direction: SweepDirection,
}

impl Default for UnwrapOptions {
    fn default() -> Self {
        Self {
            sigma_points: 3.0,
            threshold_up: 1.5 * PI,
            threshold_down: 1.9 * PI,
            direction: SweepDirection::Up,
        }
    }
}

/// Unwraps a wrapped phase sequence. The output differs from the input by
/// integer multiples of 2π pointwise; `Smoothed` mode returns the unwrapped
/// smoothed phase (used for fit initialization, not as data).
pub fn unwrap_phase(angles: &[f64], mode: UnwrapMode, options: &UnwrapOptions) -> Vec<f64> {
    if angles.is_empty() {
        return Vec::new();
    }
    match mode {
        UnwrapMode::Standard => unwrap_with(angles, PI, PI),
        UnwrapMode::Smoothed => {
            let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
            let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
            let sin_s = gaussian_smooth(&sin, options.sigma_points).expect("nonempty");
            let cos_s = gaussian_smooth(&cos, options.sigma_points).expect("nonempty");
            let recombined: Vec<f64> = sin_s
                .iter()
                .zip(&cos_s)
                .map(|(s, c)| s.atan2(*c))
                .collect();
            unwrap_with(&recombined, PI, PI)
        }
        UnwrapMode::BifurcationAware => {
            // on an up-sweep the bifurcation shows up as a large *fall*, so
            // falls get the loose threshold; mirrored on a down-sweep
            let (up, down) = match options.direction {
                SweepDirection::Up => (options.threshold_up, options.threshold_down),
                SweepDirection::Down => (options.threshold_down, options.threshold_up),
            };
            unwrap_with(angles, up, down)
        }
    }
}

/// Adds ±2π whenever a successive difference rises above `rise` or falls
/// below `-fall`.
fn unwrap_with(angles: &[f64], rise: f64, fall: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = 0.0;
    out.push(angles[0]);
    for i in 1..angles.len() {
        let d = angles[i] - angles[i - 1];
        if d > rise {
            offset -= TAU * (d / TAU).round().max(1.0);
        } else if d < -fall {
            offset += TAU * (-d / TAU).round().max(1.0);
        }
        out.push(angles[i] + offset);
    }
    out
}
