//! Generic numerical machinery shared by every analysis module: a damped
//! Gauss-Newton (Levenberg-Marquardt) least-squares solver with covariance
//! output, regression through the origin, Gaussian smoothing, weighted
//! averaging and Student-t sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("problem is underdetermined: {data} residuals for {params} parameters")]
    Underdetermined { data: usize, params: usize },
    #[error("residuals are not finite at the initial parameters")]
    NonFiniteResiduals,
    #[error("lower bound exceeds upper bound for parameter {0}")]
    BadBounds(usize),
    #[error("initial parameter {0} lies outside its bounds")]
    InitOutOfBounds(usize),
    #[error("input sequences are empty")]
    EmptyInput,
    #[error("input sequences have mismatched lengths")]
    MismatchedLengths,
    #[error("weights must be nonnegative with a positive sum")]
    ZeroWeights,
    #[error("regression through the origin requires a nonzero abscissa")]
    AllZeroAbscissa,
    #[error("degrees of freedom must be at least 1")]
    InvalidDof,
    #[error("probability must lie strictly between 0 and 1")]
    InvalidProbability,
}

/// A nonlinear least-squares problem: a residual map from a parameter vector
/// to `data_count` real residuals, with optional box bounds.
pub struct FitProblem<'a> {
    param_count: usize,
    data_count: usize,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    residuals: Box<dyn Fn(&[f64], &mut [f64]) + 'a>,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        param_count: usize,
        data_count: usize,
        residuals: impl Fn(&[f64], &mut [f64]) + 'a,
    ) -> Result<Self, NumError> {
        if data_count < param_count {
            return Err(NumError::Underdetermined {
                data: data_count,
                params: param_count,
            });
        }
        Ok(Self {
            param_count,
            data_count,
            lower: None,
            upper: None,
            residuals: Box::new(residuals),
        })
    }

    /// Attaches per-parameter box bounds. Use `-inf`/`inf` for unbounded sides.
    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, NumError> {
        if lower.len() != self.param_count || upper.len() != self.param_count {
            return Err(NumError::MismatchedLengths);
        }
        for i in 0..self.param_count {
            if lower[i] > upper[i] {
                return Err(NumError::BadBounds(i));
            }
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn data_count(&self) -> usize {
        self.data_count
    }

    fn eval(&self, params: &[f64], out: &mut [f64]) {
        (self.residuals)(params, out);
    }

    fn clamp(&self, params: &mut [f64]) {
        if let Some(lo) = &self.lower {
            for (p, l) in params.iter_mut().zip(lo) {
                if *p < *l {
                    *p = *l;
                }
            }
        }
        if let Some(hi) = &self.upper {
            for (p, h) in params.iter_mut().zip(hi) {
                if *p > *h {
                    *p = *h;
                }
            }
        }
    }

    fn in_bounds(&self, params: &[f64]) -> bool {
        let lo_ok = self
            .lower
            .as_ref()
            .is_none_or(|lo| params.iter().zip(lo).all(|(p, l)| p >= l));
        let hi_ok = self
            .upper
            .as_ref()
            .is_none_or(|hi| params.iter().zip(hi).all(|(p, h)| p <= h));
        lo_ok && hi_ok
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change in residual norm (or gradient norm) below which the
    /// iteration stops.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tolerance: 1e-10,
        }
    }
}

/// Result of a least-squares fit. `standard_errors` are the square roots of
/// the covariance diagonal; they are NaN when the normal equations were
/// singular (`covariance` is then `None`).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub dof: usize,
    pub residual_norm: f64,
    pub covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    /// Sum of squared residuals.
    pub fn ssr(&self) -> f64 {
        self.residual_norm * self.residual_norm
    }

    /// Half-width of the two-sided t confidence interval for parameter `i`.
    pub fn ci_half_width(&self, i: usize, level: f64) -> Result<f64, NumError> {
        let p = 0.5 + level / 2.0;
        Ok(self.standard_errors[i] * student_t_quantile(self.dof, p)?)
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|r| r * r).sum()
}

/// Central finite-difference Jacobian with step `max(1e-8, 1e-6 |p|)`.
/// Steps are pulled back inside the bounds when a parameter sits at one.
fn jacobian(problem: &FitProblem, params: &[f64]) -> DMatrix<f64> {
    let n = problem.data_count;
    let m = problem.param_count;
    let mut jac = DMatrix::zeros(n, m);
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let mut p = params.to_vec();
    for j in 0..m {
        let h = (1e-6 * params[j].abs()).max(1e-8);
        let orig = p[j];
        let mut hi = orig + h;
        let mut lo = orig - h;
        if let Some(ub) = &problem.upper {
            hi = hi.min(ub[j]);
        }
        if let Some(lb) = &problem.lower {
            lo = lo.max(lb[j]);
        }
        if hi <= lo {
            // parameter pinned by equal bounds
            continue;
        }
        p[j] = hi;
        problem.eval(&p, &mut plus);
        p[j] = lo;
        problem.eval(&p, &mut minus);
        p[j] = orig;
        let denom = hi - lo;
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / denom;
        }
    }
    jac
}

/// Levenberg-Marquardt minimization of the sum of squared residuals.
///
/// The covariance is `(JᵀJ)⁻¹ · ssr/dof` at the solution. A singular normal
/// matrix yields `converged = false` with `covariance = None`.
pub fn lm_fit(
    problem: &FitProblem,
    init: &[f64],
    options: FitOptions,
) -> Result<FitResult, NumError> {
    if init.len() != problem.param_count {
        return Err(NumError::MismatchedLengths);
    }
    if !problem.in_bounds(init) {
        let bad = init
            .iter()
            .enumerate()
            .find(|(i, p)| {
                let lo = problem.lower.as_ref().map(|l| l[*i]).unwrap_or(f64::NEG_INFINITY);
                let hi = problem.upper.as_ref().map(|h| h[*i]).unwrap_or(f64::INFINITY);
                **p < lo || **p > hi
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(NumError::InitOutOfBounds(bad));
    }

    let n = problem.data_count;
    let m = problem.param_count;
    let mut params = init.to_vec();
    let mut resid = vec![0.0; n];
    problem.eval(&params, &mut resid);
    if resid.iter().any(|r| !r.is_finite()) {
        return Err(NumError::NonFiniteResiduals);
    }
    let mut cost = sum_sq(&resid);

    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut singular = false;

    for iter in 0..options.max_iter {
        iterations = iter + 1;
        let jac = jacobian(problem, &params);
        let r = DVector::from_column_slice(&resid);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;

        let scale = cost.max(1e-300);
        if grad.amax() < options.tolerance * scale.sqrt().max(1.0) {
            converged = true;
            break;
        }

        let mut stepped = false;
        for _ in 0..25 {
            let mut damped = jtj.clone();
            for k in 0..m {
                let d = jtj[(k, k)];
                damped[(k, k)] = d + lambda * d.max(1e-12);
            }
            let step = match damped.lu().solve(&(-&grad)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial = params.clone();
            for k in 0..m {
                trial[k] += step[k];
            }
            problem.clamp(&mut trial);
            let mut trial_resid = vec![0.0; n];
            problem.eval(&trial, &mut trial_resid);
            let trial_cost = sum_sq(&trial_resid);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel_drop = (cost - trial_cost) / cost.max(1e-300);
                params = trial;
                resid = trial_resid;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-14);
                stepped = true;
                if rel_drop < options.tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // no downhill step found at any damping: treat as converged to a
            // local minimum unless the normal equations never solved
            converged = true;
        }
        if converged {
            break;
        }
    }

    let dof = n - m;
    let jac = jacobian(problem, &params);
    let jtj = jac.transpose() * &jac;
    let covariance = if dof > 0 {
        jtj.clone().try_inverse().map(|inv| inv * (cost / dof as f64))
    } else {
        None
    };
    if covariance.is_none() {
        singular = true;
    }
    let standard_errors = match &covariance {
        Some(c) => (0..m).map(|k| c[(k, k)].max(0.0).sqrt()).collect(),
        None => vec![f64::NAN; m],
    };

    Ok(FitResult {
        params,
        standard_errors,
        dof,
        residual_norm: cost.sqrt(),
        covariance,
        converged: converged && !singular,
        iterations,
    })
}

/// Slope of a linear regression through the origin with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct OriginFit {
    pub slope: f64,
    pub slope_se: f64,
    pub dof: usize,
}

/// Least-squares slope through the origin: `Σxy / Σx²`, with the standard
/// error from the residual variance at `n - 1` degrees of freedom.
pub fn linreg_origin(xs: &[f64], ys: &[f64]) -> Result<OriginFit, NumError> {
    if xs.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if xs.len() != ys.len() {
        return Err(NumError::MismatchedLengths);
    }
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if sxx == 0.0 {
        return Err(NumError::AllZeroAbscissa);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = sxy / sxx;
    let dof = xs.len() - 1;
    let slope_se = if dof > 0 {
        let ssr: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = y - slope * x;
                r * r
            })
            .sum();
        (ssr / dof as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(OriginFit { slope, slope_se, dof })
}

/// `Σ(wᵢvᵢ) / Σwᵢ` with nonnegative weights summing to a positive total.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64, NumError> {
    if values.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if values.len() != weights.len() {
        return Err(NumError::MismatchedLengths);
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(NumError::ZeroWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(NumError::ZeroWeights);
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Discrete convolution with a normalized Gaussian kernel truncated at ±4σ.
/// Edges renormalize the kernel over the available samples; `sigma_points = 0`
/// is the identity.
pub fn gaussian_smooth(series: &[f64], sigma_points: f64) -> Result<Vec<f64>, NumError> {
    if series.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if sigma_points <= 0.0 {
        return Ok(series.to_vec());
    }
    let half = (4.0 * sigma_points).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sigma_points).powi(2)).exp())
        .collect();
    let n = series.len() as i64;
    let mut out = Vec::with_capacity(series.len());
    for i in 0..n {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (kidx, w) in kernel.iter().enumerate() {
            let j = i + kidx as i64 - half;
            if j >= 0 && j < n {
                acc += w * series[j as usize];
                norm += w;
            }
        }
        out.push(acc / norm);
    }
    Ok(out)
}

/// One draw from Student's t-distribution with `dof` degrees of freedom.
pub fn student_t_draw<R: Rng + ?Sized>(dof: usize, rng: &mut R) -> Result<f64, NumError> {
    if dof < 1 {
        return Err(NumError::InvalidDof);
    }
    let dist = rand_distr::StudentT::new(dof as f64).map_err(|_| NumError::InvalidDof)?;
    Ok(dist.sample(rng))
}

/// Inverse CDF of Student's t-distribution.
pub fn student_t_quantile(dof: usize, p: f64) -> Result<f64, NumError> {
    if dof < 1 {
        return Err(NumError::InvalidDof);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(NumError::InvalidProbability);
    }
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|_| NumError::InvalidDof)?;
    Ok(dist.inverse_cdf(p))
}
