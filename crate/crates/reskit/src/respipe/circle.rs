//! Algebraic circle fit: minimize `Σ(A(x²+y²)+Bx+Cy+D)²` subject to
//! `B²+C²-4AD = 1` via a Lagrange multiplier, i.e. the generalized eigenvalue
//! problem `M v = η B v` on the 4×4 moment matrix.

use super::PipeError;
use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CircleFit {
    pub xc: f64,
    pub yc: f64,
    pub radius: f64,
    pub rms_residual: f64,
}

impl CircleFit {
    pub fn center(&self) -> Complex64 {
        Complex64::new(self.xc, self.yc)
    }
}

/// Fits a circle to complex-plane points. Input is centered and scaled
/// internally so the fit is equivariant under translation and scaling.
pub fn circle_fit(points: &[Complex64]) -> Result<CircleFit, PipeError> {
    if points.len() < 4 {
        return Err(PipeError::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.re).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.im).sum::<f64>() / n;
    let scale = (points
        .iter()
        .map(|p| (p.re - cx).powi(2) + (p.im - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if scale == 0.0 {
        return Err(PipeError::DegenerateGeometry);
    }

    let (mut mzz, mut mxz, mut myz, mut mz) = (0.0, 0.0, 0.0, 0.0);
    let (mut mxx, mut mxy, mut myy) = (0.0, 0.0, 0.0);
    let (mut mx, mut my) = (0.0, 0.0);
    for p in points {
        let x = (p.re - cx) / scale;
        let y = (p.im - cy) / scale;
        let z = x * x + y * y;
        mzz += z * z;
        mxz += x * z;
        myz += y * z;
        mz += z;
        mxx += x * x;
        mxy += x * y;
        myy += y * y;
        mx += x;
        my += y;
    }
    let m = Matrix4::new(
        mzz, mxz, myz, mz, //
        mxz, mxx, mxy, mx, //
        myz, mxy, myy, my, //
        mz, mx, my, n,
    );
    // constraint matrix for B²+C²-4AD
    let b = Matrix4::new(
        0.0, 0.0, 0.0, -2.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        -2.0, 0.0, 0.0, 0.0,
    );
    let b_inv = Matrix4::new(
        0.0, 0.0, 0.0, -0.5, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        -0.5, 0.0, 0.0, 0.0,
    );

    // generalized eigenvalues of (M, B) are the eigenvalues of B⁻¹M;
    // the constrained minimum is the one nearest zero from above
    let eigs = (b_inv * m).complex_eigenvalues();
    let mut eta: Option<f64> = None;
    for e in eigs.iter() {
        if e.im.abs() > 1e-8 * (1.0 + e.re.abs()) {
            continue;
        }
        let val = e.re;
        if val >= -1e-9 {
            eta = Some(match eta {
                None => val,
                Some(best) => best.min(val.max(0.0)),
            });
        }
    }
    let eta = eta.ok_or(PipeError::DegenerateGeometry)?;

    // null vector of (M - ηB) via the SVD's smallest right singular vector
    let svd = (m - b * eta).svd(false, true);
    let vt = svd.v_t.ok_or(PipeError::DegenerateGeometry)?;
    let idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let v = Vector4::new(vt[(idx, 0)], vt[(idx, 1)], vt[(idx, 2)], vt[(idx, 3)]);

    // normalize to the constraint B²+C²-4AD = 1
    let cons = v[1] * v[1] + v[2] * v[2] - 4.0 * v[0] * v[3];
    if cons <= 0.0 {
        return Err(PipeError::DegenerateGeometry);
    }
    let v = v / cons.sqrt();
    let (a, bb, cc) = (v[0], v[1], v[2]);
    if a.abs() < 1e-12 {
        return Err(PipeError::DegenerateGeometry);
    }

    let xc_s = -bb / (2.0 * a);
    let yc_s = -cc / (2.0 * a);
    let r_s = 1.0 / (2.0 * a.abs());

    let xc = xc_s * scale + cx;
    let yc = yc_s * scale + cy;
    let radius = r_s * scale;
    let rms = (points
        .iter()
        .map(|p| {
            let d = ((p.re - xc).powi(2) + (p.im - yc).powi(2)).sqrt() - radius;
            d * d
        })
        .sum::<f64>()
        / n)
        .sqrt();

    Ok(CircleFit {
        xc,
        yc,
        radius,
        rms_residual: rms,
    })
}
