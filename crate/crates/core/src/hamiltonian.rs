//! The N-player Hamiltonian and its saddle point.
//!
//! The saddle point is computed as a leader–follower problem: each minor's
//! best response `v_l(u)` minimises a strictly convex scalar function, and the
//! major player's `u` maximises the resulting strictly concave reduced map.
//! The reduced map's derivative is evaluated with the envelope identity, so
//! the follower's derivative never enters the outer Newton step.

use serde::{Deserialize, Serialize};

use crate::model::{Coefficients, ModelParams};
use crate::numeric::fsum;
use crate::{Error, Result};

/// Default stationarity tolerance of both solver levels.
pub const SADDLE_TOL: f64 = 1e-10;
pub const SADDLE_MAX_ITER: usize = 100;

/// Argument `(x_0..x_N, y, z_0..z_N)` of the Hamiltonian together with `eps_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianPoint {
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
    pub n_minor: usize,
    pub eps: f64,
}

impl HamiltonianPoint {
    pub fn new(x: Vec<f64>, y: f64, z: Vec<f64>, eps: f64) -> Result<Self> {
        PointView::new(&x, y, &z, eps)?;
        let n_minor = x.len() - 1;
        Ok(Self { x, y, z, n_minor, eps })
    }

    pub fn view(&self) -> PointView<'_> {
        PointView {
            x: &self.x,
            y: self.y,
            z: &self.z,
            eps: self.eps,
        }
    }
}

/// Borrowed form of [`HamiltonianPoint`] used by the solvers.
#[derive(Clone, Copy, Debug)]
pub struct PointView<'a> {
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub eps: f64,
}

impl<'a> PointView<'a> {
    pub fn new(x: &'a [f64], y: f64, z: &'a [f64], eps: f64) -> Result<Self> {
        if x.len() < 2 || x.len() != z.len() {
            return Err(Error::Dimension(format!(
                "need x and z of equal length >= 2, got {} and {}",
                x.len(),
                z.len()
            )));
        }
        Ok(Self { x, y, z, eps })
    }

    pub fn n_minor(&self) -> usize {
        self.x.len() - 1
    }

    fn is_finite(&self) -> bool {
        self.y.is_finite() && self.eps.is_finite() && self.x.iter().chain(self.z).all(|v| v.is_finite())
    }
}

/// `B_l = eps_N sum_i b1(x0, x_l, z_i) z_i` for every minor.
pub fn minor_shifts<C: Coefficients>(p: PointView<'_>, c: &C) -> Vec<f64> {
    let mut out = vec![0.0; p.n_minor()];
    c.minor_aggregate(p.x[0], &p.x[1..], &p.z[1..], &mut out);
    for b in out.iter_mut() {
        *b *= p.eps;
    }
    out
}

/// `(1/N) sum_l b0(x0, x_l, z0) z0`.
pub fn major_shift<C: Coefficients>(p: PointView<'_>, c: &C) -> f64 {
    let (x0, z0) = (p.x[0], p.z[0]);
    fsum(p.x[1..].iter().map(|&xl| c.b0(x0, xl, z0) * z0)) / p.n_minor() as f64
}

fn check_controls(p: PointView<'_>, v: &[f64]) -> Result<()> {
    if v.len() != p.n_minor() {
        return Err(Error::Dimension(format!(
            "{} minor controls for N = {}",
            v.len(),
            p.n_minor()
        )));
    }
    Ok(())
}

/// Value of the Hamiltonian at `(p, u, v)`.
pub fn eval_hamiltonian_n<C: Coefficients>(p: PointView<'_>, u: f64, v: &[f64], c: &C) -> Result<f64> {
    check_controls(p, v)?;
    let n = p.n_minor();
    let (x0, z0) = (p.x[0], p.z[0]);
    let shifts = minor_shifts(p, c);
    let terms = (1..=n).flat_map(|l| {
        let (xl, zl, vl) = (p.x[l], p.z[l], v[l - 1]);
        [
            c.f(x0, xl, p.y, z0, zl, u, vl),
            c.b0(x0, xl, z0) * u * z0,
            shifts[l - 1] * vl,
        ]
    });
    Ok(fsum(terms) / n as f64)
}

/// Partial derivative in `u` at fixed `v`.
pub fn grad_u_hamiltonian_n<C: Coefficients>(p: PointView<'_>, u: f64, v: &[f64], c: &C) -> Result<f64> {
    check_controls(p, v)?;
    let (x0, z0) = (p.x[0], p.z[0]);
    let mean_du = fsum((1..=p.n_minor()).map(|l| c.du_f(x0, p.x[l], p.y, z0, p.z[l], u, v[l - 1])))
        / p.n_minor() as f64;
    Ok(mean_du + major_shift(p, c))
}

/// Partial derivatives in each `v_l` at fixed `u`.
pub fn grad_v_hamiltonian_n<C: Coefficients>(p: PointView<'_>, u: f64, v: &[f64], c: &C) -> Result<Vec<f64>> {
    check_controls(p, v)?;
    let (x0, z0) = (p.x[0], p.z[0]);
    let n = p.n_minor() as f64;
    let shifts = minor_shifts(p, c);
    Ok((1..=p.n_minor())
        .map(|l| (c.dv_f(x0, p.x[l], p.y, z0, p.z[l], u, v[l - 1]) + shifts[l - 1]) / n)
        .collect())
}

/// Minimiser of the strictly convex `v -> f(x0, x1, y, z0, z1, u, v) + shift v`.
///
/// Uses the coefficient set's closed form when it has one, otherwise a
/// bracketed Newton iteration on the stationarity condition.
#[allow(clippy::too_many_arguments)]
pub fn follower_response<C: Coefficients>(
    c: &C,
    x0: f64,
    x1: f64,
    y: f64,
    z0: f64,
    z1: f64,
    u: f64,
    shift: f64,
    tol: f64,
) -> Result<f64> {
    let g = |v: f64| c.dv_f(x0, x1, y, z0, z1, u, v) + shift;
    if let Some(v) = c.argmin_v(x0, x1, y, z0, z1, u, shift) {
        return Ok(v);
    }
    // g is increasing; grow a bracket around 0 geometrically.
    let g0 = g(0.0);
    if g0.abs() <= tol {
        return Ok(0.0);
    }
    let dir = if g0 > 0.0 { -1.0 } else { 1.0 };
    let mut step = 1.0;
    let mut far = dir * step;
    let mut grows = 0;
    while g(far) * g0 > 0.0 {
        step *= 2.0;
        far = dir * step;
        grows += 1;
        if grows > 200 || !far.is_finite() {
            return Err(Error::NoConvergence {
                what: "follower bracket",
                iterations: grows,
                residual: g(far),
            });
        }
    }
    let (mut lo, mut hi) = if dir > 0.0 { (0.0, far) } else { (far, 0.0) };
    let mut v = 0.5 * (lo + hi);
    for _ in 0..SADDLE_MAX_ITER * 2 {
        let gv = g(v);
        if gv.abs() <= tol {
            return Ok(v);
        }
        if gv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let d = c.dvv_f(x0, x1, y, z0, z1, u, v);
        let newton = v - gv / d;
        v = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * (1.0 + v.abs()) {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        what: "follower Newton",
        iterations: SADDLE_MAX_ITER * 2,
        residual: g(v),
    })
}

/// Minor `ell`'s (0-based among minors) best response to `u`.
pub fn inner_min_v<C: Coefficients>(p: PointView<'_>, ell: usize, u: f64, c: &C, tol: f64) -> Result<f64> {
    if ell >= p.n_minor() {
        return Err(Error::Dimension(format!("minor index {ell} out of range")));
    }
    if !p.is_finite() || !u.is_finite() {
        return Err(Error::NonFinite("inner minimisation input".into()));
    }
    let shift = minor_shifts(p, c)[ell];
    let l = ell + 1;
    follower_response(c, p.x[0], p.x[l], p.y, p.z[0], p.z[l], u, shift, tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub u: f64,
    pub v: Vec<f64>,
    pub residual_u: f64,
    pub residual_v: f64,
    pub iterations: usize,
}

/// Saddle point of the Hamiltonian for the quadratic-tanh family.
pub fn saddle_point_n(p: PointView<'_>, m: &ModelParams, tol: f64, max_iter: usize) -> Result<SaddlePoint> {
    m.check_saddle_condition()?;
    saddle_point_with(p, m, tol, max_iter)
}

/// Saddle point for an arbitrary coefficient set (the caller vouches for the
/// concavity–convexity assumptions).
pub fn saddle_point_with<C: Coefficients>(
    p: PointView<'_>,
    c: &C,
    tol: f64,
    max_iter: usize,
) -> Result<SaddlePoint> {
    if !p.is_finite() {
        return Err(Error::NonFinite("Hamiltonian point".into()));
    }
    let n = p.n_minor();
    let (x0, y, z0) = (p.x[0], p.y, p.z[0]);
    let shifts = minor_shifts(p, c);
    let d_bar = major_shift(p, c);
    let mut v = vec![0.0; n];

    let responses = |u: f64, v: &mut [f64]| -> Result<()> {
        for l in 1..=n {
            v[l - 1] = follower_response(c, x0, p.x[l], y, z0, p.z[l], u, shifts[l - 1], tol * 1e-2)?;
        }
        Ok(())
    };
    // Envelope derivative of the reduced map and its second derivative.
    let slope = |u: f64, v: &[f64]| {
        fsum((1..=n).map(|l| c.du_f(x0, p.x[l], y, z0, p.z[l], u, v[l - 1]))) / n as f64 + d_bar
    };
    let curvature = |u: f64, v: &[f64]| {
        fsum((1..=n).map(|l| {
            let (xl, zl, vl) = (p.x[l], p.z[l], v[l - 1]);
            let cuv = c.duv_f(x0, xl, y, z0, zl, u, vl);
            c.duu_f(x0, xl, y, z0, zl, u, vl) - cuv * cuv / c.dvv_f(x0, xl, y, z0, zl, u, vl)
        })) / n as f64
    };

    let mut u = 0.0;
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        responses(u, &mut v)?;
        let g = slope(u, &v);
        residual = g.abs();
        if residual <= tol {
            let residual_v = (1..=n)
                .map(|l| (c.dv_f(x0, p.x[l], y, z0, p.z[l], u, v[l - 1]) + shifts[l - 1]).abs())
                .fold(0.0, f64::max);
            return Ok(SaddlePoint {
                u,
                v,
                residual_u: residual,
                residual_v,
                iterations: it,
            });
        }
        let h = curvature(u, &v);
        if !(h < 0.0) || !g.is_finite() {
            return Err(Error::NonFinite(format!("reduced curvature {h} at u = {u}")));
        }
        u -= g / h;
    }
    Err(Error::NoConvergence {
        what: "saddle point outer Newton",
        iterations: max_iter,
        residual,
    })
}

/// Hamiltonian value at its saddle point.
pub fn eval_hbar_n(p: PointView<'_>, m: &ModelParams) -> Result<f64> {
    hbar_n_with_saddle(p, m).map(|(h, _)| h)
}

/// Hamiltonian value at its saddle point, together with the saddle point.
pub fn hbar_n_with_saddle<C: Coefficients>(p: PointView<'_>, c: &C) -> Result<(f64, SaddlePoint)> {
    let sp = saddle_point_with(p, c, SADDLE_TOL, SADDLE_MAX_ITER)?;
    let h = eval_hamiltonian_n(p, sp.u, &sp.v, c)?;
    Ok((h, sp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(a: f64, c: f64) -> ModelParams {
        ModelParams {
            a_lin: a,
            c_lin: c,
            alpha: 2.0,
            gamma: 2.0,
            beta: 1.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn zero_z_closed_form() {
        let m = quad(1.0, 0.0);
        let p = HamiltonianPoint::new(vec![0.3, -0.2, 1.1, 0.4], 0.7, vec![0.0; 4], 0.1).unwrap();
        let sp = saddle_point_n(p.view(), &m, SADDLE_TOL, SADDLE_MAX_ITER).unwrap();
        assert!((sp.u - 0.4).abs() < 1e-12);
        assert!(sp.v.iter().all(|v| (v + 0.2).abs() < 1e-12));
        let m0 = ModelParams { kappa_g: 0.0, ..m };
        assert!((eval_hbar_n(p.view(), &m0).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn symmetric_origin() {
        let m = quad(0.0, 0.0);
        let p = HamiltonianPoint::new(vec![0.3, -0.2, 1.1], 0.7, vec![0.0; 3], 0.1).unwrap();
        let sp = saddle_point_n(p.view(), &m, SADDLE_TOL, SADDLE_MAX_ITER).unwrap();
        assert_eq!(sp.u, 0.0);
        assert!(sp.v.iter().all(|&v| v == 0.0));
        let m0 = ModelParams { kappa_g: 0.0, ..m };
        assert_eq!(eval_hbar_n(p.view(), &m0).unwrap(), 0.0);
    }

    #[test]
    fn inner_closed_forms() {
        let m = quad(0.0, 0.0);
        let p = HamiltonianPoint::new(vec![0.0, 0.5, 0.2], 0.0, vec![0.0; 3], 0.1).unwrap();
        assert!((inner_min_v(p.view(), 0, 0.4, &m, 1e-12).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(inner_min_v(p.view(), 1, 0.0, &m, 1e-12).unwrap(), 0.0);
        let m2 = ModelParams {
            c_lin: 1.0,
            beta: 0.5,
            gamma: 2.0,
            ..ModelParams::default()
        };
        let v = follower_response(&m2, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.25, 1e-12).unwrap();
        assert!((v + 0.875).abs() < 1e-15);
    }

    #[test]
    fn controls_off_value() {
        let m = ModelParams::default();
        let x = vec![0.2, -0.3, 0.9, 1.4];
        let p = HamiltonianPoint::new(x.clone(), -0.4, vec![0.0; 4], 0.2).unwrap();
        let h = eval_hamiltonian_n(p.view(), 0.0, &[0.0; 3], &m).unwrap();
        let expect: f64 = x[1..].iter().map(|xl| m.kappa_g * (x[0] + xl - 0.4).tanh()).sum::<f64>() / 3.0;
        assert!((h - expect).abs() < 1e-15);
    }

    #[test]
    fn rejects_mu_at_least_lambda() {
        let m = ModelParams {
            beta: 2.5,
            ..ModelParams::default()
        };
        let p = HamiltonianPoint::new(vec![0.0; 3], 0.0, vec![0.0; 3], 0.1).unwrap();
        assert!(saddle_point_n(p.view(), &m, SADDLE_TOL, SADDLE_MAX_ITER).is_err());
    }

    #[test]
    fn length_mismatch() {
        assert!(HamiltonianPoint::new(vec![0.0; 3], 0.0, vec![0.0; 4], 0.1).is_err());
        let p = HamiltonianPoint::new(vec![0.0; 3], 0.0, vec![0.0; 3], 0.1).unwrap();
        assert!(eval_hamiltonian_n(p.view(), 0.0, &[0.0; 3], &ModelParams::default()).is_err());
    }
}
