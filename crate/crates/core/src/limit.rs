//! Limit (mean-field) Hamiltonian.
//!
//! In the limit game the representative minor is `xbar + W^1_s - W^1_t`, which
//! is independent of the major player's noise. Conditional expectations given
//! `W^0` therefore reduce to ordinary Gaussian expectations with mean `xbar`
//! and variance `s - t`, evaluated here by Gauss–Hermite quadrature.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::hamiltonian::{follower_response, SADDLE_MAX_ITER, SADDLE_TOL};
use crate::model::{Coefficients, ModelParams, Scenario};
use crate::quadrature::{gauss_hermite, GaussHermite};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitPoint {
    pub s: f64,
    pub x0: f64,
    pub y: f64,
    pub z0: f64,
}

/// Follower's best response in the limit (no own `z` component).
pub fn vbar(x0: f64, x1: f64, y: f64, z0: f64, u: f64, m: &ModelParams) -> f64 {
    follower_response(m, x0, x1, y, z0, 0.0, u, 0.0, SADDLE_TOL * 1e-2).expect("closed form")
}

/// Limit Hamiltonian for a coefficient set, a start time and a minor start.
#[derive(Clone, Debug)]
pub struct LimitHamiltonian<'a, C: Coefficients> {
    pub coeffs: &'a C,
    pub t_start: f64,
    pub xbar: f64,
    pub rule: Arc<GaussHermite>,
}

impl<'a> LimitHamiltonian<'a, ModelParams> {
    pub fn from_scenario(s: &'a Scenario) -> Result<Self> {
        Ok(Self {
            coeffs: &s.model,
            t_start: s.t_start,
            xbar: s.xbar_init,
            rule: gauss_hermite(s.quad_order)?,
        })
    }
}

impl<'a, C: Coefficients> LimitHamiltonian<'a, C> {
    fn variance(&self, s: f64) -> Result<f64> {
        if !(s >= self.t_start) {
            return Err(Error::OutOfRange {
                key: "s".into(),
                msg: format!("time {s} precedes t_start = {}", self.t_start),
            });
        }
        Ok(s - self.t_start)
    }

    fn response(&self, pt: &LimitPoint, x1: f64, u: f64) -> Result<f64> {
        follower_response(self.coeffs, pt.x0, x1, pt.y, pt.z0, 0.0, u, 0.0, SADDLE_TOL * 1e-2)
    }

    /// Quadrature of `g(x1, v(x1))` over the representative minor at time `pt.s`.
    fn expect<G: FnMut(f64, f64) -> f64>(&self, pt: &LimitPoint, u: f64, mut g: G) -> Result<f64> {
        let var = self.variance(pt.s)?;
        let mut err = None;
        let value = self.rule.expect(self.xbar, var, |x1| match self.response(pt, x1, u) {
            Ok(v) => g(x1, v),
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }

    /// `(H(s, xi, u), dH/du)`.
    pub fn value_and_grad(&self, pt: &LimitPoint, u: f64) -> Result<(f64, f64)> {
        let c = self.coeffs;
        let (x0, y, z0) = (pt.x0, pt.y, pt.z0);
        let value = self.expect(pt, u, |x1, v| c.f(x0, x1, y, z0, 0.0, u, v) + c.b0(x0, x1, z0) * z0 * u)?;
        // Envelope identity: the follower's derivative does not enter.
        let grad = self.expect(pt, u, |x1, v| c.du_f(x0, x1, y, z0, 0.0, u, v) + c.b0(x0, x1, z0) * z0)?;
        Ok((value, grad))
    }

    fn curvature(&self, pt: &LimitPoint, u: f64) -> Result<f64> {
        let c = self.coeffs;
        let (x0, y, z0) = (pt.x0, pt.y, pt.z0);
        self.expect(pt, u, |x1, v| {
            let cuv = c.duv_f(x0, x1, y, z0, 0.0, u, v);
            c.duu_f(x0, x1, y, z0, 0.0, u, v) - cuv * cuv / c.dvv_f(x0, x1, y, z0, 0.0, u, v)
        })
    }

    /// Leader's maximiser, by Newton from `u = 0`.
    pub fn maximiser(&self, pt: &LimitPoint, tol: f64) -> Result<f64> {
        let mut u = 0.0;
        let mut residual = f64::INFINITY;
        for _ in 0..=SADDLE_MAX_ITER {
            let (_, g) = self.value_and_grad(pt, u)?;
            residual = g.abs();
            if residual <= tol {
                return Ok(u);
            }
            let h = self.curvature(pt, u)?;
            if !(h < 0.0) || !g.is_finite() {
                return Err(Error::NonFinite(format!("limit curvature {h} at u = {u}")));
            }
            u -= g / h;
        }
        Err(Error::NoConvergence {
            what: "limit maximiser",
            iterations: SADDLE_MAX_ITER,
            residual,
        })
    }

    /// `(H(s, xi), u_bar)`.
    pub fn reduced(&self, pt: &LimitPoint) -> Result<(f64, f64)> {
        let u = self.maximiser(pt, SADDLE_TOL)?;
        let (value, _) = self.value_and_grad(pt, u)?;
        Ok((value, u))
    }
}

/// Limit Hamiltonian at `u` and its `u`-derivative.
pub fn eval_hbar_u(pt: &LimitPoint, u: f64, s: &Scenario) -> Result<(f64, f64)> {
    LimitHamiltonian::from_scenario(s)?.value_and_grad(pt, u)
}

/// Leader's optimal control in the limit game.
pub fn ubar(pt: &LimitPoint, s: &Scenario, tol: f64) -> Result<f64> {
    LimitHamiltonian::from_scenario(s)?.maximiser(pt, tol)
}

/// Limit Hamiltonian at the leader's optimum.
pub fn eval_hbar_reduced(pt: &LimitPoint, s: &Scenario) -> Result<f64> {
    LimitHamiltonian::from_scenario(s)?.reduced(pt).map(|(v, _)| v)
}
