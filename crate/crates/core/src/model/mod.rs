//! Model coefficients and the scenario that drives a run.

mod config;
mod validate;

pub use config::{load_scenario, load_scenario_with_overrides, Scenario, CONFIG_KEYS};
pub use validate::{validate_assumptions, ValidationReport, Violation};

use serde::{Deserialize, Serialize};

/// Exponent of the conforming schedule `eps_N = c * N^(-3/4)`.
pub const CONFORMING_EPS_EXPONENT: f64 = 0.75;

/// `eps_coeff * n_minor^(-3/4)`.
pub fn epsilon_n(n_minor: usize, eps_coeff: f64) -> f64 {
    epsilon_n_with_exponent(n_minor, eps_coeff, CONFORMING_EPS_EXPONENT)
}

pub fn epsilon_n_with_exponent(n_minor: usize, eps_coeff: f64, exponent: f64) -> f64 {
    eps_coeff * (n_minor as f64).powf(-exponent)
}

/// Coefficient set of the game.
///
/// Arguments follow the state layout `(x0, x1, y, z0, z1)` for the running
/// payoff and `(x0, x1, z)` for the control drifts. Everything that the
/// Hamiltonian solvers need is expressed through this trait, so a custom
/// coefficient set only has to provide the pointwise formulas; the defaults
/// cover the rest with generic (slower) algorithms.
pub trait Coefficients: Sync {
    #[allow(clippy::too_many_arguments)]
    fn f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn du_f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn dv_f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn duu_f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn dvv_f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn duv_f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64;

    fn b0(&self, x0: f64, x1: f64, z: f64) -> f64;
    fn b1(&self, x0: f64, x1: f64, z: f64) -> f64;
    fn phi(&self, x0: f64, x1: f64) -> f64;

    /// Closed-form `argmin_v f(.., u, v) + shift * v`, if one is known.
    #[allow(clippy::too_many_arguments)]
    fn argmin_v(&self, _x0: f64, _x1: f64, _y: f64, _z0: f64, _z1: f64, _u: f64, _shift: f64) -> Option<f64> {
        None
    }

    /// Writes `out[l] = sum_i b1(x0, xs[l], zs[i]) * zs[i]` for every minor `l`.
    ///
    /// `xs` and `zs` hold the minors only (no major entry). The default is the
    /// direct double loop; sums are order-independent.
    fn minor_aggregate(&self, x0: f64, xs: &[f64], zs: &[f64], out: &mut [f64]) {
        for (o, &xl) in out.iter_mut().zip(xs) {
            *o = crate::numeric::fsum(zs.iter().map(|&zi| self.b1(x0, xl, zi) * zi));
        }
    }
}

/// Parameters of the quadratic-tanh family.
///
/// `f = kappa_g tanh(x0+x1+y+z0+z1) + a u + c v - alpha/2 u^2 + gamma/2 v^2 + beta u v`,
/// `b_i(x0, x1, z) = kappa_bi tanh(x0+x1) / (1+|z|)`, `Phi = kappa_phi tanh(x0+x1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub a_lin: f64,
    pub c_lin: f64,
    pub kappa_g: f64,
    pub kappa_b0: f64,
    pub kappa_b1: f64,
    pub kappa_phi: f64,
    /// Amplitude of the state-dependent part of the uncontrolled diffusions.
    pub sigma_amp: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            gamma: 2.0,
            beta: 1.0,
            a_lin: 1.0,
            c_lin: 0.5,
            kappa_g: 0.5,
            kappa_b0: 1.0,
            kappa_b1: 1.0,
            kappa_phi: 1.0,
            sigma_amp: 0.5,
        }
    }
}

impl ModelParams {
    /// All couplings switched off: `f = 0`, `b = 0`, `Phi = 0`.
    pub fn null() -> Self {
        Self {
            a_lin: 0.0,
            c_lin: 0.0,
            kappa_g: 0.0,
            kappa_b0: 0.0,
            kappa_b1: 0.0,
            kappa_phi: 0.0,
            sigma_amp: 0.0,
            ..Self::default()
        }
    }

    /// Common monotonicity modulus `min(alpha, gamma)`.
    pub fn lambda_mod(&self) -> f64 {
        self.alpha.min(self.gamma)
    }

    /// Cross-coupling constant `|beta|`.
    pub fn mu_mod(&self) -> f64 {
        self.beta.abs()
    }

    /// Errors unless `0 <= mu < lambda`.
    pub fn check_saddle_condition(&self) -> crate::Result<()> {
        let (lambda, mu) = (self.lambda_mod(), self.mu_mod());
        if !(lambda > 0.0) || !(mu < lambda) {
            return Err(crate::Error::Assumption(format!(
                "mu >= lambda (mu = {mu}, lambda = {lambda})"
            )));
        }
        Ok(())
    }

    /// Curvature of the leader's reduced problem, `alpha + beta^2/gamma`.
    pub fn reduced_curvature(&self) -> f64 {
        self.alpha + self.beta * self.beta / self.gamma
    }

    // Uncontrolled forward dynamics. These use sines of sums so that the
    // mean over minors separates via the angle-addition formula.

    pub fn drift0_unc(&self, x0: f64, xl: f64) -> f64 {
        self.kappa_b0 * (x0 + xl).sin()
    }

    pub fn diff0_unc(&self, x0: f64, xl: f64) -> f64 {
        1.0 + self.sigma_amp * (x0 + xl).sin()
    }

    pub fn drift1_unc(&self, x0: f64, xj: f64, xl: f64) -> f64 {
        self.kappa_b1 * (x0 + xj + xl).sin()
    }

    pub fn diff1_unc(&self, x0: f64, xj: f64, xl: f64) -> f64 {
        1.0 + self.sigma_amp * (x0 + xj + xl).sin()
    }

    /// Uncontrolled running payoff (controls frozen at zero).
    pub fn f_unc(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64) -> f64 {
        self.kappa_g * (x0 + x1 + y + z0 + z1).tanh()
    }
}

impl Coefficients for ModelParams {
    fn f(&self, x0: f64, x1: f64, y: f64, z0: f64, z1: f64, u: f64, v: f64) -> f64 {
        self.kappa_g * (x0 + x1 + y + z0 + z1).tanh() + self.a_lin * u + self.c_lin * v
            - 0.5 * self.alpha * u * u
            + 0.5 * self.gamma * v * v
            + self.beta * u * v
    }

    fn du_f(&self, _: f64, _: f64, _: f64, _: f64, _: f64, u: f64, v: f64) -> f64 {
        self.a_lin - self.alpha * u + self.beta * v
    }

    fn dv_f(&self, _: f64, _: f64, _: f64, _: f64, _: f64, u: f64, v: f64) -> f64 {
        self.c_lin + self.gamma * v + self.beta * u
    }

    fn duu_f(&self, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64) -> f64 {
        -self.alpha
    }

    fn dvv_f(&self, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64) -> f64 {
        self.gamma
    }

    fn duv_f(&self, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64, _: f64) -> f64 {
        self.beta
    }

    fn b0(&self, x0: f64, x1: f64, z: f64) -> f64 {
        self.kappa_b0 * (x0 + x1).tanh() / (1.0 + z.abs())
    }

    fn b1(&self, x0: f64, x1: f64, z: f64) -> f64 {
        self.kappa_b1 * (x0 + x1).tanh() / (1.0 + z.abs())
    }

    fn phi(&self, x0: f64, x1: f64) -> f64 {
        self.kappa_phi * (x0 + x1).tanh()
    }

    fn argmin_v(&self, _: f64, _: f64, _: f64, _: f64, _: f64, u: f64, shift: f64) -> Option<f64> {
        Some(-(self.c_lin + self.beta * u + shift) / self.gamma)
    }

    fn minor_aggregate(&self, x0: f64, xs: &[f64], zs: &[f64], out: &mut [f64]) {
        // b1 factors as kappa tanh(x0+xl) * 1/(1+|z|), so one pass over z suffices.
        let s = crate::numeric::fsum(zs.iter().map(|&z| z / (1.0 + z.abs())));
        for (o, &xl) in out.iter_mut().zip(xs) {
            *o = self.kappa_b1 * (x0 + xl).tanh() * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Generic(ModelParams);

    impl Coefficients for Generic {
        fn f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.f(a, b, c, d, e, u, v)
        }
        fn du_f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.du_f(a, b, c, d, e, u, v)
        }
        fn dv_f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.dv_f(a, b, c, d, e, u, v)
        }
        fn duu_f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.duu_f(a, b, c, d, e, u, v)
        }
        fn dvv_f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.dvv_f(a, b, c, d, e, u, v)
        }
        fn duv_f(&self, a: f64, b: f64, c: f64, d: f64, e: f64, u: f64, v: f64) -> f64 {
            self.0.duv_f(a, b, c, d, e, u, v)
        }
        fn b0(&self, x0: f64, x1: f64, z: f64) -> f64 {
            self.0.b0(x0, x1, z)
        }
        fn b1(&self, x0: f64, x1: f64, z: f64) -> f64 {
            self.0.b1(x0, x1, z)
        }
        fn phi(&self, x0: f64, x1: f64) -> f64 {
            self.0.phi(x0, x1)
        }
    }

    #[test]
    fn epsilon_schedule() {
        assert_eq!(epsilon_n(16, 1.0), 0.125);
        assert_eq!(epsilon_n(1, 1.0), 1.0);
        assert!((epsilon_n(81, 1.0) - 1.0 / 27.0).abs() < 1e-15);
        for n in [2usize, 7, 64, 1000] {
            let e = epsilon_n(n, 2.5) * (n as f64).powf(0.75);
            assert!((e - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_aggregate_matches_double_loop() {
        let m = ModelParams::default();
        let xs = [0.3, -1.2, 2.0, 0.0, 0.7];
        let zs = [0.5, -0.1, 3.0, -2.2, 0.0];
        let mut fast = [0.0; 5];
        let mut slow = [0.0; 5];
        m.minor_aggregate(0.4, &xs, &zs, &mut fast);
        Generic(m).minor_aggregate(0.4, &xs, &zs, &mut slow);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn saddle_condition() {
        let mut m = ModelParams::default();
        assert!(m.check_saddle_condition().is_ok());
        m.beta = 3.0;
        let msg = m.check_saddle_condition().unwrap_err().to_string();
        assert!(msg.contains("mu >= lambda"));
    }

    #[test]
    fn bounded_drift_times_z() {
        let m = ModelParams::default();
        for &z in &[-1e6, -3.0, 0.0, 0.5, 1e9] {
            assert!((m.b0(1.0, 2.0, z) * z).abs() <= m.kappa_b0.abs());
            assert!((m.b1(-1.0, 0.2, z) * z).abs() <= m.kappa_b1.abs());
        }
    }
}
