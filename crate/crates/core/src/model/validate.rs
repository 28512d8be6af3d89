use serde::{Deserialize, Serialize};

use super::{Coefficients, Scenario};
use crate::rng::RandomStream;

const PROBE_BOX: f64 = 5.0;
const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub witness: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    /// Empirical constants measured over the probes, by name.
    pub constants: Vec<(String, f64)>,
}

impl ValidationReport {
    fn push(&mut self, rule: &str, witness: String) {
        // Keep the first witness per rule; later ones add nothing.
        if !self.violations.iter().any(|v| v.rule == rule) {
            self.violations.push(Violation {
                rule: rule.to_string(),
                witness,
            });
        }
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Probes the model's monotonicity, cross-coupling and boundedness assumptions
/// at `n_probe` random pairs of points drawn uniformly from `[-5, 5]`.
pub fn validate_assumptions(s: &Scenario, n_probe: usize, stream: &RandomStream) -> ValidationReport {
    let m = &s.model;
    let mut report = probe(m, m.lambda_mod(), m.mu_mod(), n_probe, stream);
    if !(m.mu_mod() < m.lambda_mod()) {
        report.push(
            "Aii mu < lambda",
            format!("mu = {} >= lambda = {}", m.mu_mod(), m.lambda_mod()),
        );
    }
    // Family-specific bounds.
    let checks = [
        ("b0 z bounded", "sup |b0 z|", m.kappa_b0.abs()),
        ("b1 z bounded", "sup |b1 z|", m.kappa_b1.abs()),
        ("Phi Lipschitz", "Phi Lipschitz", m.kappa_phi.abs() * std::f64::consts::SQRT_2),
        ("f bounded at zero controls", "sup |f(xi,0,0)|", m.kappa_g.abs()),
    ];
    for (rule, name, bound) in checks {
        let c = report.constant(name).unwrap_or(f64::NAN);
        if !(c <= bound * (1.0 + SLACK) + SLACK) {
            report.push(rule, format!("empirical {c} exceeds {bound}"));
        }
    }
    report.ok = report.violations.is_empty();
    report
}

/// Generic probe sweep for any coefficient set with claimed moduli `lambda`, `mu`.
pub fn probe<C: Coefficients>(
    c: &C,
    lambda: f64,
    mu: f64,
    n_probe: usize,
    stream: &RandomStream,
) -> ValidationReport {
    let mut report = ValidationReport {
        ok: true,
        violations: Vec::new(),
        constants: Vec::new(),
    };
    if n_probe < 10 {
        report.push("probe count", format!("n_probe = {n_probe} < 10"));
    }
    if !(lambda > 0.0) {
        report.push("Ai u-monotonicity", format!("lambda = {lambda} is not positive"));
    }

    // Each probe consumes 7 coordinates for (xi,u,v) and 7 for (xi',u',v').
    let draws = stream.uniforms(14 * n_probe, -PROBE_BOX, PROBE_BOX);
    let mut lambda_u = f64::INFINITY;
    let mut lambda_v = f64::INFINITY;
    let mut mu_u = 0.0f64;
    let mut mu_v = 0.0f64;
    let mut f_lip = 0.0f64;
    let mut f0_sup = 0.0f64;
    let mut b0z_sup = 0.0f64;
    let mut b1z_sup = 0.0f64;
    let mut phi_lip = 0.0f64;

    for p in draws.chunks_exact(14) {
        let (a, b) = p.split_at(7);
        let (x0, x1, y, z0, z1, u, v) = (a[0], a[1], a[2], a[3], a[4], a[5], a[6]);
        let (x0p, x1p, yp, z0p, z1p, up, vp) = (b[0], b[1], b[2], b[3], b[4], b[5], b[6]);
        let du = u - up;
        let dv = v - vp;

        // Ai: moduli along each control direction.
        let gu = (c.du_f(x0, x1, y, z0, z1, u, v) - c.du_f(x0, x1, y, z0, z1, up, v)) * du;
        let mod_u = -gu / (du * du);
        lambda_u = lambda_u.min(mod_u);
        if !(gu <= -lambda * du * du * (1.0 - SLACK) + SLACK) {
            report.push(
                "Ai u-monotonicity",
                format!("xi=({x0},{x1},{y},{z0},{z1}) u={u} u'={up} v={v}: modulus {mod_u}"),
            );
        }
        let gv = (c.dv_f(x0, x1, y, z0, z1, u, v) - c.dv_f(x0, x1, y, z0, z1, u, vp)) * dv;
        let mod_v = gv / (dv * dv);
        lambda_v = lambda_v.min(mod_v);
        if !(gv >= lambda * dv * dv * (1.0 - SLACK) - SLACK) {
            report.push(
                "Ai v-monotonicity",
                format!("xi=({x0},{x1},{y},{z0},{z1}) u={u} v={v} v'={vp}: modulus {mod_v}"),
            );
        }

        // Aii cross bounds.
        let cu = (c.du_f(x0, x1, y, z0, z1, u, v) - c.du_f(x0, x1, y, z0, z1, u, vp)).abs() / dv.abs();
        mu_u = mu_u.max(cu);
        if !(cu <= mu * (1.0 + SLACK) + SLACK) {
            report.push("Aii u-cross", format!("|D_u f(v) - D_u f(v')|/|v-v'| = {cu} > mu = {mu}"));
        }
        let cv = (c.dv_f(x0, x1, y, z0, z1, u, v) - c.dv_f(x0, x1, y, z0, z1, up, v)).abs() / du.abs();
        mu_v = mu_v.max(cv);
        if !(cv <= mu * (1.0 + SLACK) + SLACK) {
            report.push("Aii v-cross", format!("|D_v f(u) - D_v f(u')|/|u-u'| = {cv} > mu = {mu}"));
        }

        // Aii Lipschitz in xi at fixed controls and bound at zero controls.
        let dxi = ((x0 - x0p).powi(2)
            + (x1 - x1p).powi(2)
            + (y - yp).powi(2)
            + (z0 - z0p).powi(2)
            + (z1 - z1p).powi(2))
        .sqrt();
        let df = (c.f(x0, x1, y, z0, z1, u, v) - c.f(x0p, x1p, yp, z0p, z1p, u, v)).abs();
        f_lip = f_lip.max(df / dxi);
        f0_sup = f0_sup.max(c.f(x0, x1, y, z0, z1, 0.0, 0.0).abs());

        b0z_sup = b0z_sup.max((c.b0(x0, x1, z0) * z0).abs());
        b1z_sup = b1z_sup.max((c.b1(x0, x1, z1) * z1).abs());
        // Large |z| probes the saturation of b z.
        let zbig = z0 * 1e3;
        b0z_sup = b0z_sup.max((c.b0(x0, x1, zbig) * zbig).abs());
        b1z_sup = b1z_sup.max((c.b1(x0, x1, zbig) * zbig).abs());

        let dx = ((x0 - x0p).powi(2) + (x1 - x1p).powi(2)).sqrt();
        phi_lip = phi_lip.max((c.phi(x0, x1) - c.phi(x0p, x1p)).abs() / dx);
    }

    for (name, value) in [
        ("lambda_u", lambda_u),
        ("lambda_v", lambda_v),
        ("mu_u", mu_u),
        ("mu_v", mu_v),
        ("f Lipschitz in xi", f_lip),
        ("sup |f(xi,0,0)|", f0_sup),
        ("sup |b0 z|", b0z_sup),
        ("sup |b1 z|", b1z_sup),
        ("Phi Lipschitz", phi_lip),
    ] {
        if !value.is_finite() {
            report.push("finite constants", format!("{name} = {value}"));
        }
        report.constants.push((name.to_string(), value));
    }
    report.ok = report.violations.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn scenario(model: ModelParams) -> Scenario {
        Scenario {
            model,
            ..Scenario::default()
        }
    }

    #[test]
    fn default_family_passes() {
        let r = validate_assumptions(&scenario(ModelParams::default()), 1000, &RandomStream::new(1, "probe", 0));
        assert!(r.ok, "{:?}", r.violations);
        assert!((r.constant("lambda_u").unwrap() - 2.0).abs() < 1e-9);
        assert!((r.constant("mu_u").unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beta_close_to_lambda_passes() {
        let m = ModelParams {
            beta: 1.999,
            ..ModelParams::default()
        };
        let r = validate_assumptions(&scenario(m), 1000, &RandomStream::new(2, "probe", 0));
        assert!(r.ok, "{:?}", r.violations);
    }

    #[test]
    fn zero_alpha_fails_u_monotonicity() {
        let m = ModelParams {
            alpha: 0.0,
            ..ModelParams::default()
        };
        let r = validate_assumptions(&scenario(m), 100, &RandomStream::new(3, "probe", 0));
        assert!(!r.ok);
        assert!(r.violations.iter().any(|v| v.rule == "Ai u-monotonicity"));
    }
}
