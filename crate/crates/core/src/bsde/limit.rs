//! Limit BSDE on a spatial grid for `X^0`, and the limit-game BSDE over the
//! major player's noise.

use serde::{Deserialize, Serialize};

use crate::exec::try_map_indexed;
use crate::forward::{PathBundle, TimeGrid};
use crate::limit::{LimitHamiltonian, LimitPoint};
use crate::model::{Coefficients, Scenario};
use crate::hamiltonian::{follower_response, SADDLE_TOL};
use crate::quadrature::gauss_hermite;
use crate::{Error, Result};

use super::{major_only, solve_bsde_with, BsdeSolution, ControlPaths, FeatureTable, PicardOptions};

/// Half-width of the spatial grid in units of `sqrt(T - t)`.
pub const GRID_HALF_WIDTH: f64 = 6.0;
/// Polynomial degree in `X^0` of the regression basis for the limit game.
pub const LIMIT_BASIS_DEGREE: usize = 4;

/// Natural cubic spline through equally spaced nodes, constant outside.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformSpline {
    lo: f64,
    dx: f64,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl UniformSpline {
    pub fn new(lo: f64, dx: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm for m[i-1] + 4 m[i] + m[i+1] = 6 d2y / dx^2.
            let m = n - 2;
            let mut c = vec![0.0; m];
            let mut d = vec![0.0; m];
            for i in 0..m {
                let rhs = 6.0 * (values[i] - 2.0 * values[i + 1] + values[i + 2]) / (dx * dx);
                let (ci, di) = if i == 0 {
                    (0.25, rhs / 4.0)
                } else {
                    let den = 4.0 - c[i - 1];
                    (1.0 / den, (rhs - d[i - 1]) / den)
                };
                c[i] = ci;
                d[i] = di;
            }
            for i in (0..m).rev() {
                second[i + 1] = if i + 1 == m { d[i] } else { d[i] - c[i] * second[i + 2] };
            }
        }
        Self { lo, dx, values, second }
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.dx * (self.values.len() - 1) as f64
    }

    /// Value at `x` and whether `x` lay outside the node range.
    pub fn eval(&self, x: f64) -> (f64, bool) {
        let n = self.values.len();
        if x <= self.lo {
            return (self.values[0], x < self.lo);
        }
        if x >= self.hi() {
            return (self.values[n - 1], x > self.hi());
        }
        let pos = (x - self.lo) / self.dx;
        let i = (pos.floor() as usize).min(n - 2);
        let b = pos - i as f64;
        let a = 1.0 - b;
        let h2 = self.dx * self.dx / 6.0;
        let v = a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h2;
        (v, false)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LimitDiagnostics {
    /// Quadrature points that fell outside the grid and were clamped.
    pub clamped: usize,
    pub warnings: Vec<String>,
}

/// Grid solution `(Y(t_i, x), Z^0(t_i, x))` of the limit BSDE.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitBsdeSolution {
    pub times: Vec<f64>,
    pub x0_nodes: Vec<f64>,
    /// `[step][node]`, `n_steps + 1` rows.
    pub y_grid: Vec<Vec<f64>>,
    /// `[step][node]`, `n_steps` rows.
    pub z_grid: Vec<Vec<f64>>,
    pub diagnostics: LimitDiagnostics,
    y_splines: Vec<UniformSpline>,
    z_splines: Vec<UniformSpline>,
}

impl LimitBsdeSolution {
    /// `Y(t_i, x)` by spline interpolation.
    pub fn y_at(&self, i: usize, x: f64) -> f64 {
        self.y_splines[i].eval(x).0
    }

    /// `Z^0(t_i, x)` by spline interpolation.
    pub fn z_at(&self, i: usize, x: f64) -> f64 {
        self.z_splines[i].eval(x).0
    }

    /// `Y` at the start of the horizon and the major's initial state.
    pub fn y_start(&self, x0: f64) -> f64 {
        self.y_at(0, x0)
    }
}

/// Limit BSDE with the reduced limit Hamiltonian as driver and the averaged
/// terminal payoff.
pub fn solve_limit_bsde(s: &Scenario) -> Result<LimitBsdeSolution> {
    let ham = LimitHamiltonian::from_scenario(s)?;
    let terminal = averaged_terminal(s, &s.model)?;
    solve_limit_bsde_with(s, |t, x, y, z| ham.reduced(&LimitPoint { s: t, x0: x, y, z0: z }).map(|(v, _)| v), terminal)
}

/// `x -> E[Phi(x, X^1_T)]` with `X^1_T ~ N(xbar, T - t)`.
pub fn averaged_terminal<'a, C>(s: &Scenario, c: &'a C) -> Result<impl Fn(f64) -> f64 + Sync + 'a>
where
    C: Coefficients + Sync,
{
    let rule = gauss_hermite(s.quad_order)?;
    let (xbar, var) = (s.xbar_init, s.horizon());
    Ok(move |x: f64| rule.expect(xbar, var, |x1| c.phi(x, x1)))
}

/// Backward recursion on the `X^0` grid for an arbitrary driver
/// `(t, x, y, z) -> value` and terminal function.
pub fn solve_limit_bsde_with<D, T>(s: &Scenario, driver: D, terminal: T) -> Result<LimitBsdeSolution>
where
    D: Fn(f64, f64, f64, f64) -> Result<f64> + Sync,
    T: Fn(f64) -> f64 + Sync,
{
    s.validate()?;
    let grid = TimeGrid::from_scenario(s);
    let h = grid.h();
    let n_nodes = s.grid_nodes;
    if n_nodes < 3 {
        return Err(Error::OutOfRange {
            key: "grid_nodes".into(),
            msg: format!("need at least 3 nodes, got {n_nodes}"),
        });
    }
    let half = GRID_HALF_WIDTH * s.horizon().sqrt();
    let lo = s.x0_init - half;
    let dx = 2.0 * half / (n_nodes - 1) as f64;
    let nodes: Vec<f64> = (0..n_nodes).map(|q| lo + q as f64 * dx).collect();
    let rule = gauss_hermite(s.quad_order)?;
    let sqh = h.sqrt();

    let last: Vec<f64> = nodes.iter().map(|&x| terminal(x)).collect();
    if last.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("limit terminal value".into()));
    }
    let mut y_splines = vec![UniformSpline::new(lo, dx, last.clone())];
    let mut y_rows = vec![last];
    let mut z_rows = Vec::with_capacity(grid.n_steps);
    let mut clamped = 0usize;
    let mut interior_clamped = false;
    for i in (0..grid.n_steps).rev() {
        let t = grid.times[i];
        let next = y_splines.last().expect("terminal row present");
        let rows = try_map_indexed(n_nodes, |q| {
            let x = nodes[q];
            let (mut e, mut z, mut out, mut w_out) = (0.0, 0.0, 0usize, 0.0);
            for (zeta, w) in rule.nodes.iter().zip(&rule.weights) {
                let (v, c) = next.eval(x + sqh * zeta);
                if c {
                    out += 1;
                    w_out += w;
                }
                e += w * v;
                z += w * v * zeta;
            }
            z /= sqh;
            let pred = e + h * driver(t, x, e, z)?;
            let y = e + h * driver(t, x, pred, z)?;
            if !y.is_finite() || !z.is_finite() {
                return Err(Error::NonFinite(format!("limit BSDE at t = {t}, x = {x}")));
            }
            Ok((y, z, out, w_out))
        })?;
        let inner = half / 2.0;
        let mut y_row = Vec::with_capacity(n_nodes);
        let mut z_row = Vec::with_capacity(n_nodes);
        for (q, (y, z, out, w_out)) in rows.into_iter().enumerate() {
            clamped += out;
            if (nodes[q] - s.x0_init).abs() <= inner && w_out > 1e-10 {
                interior_clamped = true;
            }
            y_row.push(y);
            z_row.push(z);
        }
        y_splines.push(UniformSpline::new(lo, dx, y_row.clone()));
        y_rows.push(y_row);
        z_rows.push(z_row);
    }
    y_rows.reverse();
    y_splines.reverse();
    z_rows.reverse();
    let z_splines = z_rows.iter().map(|r| UniformSpline::new(lo, dx, r.clone())).collect();
    let mut diagnostics = LimitDiagnostics {
        clamped,
        warnings: Vec::new(),
    };
    if interior_clamped {
        diagnostics
            .warnings
            .push("grid extrapolation carries weight in the inner half of the grid".into());
    }
    Ok(LimitBsdeSolution {
        times: grid.times,
        x0_nodes: nodes,
        y_grid: y_rows,
        z_grid: z_rows,
        diagnostics,
        y_splines,
        z_splines,
    })
}

/// Major control in the limit game.
#[derive(Clone, Copy, Debug)]
pub enum LimitMajorControl<'a> {
    /// `u` maximises the limit Hamiltonian at the current `(Y, Z)`.
    Saddle,
    /// Open-loop path `[sample][step]` adapted to `W^0`.
    Path(&'a [f64]),
}

/// Minor control in the limit game.
#[derive(Clone, Copy, Debug)]
pub enum LimitMinorControl<'a> {
    /// The representative minor best-responds at the current `(Y, Z, u)`.
    BestResponse,
    /// Closed loop `v = vbar(X^0, X^1, y_ref, z_ref, u_ref) + shift` frozen
    /// along a reference solution; `shift` is `[sample][step]`.
    Frozen {
        reference: &'a BsdeSolution,
        shift: Option<&'a [f64]>,
    },
    /// Open-loop controls on `m` sampled minor paths per `W^0` path.
    Sampled(&'a SampledMinor),
}

/// Minor states and controls on `m` copies of `W^1` per `W^0` path,
/// each laid out `[sample][copy][step]` with `n_steps` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMinor {
    pub m: usize,
    pub n_steps: usize,
    pub x1: Vec<f64>,
    pub v: Vec<f64>,
}

/// Weak-formulation major path `x0_init + W^0`, `[sample][step]` with
/// `n_steps + 1` columns.
pub fn major_paths(s: &Scenario, bundle: &PathBundle) -> Vec<f64> {
    (0..bundle.n_samples)
        .flat_map(|k| bundle.path(k, 0).into_iter().map(|w| s.x0_init + w))
        .collect()
}

/// Limit-game BSDE over the major's noise with driver
/// `E[f(X^0, X^1, y, z0, 0, u, v) + b0(X^0, X^1, z0) z0 u | W^0]`.
///
/// Only `W^0` from the bundle is used unless the minor control is sampled.
pub fn solve_limit_game_bsde(
    s: &Scenario,
    u_ctrl: LimitMajorControl<'_>,
    v_ctrl: LimitMinorControl<'_>,
    bundle: &PathBundle,
) -> Result<BsdeSolution> {
    let grid = &bundle.grid;
    if grid.n_steps != s.n_steps || grid.t_start != s.t_start || grid.t_end != s.t_end {
        return Err(Error::Dimension("bundle time grid differs from the scenario".into()));
    }
    let n = bundle.n_samples;
    let ns = grid.n_steps;
    match u_ctrl {
        LimitMajorControl::Path(u) if u.len() != n * ns => {
            return Err(Error::Dimension(format!("{} major controls for {n} x {ns}", u.len())));
        }
        _ => {}
    }
    match v_ctrl {
        LimitMinorControl::Frozen { reference, shift } => {
            let ok = reference.n_samples == n
                && reference.grid.n_steps == ns
                && reference.controls.as_ref().is_some_and(|c| c.u.len() == n * ns)
                && shift.is_none_or(|v| v.len() == n * ns);
            if !ok {
                return Err(Error::Dimension("frozen minor control does not match the bundle".into()));
            }
        }
        LimitMinorControl::Sampled(sm) => {
            if sm.n_steps != ns || sm.x1.len() != n * sm.m * ns || sm.v.len() != sm.x1.len() || sm.m == 0 {
                return Err(Error::Dimension("sampled minor control does not match the bundle".into()));
            }
        }
        LimitMinorControl::BestResponse => {}
    }

    let c = &s.model;
    let ham = LimitHamiltonian::from_scenario(s)?;
    let x0 = major_paths(s, bundle);
    let x0_at = |k: usize, i: usize| x0[k * (ns + 1) + i];
    let xbar = s.xbar_init;
    let rule = ham.rule.clone();
    let game_f = |x0: f64, x1: f64, y: f64, z0: f64, u: f64, v: f64| {
        c.f(x0, x1, y, z0, 0.0, u, v) + c.b0(x0, x1, z0) * z0 * u
    };

    let driver = |i: usize, k: usize, y: f64, z: &[f64]| -> Result<f64> {
        let t = grid.times[i];
        let pt = LimitPoint { s: t, x0: x0_at(k, i), y, z0: z[0] };
        let u = match u_ctrl {
            LimitMajorControl::Path(u) => u[k * ns + i],
            LimitMajorControl::Saddle => match v_ctrl {
                LimitMinorControl::BestResponse => return ham.reduced(&pt).map(|(v, _)| v),
                _ => {
                    return Err(Error::Assumption(
                        "a saddle major control needs best-responding minors".into(),
                    ))
                }
            },
        };
        match v_ctrl {
            LimitMinorControl::BestResponse => ham.value_and_grad(&pt, u).map(|(v, _)| v),
            LimitMinorControl::Frozen { reference, shift } => {
                let (yr, zr) = (reference.y_at(k, i), reference.z_at(k, i)[0]);
                let ur = reference.controls.as_ref().expect("checked above").u_at(k, i);
                let dv = shift.map_or(0.0, |v| v[k * ns + i]);
                let mut err = None;
                let var = t - s.t_start;
                let value = rule.expect(xbar, var, |x1| {
                    match follower_response(c, pt.x0, x1, yr, zr, 0.0, ur, 0.0, SADDLE_TOL) {
                        Ok(v) => game_f(pt.x0, x1, y, pt.z0, u, v + dv),
                        Err(e) => {
                            err.get_or_insert(e);
                            f64::NAN
                        }
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(value),
                }
            }
            LimitMinorControl::Sampled(sm) => {
                let base = k * sm.m * ns;
                let total: f64 = (0..sm.m)
                    .map(|m| {
                        let at = base + m * ns + i;
                        game_f(pt.x0, sm.x1[at], y, pt.z0, u, sm.v[at])
                    })
                    .sum();
                Ok(total / sm.m as f64)
            }
        }
    };

    let terminal_fn = averaged_terminal(s, c)?;
    // The terminal is an F^{W^0} conditional expectation for every control.
    let terminal: Vec<f64> = (0..n).map(|k| terminal_fn(x0_at(k, ns))).collect();
    let basis = FeatureTable::polynomial(&x0, ns, LIMIT_BASIS_DEGREE, &[]);
    let major = major_only(bundle);
    let mut sol = solve_bsde_with(&driver, &terminal, &major, &basis, PicardOptions::default())?;

    let u_path: Vec<f64> = match u_ctrl {
        LimitMajorControl::Path(u) => u.to_vec(),
        LimitMajorControl::Saddle => {
            let rows = try_map_indexed(n, |k| {
                (0..ns)
                    .map(|i| {
                        let pt = LimitPoint { s: grid.times[i], x0: x0_at(k, i), y: sol.y_at(k, i), z0: sol.z_at(k, i)[0] };
                        ham.maximiser(&pt, SADDLE_TOL)
                    })
                    .collect::<Result<Vec<f64>>>()
            })?;
            rows.concat()
        }
    };
    sol.controls = Some(ControlPaths {
        n_samples: n,
        n_steps: ns,
        n_minor: 0,
        u: u_path,
        v: Vec::new(),
    });
    Ok(sol)
}
