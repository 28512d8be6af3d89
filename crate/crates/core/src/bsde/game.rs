//! The N-player game in weak formulation: forward states are Brownian and
//! the controls enter only through the driver.

use crate::exec::try_map_indexed;
use crate::forward::PathBundle;
use crate::hamiltonian::{
    eval_hamiltonian_n, follower_response, hbar_n_with_saddle, minor_shifts, PointView, SADDLE_TOL,
};
use crate::model::{Coefficients, Scenario};
use crate::numeric::fsum;
use crate::{Error, Result};

use super::{solve_bsde_with, BsdeSolution, ControlPaths, PicardOptions, States, SymmetricBasis};

/// How the minors play in a controlled solve.
#[derive(Clone, Copy, Debug)]
pub enum MinorPolicy<'a> {
    /// Open-loop paths taken from `ControlPaths::v`.
    Fixed(&'a ControlPaths),
    /// Each minor minimises the Hamiltonian against the major's control.
    BestResponse,
}

/// Forward states `X^j = x_j + W^j` of the weak formulation.
pub fn weak_states(s: &Scenario, n_minor: usize, bundle: &PathBundle) -> Result<States> {
    if bundle.n_minor != n_minor {
        return Err(Error::Dimension(format!(
            "bundle carries {} minors, expected {n_minor}",
            bundle.n_minor
        )));
    }
    if n_minor == 0 {
        return Err(Error::OutOfRange {
            key: "N".into(),
            msg: "need at least one minor".into(),
        });
    }
    if bundle.grid.n_steps != s.n_steps || bundle.grid.t_start != s.t_start || bundle.grid.t_end != s.t_end {
        return Err(Error::Dimension("bundle time grid differs from the scenario".into()));
    }
    Ok(States::brownian(bundle, s.x0_init, &s.minor_starts(n_minor)?))
}

/// `(1/N) sum_l Phi(X^0_T, X^l_T)` per sample.
pub fn game_terminal<C: Coefficients>(c: &C, states: &States) -> Vec<f64> {
    let ns = states.n_steps;
    (0..states.n_samples)
        .map(|k| {
            let x = states.at(k, ns);
            fsum(x[1..].iter().map(|&xl| c.phi(x[0], xl))) / states.n_minor as f64
        })
        .collect()
}

fn check_controls(u: &ControlPaths, bundle: &PathBundle) -> Result<()> {
    if u.n_samples != bundle.n_samples || u.n_steps != bundle.grid.n_steps || u.n_minor != bundle.n_minor {
        return Err(Error::Dimension(format!(
            "control paths {}x{}x{} do not match bundle {}x{}x{}",
            u.n_samples, u.n_steps, u.n_minor, bundle.n_samples, bundle.grid.n_steps, bundle.n_minor
        )));
    }
    if let Some(x) = u.u.iter().chain(&u.v).find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("control value {x}")));
    }
    Ok(())
}

/// Every minor's best response to `u` at one point.
pub fn best_responses<C: Coefficients>(p: PointView<'_>, u: f64, c: &C) -> Result<Vec<f64>> {
    let shifts = minor_shifts(p, c);
    (1..=p.n_minor())
        .map(|l| follower_response(c, p.x[0], p.x[l], p.y, p.z[0], p.z[l], u, shifts[l - 1], SADDLE_TOL))
        .collect()
}

/// Game BSDE under the major control path `u_ctrl.u` and the given minor policy.
pub fn solve_controlled_bsde(
    s: &Scenario,
    n_minor: usize,
    bundle: &PathBundle,
    u_ctrl: &ControlPaths,
    v_ctrl: MinorPolicy<'_>,
) -> Result<BsdeSolution> {
    solve_controlled_with(s, &s.model, n_minor, bundle, u_ctrl, v_ctrl)
}

/// [`solve_controlled_bsde`] for an arbitrary coefficient set.
pub fn solve_controlled_with<C: Coefficients + Sync>(
    s: &Scenario,
    c: &C,
    n_minor: usize,
    bundle: &PathBundle,
    u_ctrl: &ControlPaths,
    v_ctrl: MinorPolicy<'_>,
) -> Result<BsdeSolution> {
    let states = weak_states(s, n_minor, bundle)?;
    check_controls(u_ctrl, bundle)?;
    if let MinorPolicy::Fixed(v) = v_ctrl {
        check_controls(v, bundle)?;
    }
    let eps = s.eps_n(n_minor);
    let driver = |i: usize, k: usize, y: f64, z: &[f64]| -> Result<f64> {
        let p = PointView::new(states.at(k, i), y, z, eps)?;
        let u = u_ctrl.u_at(k, i);
        match v_ctrl {
            MinorPolicy::Fixed(v) => eval_hamiltonian_n(p, u, v.v_at(k, i), c),
            MinorPolicy::BestResponse => eval_hamiltonian_n(p, u, &best_responses(p, u, c)?, c),
        }
    };
    let terminal = game_terminal(c, &states);
    let basis = SymmetricBasis::new(&states);
    let mut sol = solve_bsde_with(&driver, &terminal, bundle, &basis, PicardOptions::default())?;

    let mut realised = u_ctrl.clone();
    match v_ctrl {
        MinorPolicy::Fixed(v) => realised.v.clone_from(&v.v),
        MinorPolicy::BestResponse => {
            let ns = bundle.grid.n_steps;
            let rows = try_map_indexed(bundle.n_samples, |k| {
                let mut out = Vec::with_capacity(ns * n_minor);
                for i in 0..ns {
                    let p = PointView::new(states.at(k, i), sol.y_at(k, i), sol.z_at(k, i), eps)?;
                    out.extend(best_responses(p, u_ctrl.u_at(k, i), c)?);
                }
                Ok::<_, Error>(out)
            })?;
            realised.v = rows.concat();
        }
    }
    sol.controls = Some(realised);
    Ok(sol)
}

/// Game BSDE with the saddle-point Hamiltonian as driver, together with the
/// realised saddle controls evaluated at the final `(Y, Z)`.
pub fn solve_saddle_bsde(s: &Scenario, n_minor: usize, bundle: &PathBundle) -> Result<BsdeSolution> {
    s.model.check_saddle_condition()?;
    solve_saddle_with(s, &s.model, n_minor, bundle)
}

/// [`solve_saddle_bsde`] for an arbitrary coefficient set satisfying the
/// saddle assumptions.
pub fn solve_saddle_with<C: Coefficients + Sync>(
    s: &Scenario,
    c: &C,
    n_minor: usize,
    bundle: &PathBundle,
) -> Result<BsdeSolution> {
    let states = weak_states(s, n_minor, bundle)?;
    let eps = s.eps_n(n_minor);
    let driver = |i: usize, k: usize, y: f64, z: &[f64]| -> Result<f64> {
        let p = PointView::new(states.at(k, i), y, z, eps)?;
        hbar_n_with_saddle(p, c).map(|(h, _)| h)
    };
    let terminal = game_terminal(c, &states);
    let basis = SymmetricBasis::new(&states);
    let mut sol = solve_bsde_with(&driver, &terminal, bundle, &basis, PicardOptions::default())?;

    let ns = bundle.grid.n_steps;
    let rows = try_map_indexed(bundle.n_samples, |k| {
        let mut u = Vec::with_capacity(ns);
        let mut v = Vec::with_capacity(ns * n_minor);
        for i in 0..ns {
            let p = PointView::new(states.at(k, i), sol.y_at(k, i), sol.z_at(k, i), eps)?;
            let (_, sp) = hbar_n_with_saddle(p, c)?;
            u.push(sp.u);
            v.extend(sp.v);
        }
        Ok::<_, Error>((u, v))
    })?;
    let (u, v): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    sol.controls = Some(ControlPaths {
        n_samples: bundle.n_samples,
        n_steps: ns,
        n_minor,
        u: u.concat(),
        v: v.concat(),
    });
    Ok(sol)
}
