//! Backward solvers.
//!
//! [`solve_bsde_regression`] is the generic least-squares Monte Carlo scheme
//! for `dY = -driver ds + sum_j Z^j dW^j`. The submodules build the game,
//! uncontrolled and limit problems on top of it.

mod basis;
pub mod game;
pub mod limit;
pub mod uncontrolled;

pub use basis::{FeatureTable, RegressionBasis, States, SymmetricBasis};

use serde::{Deserialize, Serialize};

use crate::exec::{map_indexed, try_map_indexed};
use crate::forward::{PathBundle, TimeGrid};
use crate::numeric::{fsum, ExactSum};
use crate::regression::{Design, Regressor};
use crate::{Error, Result};

/// Picard tolerance on the change of `Y_t` between sweeps.
pub const PICARD_TOL: f64 = 1e-6;
/// Default cap on Picard sweeps.
pub const PICARD_MAX_SWEEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_sweeps: PICARD_MAX_SWEEPS,
            tol: PICARD_TOL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BsdeDiagnostics {
    /// Largest regression condition number per step.
    pub condition: Vec<f64>,
    /// Estimated mean squared error of the fitted conditional expectation
    /// per step, `(active columns / samples) * mean squared residual`.
    pub fit_noise: Vec<f64>,
    /// Steps where a ridge-regularised fit was used.
    pub ridge_steps: Vec<usize>,
    /// Change of `Y_t` after each sweep beyond the first.
    pub picard_residuals: Vec<f64>,
    pub sweeps: usize,
    /// Monte Carlo standard error of `Y_t`.
    pub mc_std: f64,
    /// `h` times the largest observed driver sensitivity to `(y, z)`.
    pub stability: f64,
    pub warnings: Vec<String>,
}

impl BsdeDiagnostics {
    /// Last Picard residual, or 0 when only one sweep ran.
    pub fn picard_residual(&self) -> f64 {
        self.picard_residuals.last().copied().unwrap_or(0.0)
    }
}

/// Control paths realised along a solution, `u: [sample][step]`,
/// `v: [sample][step][minor]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPaths {
    pub n_samples: usize,
    pub n_steps: usize,
    pub n_minor: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl ControlPaths {
    pub fn constant(n_samples: usize, n_steps: usize, n_minor: usize, u: f64, v: f64) -> Self {
        Self {
            n_samples,
            n_steps,
            n_minor,
            u: vec![u; n_samples * n_steps],
            v: vec![v; n_samples * n_steps * n_minor],
        }
    }

    pub fn u_at(&self, k: usize, i: usize) -> f64 {
        self.u[k * self.n_steps + i]
    }

    pub fn v_at(&self, k: usize, i: usize) -> &[f64] {
        let s = (k * self.n_steps + i) * self.n_minor;
        &self.v[s..s + self.n_minor]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub n_samples: usize,
    pub n_minor: usize,
    /// `[sample][step]`, `n_steps + 1` columns.
    pub y: Vec<f64>,
    /// `[sample][step][j]` for `j = 0..=N`, `n_steps` steps.
    pub z: Vec<f64>,
    /// Driver values of the final sweep, `[sample][step]`.
    pub drivers: Vec<f64>,
    pub controls: Option<ControlPaths>,
    pub diagnostics: BsdeDiagnostics,
}

impl BsdeSolution {
    pub fn y_at(&self, k: usize, i: usize) -> f64 {
        self.y[k * (self.grid.n_steps + 1) + i]
    }

    pub fn z_at(&self, k: usize, i: usize) -> &[f64] {
        let s = (k * self.grid.n_steps + i) * (self.n_minor + 1);
        &self.z[s..s + self.n_minor + 1]
    }

    pub fn driver_at(&self, k: usize, i: usize) -> f64 {
        self.drivers[k * self.grid.n_steps + i]
    }

    /// Initial value `Y_t` (identical on every sample).
    pub fn y0(&self) -> f64 {
        self.y[0]
    }
}

/// Generic backward scheme, iterated `picard_iters` times at most.
pub fn solve_bsde_regression<D, B>(
    driver: &D,
    terminal: &[f64],
    bundle: &PathBundle,
    basis: &B,
    picard_iters: usize,
) -> Result<BsdeSolution>
where
    D: Fn(usize, usize, f64, &[f64]) -> Result<f64> + Sync,
    B: RegressionBasis,
{
    solve_bsde_with(
        driver,
        terminal,
        bundle,
        basis,
        PicardOptions {
            max_sweeps: picard_iters,
            tol: PICARD_TOL,
        },
    )
}

/// Backward Euler scheme with regression conditional expectations.
///
/// At step `i` one least-squares fit of `Y_{i+1}` on the columns
/// `phi(X_i)`, `phi(X_i) dW^0_i` and `sum_j psi(X_i, j) dW^j_i` yields
/// `E_i[Y_{i+1}]`, `Z^0_i` and the pooled minor `Z^j_i` at once. Then
/// `Y_i = E_i[Y_{i+1}] + h driver(i, y_hat, Z_i)`, where `y_hat` comes from a
/// predictor step in the first sweep and is the previous sweep's `Y_i` after.
pub fn solve_bsde_with<D, B>(
    driver: &D,
    terminal: &[f64],
    bundle: &PathBundle,
    basis: &B,
    opts: PicardOptions,
) -> Result<BsdeSolution>
where
    D: Fn(usize, usize, f64, &[f64]) -> Result<f64> + Sync,
    B: RegressionBasis,
{
    let n = bundle.n_samples;
    let ns = bundle.grid.n_steps;
    let n_minor = bundle.n_minor;
    let nz = n_minor + 1;
    let h = bundle.grid.h();
    if terminal.len() != n {
        return Err(Error::Dimension(format!("{} terminal values for {n} samples", terminal.len())));
    }
    if opts.max_sweeps == 0 {
        return Err(Error::OutOfRange {
            key: "picard_iters".into(),
            msg: "need at least one sweep".into(),
        });
    }
    if n_minor > 0 && basis.minor_dim() == 0 {
        return Err(Error::Dimension("basis has no minor features but the bundle has minors".into()));
    }
    if let Some(k) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("terminal value on sample {k}")));
    }

    let cols = ns + 1;
    let mut y = vec![0.0; n * cols];
    for k in 0..n {
        y[k * cols + ns] = terminal[k];
    }
    let mut z = vec![0.0; n * ns * nz];
    let mut drv = vec![0.0; n * ns];
    let mut prev: Option<Vec<f64>> = None;
    let mut diag = BsdeDiagnostics {
        condition: vec![1.0; ns],
        fit_noise: vec![0.0; ns],
        ..BsdeDiagnostics::default()
    };

    let p = basis.dim();
    let pm = basis.minor_dim();
    // The design depends on the states only, so it is built and factorised
    // once per step and reused by every sweep.
    let width = 2 * p + if n_minor > 0 { pm } else { 0 };
    let designs = (0..ns)
        .map(|i| {
            let rows = map_indexed(n, |k| {
                let mut r = vec![0.0; width];
                basis.fill(k, i, &mut r[..p]);
                let dw0 = bundle.dw(k, 0)[i];
                for c in 0..p {
                    r[p + c] = r[c] * dw0;
                }
                if n_minor > 0 {
                    let mut psi = vec![0.0; pm];
                    let mut sums = vec![ExactSum::new(); pm];
                    for j in 1..=n_minor {
                        basis.fill_minor(k, j, i, &mut psi);
                        let dw = bundle.dw(k, j)[i];
                        for (acc, v) in sums.iter_mut().zip(&psi) {
                            acc.add(v * dw);
                        }
                    }
                    for (c, acc) in sums.iter().enumerate() {
                        r[2 * p + c] = acc.value();
                    }
                }
                r
            });
            Design::new(n, width, rows.concat())
        })
        .collect::<Result<Vec<_>>>()?;
    let regressors = designs.iter().map(Regressor::new).collect::<Result<Vec<_>>>()?;

    for sweep in 0..opts.max_sweeps {
        let mut ridge_steps = Vec::new();
        for i in (0..ns).rev() {
            let y_next: Vec<f64> = (0..n).map(|k| y[k * cols + i + 1]).collect();
            let design = &designs[i];
            let reg = &regressors[i];
            let fit = reg.fit(&y_next)?;
            diag.condition[i] = reg.diagnostics.condition;
            if reg.diagnostics.ridge {
                ridge_steps.push(i);
            }

            let coef = &fit.coef;
            let e = map_indexed(n, |k| {
                let row = design.row(k);
                let mut zk = vec![0.0; nz];
                let e: f64 = (0..p).map(|c| coef[c] * row[c]).sum();
                zk[0] = (0..p).map(|c| coef[p + c] * row[c]).sum();
                if n_minor > 0 {
                    let mut psi = vec![0.0; pm];
                    for j in 1..=n_minor {
                        basis.fill_minor(k, j, i, &mut psi);
                        zk[j] = (0..pm).map(|c| coef[2 * p + c] * psi[c]).sum();
                    }
                }
                (e, zk)
            });
            for (k, (_, zk)) in e.iter().enumerate() {
                let base = (k * ns + i) * nz;
                z[base..base + nz].copy_from_slice(zk);
            }
            let e: Vec<f64> = e.into_iter().map(|(e, _)| e).collect();
            let resid = fsum((0..n).map(|k| {
                let zk = &z[(k * ns + i) * nz..(k * ns + i + 1) * nz];
                let r = y_next[k] - e[k] - fsum(zk.iter().enumerate().map(|(j, zj)| zj * bundle.dw(k, j)[i]));
                r * r
            })) / n as f64;
            diag.fit_noise[i] = reg.diagnostics.active_columns as f64 / n as f64 * resid;

            let z_ref = &z;
            let prev_ref = prev.as_deref();
            let e_ref = &e;
            let d = try_map_indexed(n, |k| {
                let zk = &z_ref[(k * ns + i) * nz..(k * ns + i + 1) * nz];
                let y_hat = match prev_ref {
                    // Predictor pass for the implicit dependence on y.
                    None => e_ref[k] + h * driver(i, k, e_ref[k], zk)?,
                    Some(py) => py[k * cols + i],
                };
                let v = driver(i, k, y_hat, zk)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("driver at step {i}, sample {k}")))
                }
            })?;
            for k in 0..n {
                drv[k * ns + i] = d[k];
                y[k * cols + i] = e[k] + h * d[k];
            }
        }
        ridge_steps.reverse();
        diag.ridge_steps = ridge_steps;
        diag.sweeps = sweep + 1;
        if let Some(py) = &prev {
            let r = (0..n).map(|k| (y[k * cols] - py[k * cols]).abs()).fold(0.0, f64::max);
            diag.picard_residuals.push(r);
            let hist = &diag.picard_residuals;
            if hist.len() >= 4 && hist[hist.len() - 4..].windows(2).all(|w| w[1] > w[0]) {
                return Err(Error::PicardDivergence(hist.clone()));
            }
            if r <= opts.tol {
                break;
            }
            if sweep + 1 == opts.max_sweeps && opts.max_sweeps > 1 {
                diag.warnings.push(format!(
                    "Picard iteration stopped after {} sweeps with residual {r:e}",
                    opts.max_sweeps
                ));
            }
        }
        prev = Some(y.clone());
    }

    // Pathwise residual terminal + h sum d - sum Z dW has mean Y_t; its spread
    // gives the Monte Carlo error of Y_t.
    let r: Vec<f64> = (0..n)
        .map(|k| {
            let mut acc = vec![terminal[k]];
            for i in 0..ns {
                acc.push(h * drv[k * ns + i]);
                let zk = &z[(k * ns + i) * nz..(k * ns + i + 1) * nz];
                for (j, zj) in zk.iter().enumerate() {
                    acc.push(-zj * bundle.dw(k, j)[i]);
                }
            }
            fsum(acc)
        })
        .collect();
    let mean = fsum(r.iter().copied()) / n as f64;
    let var = fsum(r.iter().map(|v| (v - mean) * (v - mean))) / (n - 1).max(1) as f64;
    diag.mc_std = (var / n as f64).sqrt();

    diag.stability = h * driver_sensitivity(driver, &y, &z, ns, nz, n)?;
    if diag.stability > 0.5 {
        diag.warnings.push(format!("h * driver Lipschitz estimate = {:.3} exceeds 0.5", diag.stability));
    }

    Ok(BsdeSolution {
        grid: bundle.grid.clone(),
        n_samples: n,
        n_minor,
        y,
        z,
        drivers: drv,
        controls: None,
        diagnostics: diag,
    })
}

/// The same bundle with the minor noises dropped.
pub(crate) fn major_only(bundle: &PathBundle) -> PathBundle {
    let ns = bundle.grid.n_steps;
    PathBundle {
        grid: bundle.grid.clone(),
        n_minor: 0,
        n_samples: bundle.n_samples,
        increments: (0..bundle.n_samples).flat_map(|k| bundle.dw(k, 0)[..ns].to_vec()).collect(),
    }
}

/// Largest finite-difference sensitivity of the driver to `y` plus to `z`,
/// probed on a handful of samples at every step.
fn driver_sensitivity<D>(driver: &D, y: &[f64], z: &[f64], ns: usize, nz: usize, n: usize) -> Result<f64>
where
    D: Fn(usize, usize, f64, &[f64]) -> Result<f64> + Sync,
{
    const DELTA: f64 = 1e-4;
    let probes = n.min(8);
    let mut worst = 0.0f64;
    for i in 0..ns {
        for k in 0..probes {
            let y0 = y[k * (ns + 1) + i];
            let zk = &z[(k * ns + i) * nz..(k * ns + i + 1) * nz];
            let base = driver(i, k, y0, zk)?;
            let ly = (driver(i, k, y0 + DELTA, zk)? - base).abs() / DELTA;
            let mut zp = zk.to_vec();
            zp[0] += DELTA;
            let lz = (driver(i, k, y0, &zp)? - base).abs() / DELTA;
            worst = worst.max(ly + lz);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::sample_brownian_bundle;
    use crate::rng::RandomStream;

    fn brownian_setup(n_minor: usize, n_steps: usize, n: usize) -> (PathBundle, States) {
        let g = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
        let b = sample_brownian_bundle(&g, n_minor, n, &RandomStream::new(11, "w", 0));
        let s = States::brownian(&b, 0.0, &vec![0.0; n_minor]);
        (b, s)
    }

    #[test]
    fn constant_driver() {
        let (b, st) = brownian_setup(3, 8, 200);
        let basis = SymmetricBasis::new(&st);
        let sol = solve_bsde_regression(&|_, _, _, _: &[f64]| Ok(1.0), &vec![2.0; 200], &b, &basis, 3).unwrap();
        assert!((sol.y0() - 3.0).abs() < 1e-12, "{}", sol.y0());
        assert!(sol.z.iter().all(|z| z.abs() < 1e-12));
    }

    #[test]
    fn martingale_representation() {
        let (b, st) = brownian_setup(2, 8, 300);
        let basis = SymmetricBasis::new(&st);
        let terminal: Vec<f64> = (0..300).map(|k| b.path(k, 0)[8]).collect();
        let sol = solve_bsde_regression(&|_, _, _, _: &[f64]| Ok(0.0), &terminal, &b, &basis, 1).unwrap();
        for k in 0..300 {
            let w = b.path(k, 0);
            for i in 0..=8 {
                assert!((sol.y_at(k, i) - w[i]).abs() < 1e-10);
            }
            for i in 0..8 {
                let zk = sol.z_at(k, i);
                assert!((zk[0] - 1.0).abs() < 1e-10);
                assert!(zk[1..].iter().all(|z| z.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn terminal_row_is_exact() {
        let (b, st) = brownian_setup(2, 4, 50);
        let basis = SymmetricBasis::new(&st);
        let terminal: Vec<f64> = (0..50).map(|k| (b.path(k, 1)[4] * 3.1).sin() / 7.0).collect();
        let sol = solve_bsde_regression(&|_, _, y, _: &[f64]| Ok(-y), &terminal, &b, &basis, 2).unwrap();
        for k in 0..50 {
            assert_eq!(sol.y_at(k, 4).to_bits(), terminal[k].to_bits());
        }
    }

    #[test]
    fn rejects_nonfinite_driver() {
        let (b, st) = brownian_setup(2, 4, 20);
        let basis = SymmetricBasis::new(&st);
        let r = solve_bsde_regression(&|_, _, _, _: &[f64]| Ok(f64::NAN), &vec![0.0; 20], &b, &basis, 1);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_driver_converges_at_first_order() {
        // dY = Y ds with Y_T = 1 has Y_t = exp(-(T - t)).
        let err = |n_steps: usize| {
            let (b, st) = brownian_setup(1, n_steps, 100);
            let basis = SymmetricBasis::new(&st);
            let sol = solve_bsde_regression(&|_, _, y, _: &[f64]| Ok(-y), &vec![1.0; 100], &b, &basis, 3).unwrap();
            (sol.y0() - (-1.0f64).exp()).abs()
        };
        let (e16, e32) = (err(16), err(32));
        assert!(e16 < 0.02 && e32 < 0.01, "{e16} {e32}");
        let ratio = e16 / e32;
        assert!((ratio - 2.0).abs() < 0.2, "Richardson ratio {ratio}");
    }

    #[test]
    fn comparison_principle() {
        let (b, st) = brownian_setup(2, 8, 300);
        let basis = SymmetricBasis::new(&st);
        let terminal: Vec<f64> = (0..300).map(|k| (b.path(k, 0)[8] + b.path(k, 1)[8]).tanh()).collect();
        let f1 = |_: usize, _: usize, y: f64, z: &[f64]| Ok(0.5 * (y + z[0]).tanh() - 0.2 * z[1]);
        let f2 = |i: usize, k: usize, y: f64, z: &[f64]| f1(i, k, y, z).map(|v| v + 0.1);
        let s1 = solve_bsde_regression(&f1, &terminal, &b, &basis, 5).unwrap();
        let s2 = solve_bsde_regression(&f2, &terminal, &b, &basis, 5).unwrap();
        for k in 0..300 {
            for i in 0..=8 {
                assert!(s2.y_at(k, i) >= s1.y_at(k, i) - 1e-12, "sample {k} step {i}");
            }
        }
    }
}
