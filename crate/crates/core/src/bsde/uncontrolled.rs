//! The uncontrolled N-player BSDE and its limit along the conditional law.

use serde::{Deserialize, Serialize};

use crate::exec::try_map_indexed;
use crate::forward::{simulate_limit_with_tagged, simulate_n_system, PathBundle};
use crate::model::{Coefficients, Scenario};
use crate::numeric::fsum;
use crate::quadrature::empirical_gauss;
use crate::rng::RandomStream;
use crate::{Error, Result};

use super::game::game_terminal;
use super::{major_only, solve_bsde_with, BsdeSolution, FeatureTable, PicardOptions, States, SymmetricBasis};

/// Nodes kept per time step when a conditional cloud is compressed to a
/// Gauss rule of its empirical measure.
pub const CLOUD_RULE_ORDER: usize = 16;

/// Functions whose minor averages join the regression basis on both sides.
const AVERAGED: [fn(f64) -> f64; 2] = [f64::cos, f64::sin];

/// Pathwise comparison of the N-player and limit solutions, averaged over samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStatistics {
    /// `E sup_s |Y^N_s - Y_s|^2`.
    pub sup_y_sq: f64,
    /// `E int |Z^{0,N} - Z^0|^2 ds`.
    pub z0_sq: f64,
    /// `E sum_l int |Z^{l,N}|^2 ds`.
    pub zminor_sq: f64,
}

impl PairStatistics {
    pub fn total(&self) -> f64 {
        self.sup_y_sq + self.z0_sq + self.zminor_sq
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncontrolledPair {
    pub n_side: BsdeSolution,
    pub limit_side: BsdeSolution,
    pub stats: PairStatistics,
}

impl UncontrolledPair {
    pub fn y_n_t(&self) -> f64 {
        self.n_side.y0()
    }

    pub fn y_bar_t(&self) -> f64 {
        self.limit_side.y0()
    }
}

/// Random stream of the conditional cloud attached to sample `k`. It does
/// not depend on `N`, so every N-system is compared with the same limit.
pub fn cloud_stream(s: &Scenario, k: usize) -> RandomStream {
    RandomStream::new(s.seed, "cloud", 0).derive(k as u64)
}

/// BSDE driven by `(1/N) sum_l f(X^0, X^l, y, z0, z_l)` on the simulated
/// coupled system, with terminal `(1/N) sum_l Phi(X^0_T, X^l_T)`.
pub fn solve_uncontrolled_n(s: &Scenario, n_minor: usize, bundle: &PathBundle) -> Result<BsdeSolution> {
    let paths = simulate_n_system(s, n_minor, bundle)?;
    let states = States::from_particles(&paths);
    let m = &s.model;
    let driver = |i: usize, k: usize, y: f64, z: &[f64]| -> Result<f64> {
        let x = states.at(k, i);
        Ok(fsum((1..=n_minor).map(|l| m.f_unc(x[0], x[l], y, z[0], z[l]))) / n_minor as f64)
    };
    let terminal = game_terminal(m, &states);
    let basis = SymmetricBasis::with_averages(&states, &AVERAGED);
    solve_bsde_with(&driver, &terminal, bundle, &basis, PicardOptions::default())
}

/// Limit BSDE `dY = -E[f(X^0, X^1, Y, Z^0, 0) | W^0] ds + Z^0 dW^0` with the
/// conditional law approximated by one cloud of `m_cloud` members per path.
pub fn solve_uncontrolled_limit(s: &Scenario, bundle: &PathBundle, m_cloud: usize) -> Result<BsdeSolution> {
    let ns = bundle.grid.n_steps;
    if ns != s.n_steps {
        return Err(Error::Dimension("bundle time grid differs from the scenario".into()));
    }
    let m = &s.model;
    struct PathData {
        x0: Vec<f64>,
        moments: Vec<[f64; 4]>,
        rules: Vec<(Vec<f64>, Vec<f64>)>,
        terminal: f64,
    }
    let per_sample = try_map_indexed(bundle.n_samples, |k| {
        let cloud = simulate_limit_with_tagged(s, bundle.dw(k, 0), &[], m_cloud, &cloud_stream(s, k))?;
        let mut moments = Vec::with_capacity(ns + 1);
        let mut rules = Vec::with_capacity(ns);
        for i in 0..=ns {
            let col = cloud.column(i);
            let mc = col.len() as f64;
            let mut acc = [0.0; 4];
            for x in &col {
                acc[0] += x;
                acc[1] += x * x;
                acc[2] += AVERAGED[0](*x);
                acc[3] += AVERAGED[1](*x);
            }
            moments.push(acc.map(|a| a / mc));
            if i < ns {
                let r = empirical_gauss(&col, CLOUD_RULE_ORDER)?;
                rules.push((r.nodes, r.weights));
            }
        }
        let terminal = cloud.average(ns, |x0, x1| m.phi(x0, x1));
        Ok::<_, Error>(PathData {
            x0: cloud.x0_path,
            moments,
            rules,
            terminal,
        })
    })?;

    let x0: Vec<f64> = per_sample.iter().flat_map(|d| d.x0.iter().copied()).collect();
    let m1: Vec<f64> = per_sample.iter().flat_map(|d| d.moments.iter().map(|m| m[0])).collect();
    let m2: Vec<f64> = per_sample.iter().flat_map(|d| d.moments.iter().map(|m| m[1])).collect();
    let g1: Vec<f64> = per_sample.iter().flat_map(|d| d.moments.iter().map(|m| m[2])).collect();
    let g2: Vec<f64> = per_sample.iter().flat_map(|d| d.moments.iter().map(|m| m[3])).collect();
    let cross: Vec<f64> = x0.iter().zip(&m1).map(|(a, b)| a * b).collect();
    let basis = FeatureTable::polynomial(&x0, ns, 2, &[&m1, &m2, &cross, &g1, &g2]);
    let terminal: Vec<f64> = per_sample.iter().map(|d| d.terminal).collect();
    let driver = |i: usize, k: usize, y: f64, z: &[f64]| -> Result<f64> {
        let d = &per_sample[k];
        let x0 = d.x0[i];
        let (nodes, weights) = &d.rules[i];
        Ok(nodes.iter().zip(weights).map(|(x1, w)| w * m.f_unc(x0, *x1, y, z[0], 0.0)).sum())
    };
    solve_bsde_with(&driver, &terminal, &major_only(bundle), &basis, PicardOptions::default())
}

/// Pathwise statistics between an N-side and a limit-side solution on the
/// same `W^0` paths.
pub fn pair_statistics(n_side: &BsdeSolution, limit_side: &BsdeSolution) -> Result<PairStatistics> {
    let n = n_side.n_samples;
    let ns = n_side.grid.n_steps;
    if limit_side.n_samples != n || limit_side.grid.n_steps != ns {
        return Err(Error::Dimension("solutions live on different bundles".into()));
    }
    let h = n_side.grid.h();
    let per: Vec<[f64; 3]> = (0..n)
        .map(|k| {
            let sup = (0..=ns)
                .map(|i| (n_side.y_at(k, i) - limit_side.y_at(k, i)).powi(2))
                .fold(0.0, f64::max);
            let z0 = h * fsum((0..ns).map(|i| (n_side.z_at(k, i)[0] - limit_side.z_at(k, i)[0]).powi(2)));
            let zm = h * fsum((0..ns).flat_map(|i| n_side.z_at(k, i)[1..].iter().map(|z| z * z)));
            [sup, z0, zm]
        })
        .collect();
    let mean = |c: usize| fsum(per.iter().map(|p| p[c])) / n as f64;
    Ok(PairStatistics {
        sup_y_sq: mean(0),
        z0_sq: mean(1),
        zminor_sq: mean(2),
    })
}

/// Cloud size used against an N-player system: large enough that the cloud's
/// own empirical-measure error sits well below the N-player one.
pub fn cloud_size(s: &Scenario, n_minor: usize) -> usize {
    s.mc_cloud.max(16 * n_minor)
}

/// Both BSDEs on one bundle and their pathwise statistics.
pub fn solve_uncontrolled_pair(s: &Scenario, n_minor: usize, bundle: &PathBundle) -> Result<UncontrolledPair> {
    let n_side = solve_uncontrolled_n(s, n_minor, bundle)?;
    let limit_side = solve_uncontrolled_limit(s, bundle, cloud_size(s, n_minor))?;
    let stats = pair_statistics(&n_side, &limit_side)?;
    Ok(UncontrolledPair {
        n_side,
        limit_side,
        stats,
    })
}
