//! Convergence studies in N, saddle-point verification and rate fitting.
//!
//! Every study couples the N-player side and the limit side on the same
//! Brownian bundle, so the reported errors are N-errors plus a floor rather
//! than differences of independent Monte Carlo runs.

mod cross;
mod report;
mod studies;
mod verify;

pub use cross::{cross_validate_limit, LimitCrossCheck};
pub use report::{csv_rows, write_csv, Check, ConvergenceReport, PointSummary, Series, CSV_HEADER};
pub use studies::{
    run_bsde_convergence, run_control_convergence, run_convergence, run_forward_convergence,
    run_saddle_convergence,
};
pub use verify::{
    verify_saddle_and_uniqueness, verify_with, PerturbationCheck, Side, VerificationReport, Violation, VerifyOptions,
    MIN_PERTURBATIONS,
};

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::model::Scenario;
use crate::rng::RandomStream;
use crate::{Error, Result};

/// Acceptance band for the squared-error slopes of the uncontrolled studies.
pub const UNCONTROLLED_BAND: (f64, f64) = (-1.35, -0.65);
/// Acceptance band for the squared-error slopes of the game studies.
pub const GAME_BAND: (f64, f64) = (-1.4, -0.6);
/// Squared errors at or below this level are rounding noise and never enter a fit.
pub const ROUNDING_FLOOR: f64 = 1e-24;
/// Minimum number of outer samples for the forward study.
pub const MIN_FORWARD_REPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Forward,
    Bsde,
    Saddle,
    Control,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::Forward, Study::Bsde, Study::Saddle, Study::Control];

    pub fn name(self) -> &'static str {
        match self {
            Study::Forward => "forward",
            Study::Bsde => "bsde",
            Study::Saddle => "saddle",
            Study::Control => "control",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::OutOfRange {
                key: "study".into(),
                msg: format!("unknown study `{s}` (expected forward, bsde, saddle or control)"),
            })
    }
}

/// Least-squares slope of `log err` on `log N` with a 95% interval.
#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub ci: (f64, f64),
    /// Which input points entered the fit.
    pub used: Vec<bool>,
}

/// Fits `err ~ C N^slope` by ordinary least squares on the logs.
///
/// `per_n` holds `(N, err_mean, err_se)` with `err_se` the standard error of
/// `err_mean`. Points with `err_mean <= floor` are excluded; at least three
/// distinct N must remain. The half-width of the interval is
/// `1.96 sqrt(se_ols^2 + se_prop^2)`, where `se_ols` is the usual residual
/// standard error of the slope and `se_prop` propagates the per-point
/// relative errors `err_se / err_mean` through the (linear) slope estimator.
pub fn fit_rate(per_n: &[(usize, f64, f64)], floor: f64) -> Result<RateFit> {
    let used: Vec<bool> = per_n
        .iter()
        .map(|&(n, e, se)| n > 0 && e.is_finite() && se.is_finite() && e > floor.max(0.0))
        .collect();
    let pts: Vec<(f64, f64, f64)> = per_n
        .iter()
        .zip(&used)
        .filter(|(_, u)| **u)
        .map(|(&(n, e, se), _)| ((n as f64).ln(), e.ln(), se / e))
        .collect();
    let mut distinct: Vec<usize> = per_n.iter().zip(&used).filter(|(_, u)| **u).map(|(p, _)| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} usable N values above the floor {floor:e}, need 3",
            distinct.len()
        )));
    }
    let m = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let slope = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum::<f64>() / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se_ols_sq = rss / (m - 2.0).max(1.0) / sxx;
    let se_prop_sq: f64 = pts.iter().map(|p| ((p.0 - xm) / sxx * p.2).powi(2)).sum();
    let half = 1.96 * (se_ols_sq + se_prop_sq).sqrt();
    Ok(RateFit {
        slope,
        ci: (slope - half, slope + half),
        used,
    })
}

/// Scenario for repetition `rep` of a study: same model, independent seed.
pub(crate) fn rep_scenario(s: &Scenario, study: Study, rep: usize) -> Scenario {
    let seed = RandomStream::new(s.seed, format!("{study}/rep"), rep as u64).rng().next_u64();
    Scenario { seed, ..s.clone() }
}

pub(crate) fn check_n_list(n_list: &[usize]) -> Result<()> {
    if n_list.is_empty() {
        return Err(Error::Empty("n_list"));
    }
    if n_list[0] == 0 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::OutOfRange {
            key: "n_list".into(),
            msg: format!("must be strictly ascending positive integers, got {n_list:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = [8, 16, 32].iter().map(|&n| (n, 1.0 / n as f64, 0.0)).collect();
        let fit = fit_rate(&pts, 0.0).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.ci.0 - fit.ci.1).abs() < 1e-10);
    }

    #[test]
    fn constant_error_has_zero_slope() {
        let pts: Vec<_> = [8, 16, 32, 64].iter().map(|&n| (n, 0.3, 0.01)).collect();
        let fit = fit_rate(&pts, 0.0).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!(fit.ci.0 < 0.0 && fit.ci.1 > 0.0);
    }

    #[test]
    fn floor_excludes_points() {
        let pts = vec![(8, 0.125, 0.0), (16, 0.0625, 0.0), (32, 0.03125, 0.0), (64, 0.01, 0.0)];
        let fit = fit_rate(&pts, 0.02).unwrap();
        assert_eq!(fit.used, vec![true, true, true, false]);
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!(matches!(fit_rate(&pts, 0.05), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn study_names_round_trip() {
        for st in Study::ALL {
            assert_eq!(st.name().parse::<Study>().unwrap(), st);
        }
        assert!("bogus".parse::<Study>().is_err());
    }

    #[test]
    fn n_list_must_ascend() {
        assert!(check_n_list(&[8, 16, 32]).is_ok());
        assert!(check_n_list(&[8, 8, 16]).is_err());
        assert!(check_n_list(&[0, 8]).is_err());
        assert!(check_n_list(&[]).is_err());
    }
}
