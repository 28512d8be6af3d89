use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::limit::{solve_limit_bsde, solve_limit_game_bsde, LimitMajorControl, LimitMinorControl};
use crate::forward::{sample_brownian_bundle, TimeGrid};
use crate::model::Scenario;
use crate::rng::RandomStream;
use crate::Result;

/// Limit value from the grid solver against the limit-game regression solver
/// playing the limit saddle controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitCrossCheck {
    pub y_grid: f64,
    pub y_game: f64,
    pub mc_std: f64,
    pub picard_residual: f64,
    pub h: f64,
    /// `3 (mc_std + 2h)`.
    pub tol: f64,
    pub diff: f64,
    pub pass: bool,
    pub runtime_s: f64,
    pub seed: u64,
    pub config_digest: String,
}

pub fn cross_validate_limit(s: &Scenario) -> Result<LimitCrossCheck> {
    let started = Instant::now();
    s.validate()?;
    let grid_sol = solve_limit_bsde(s)?;
    let grid = TimeGrid::from_scenario(s);
    let bundle = sample_brownian_bundle(&grid, 0, s.mc_outer, &RandomStream::new(s.seed, "limit", 0));
    let game = solve_limit_game_bsde(s, LimitMajorControl::Saddle, LimitMinorControl::BestResponse, &bundle)?;
    let y_grid = grid_sol.y_start(s.x0_init);
    let y_game = game.y0();
    let h = grid.h();
    let mc_std = game.diagnostics.mc_std;
    let tol = 3.0 * (mc_std + 2.0 * h);
    let diff = (y_game - y_grid).abs();
    Ok(LimitCrossCheck {
        y_grid,
        y_game,
        mc_std,
        picard_residual: game.diagnostics.picard_residual(),
        h,
        tol,
        diff,
        pass: diff <= tol,
        runtime_s: started.elapsed().as_secs_f64(),
        seed: s.seed,
        config_digest: s.digest(),
    })
}
