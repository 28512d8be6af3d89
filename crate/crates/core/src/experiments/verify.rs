use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::game::{solve_controlled_bsde, solve_saddle_bsde, MinorPolicy};
use crate::bsde::limit::{solve_limit_game_bsde, LimitMajorControl, LimitMinorControl};
use crate::bsde::BsdeSolution;
use crate::forward::{sample_brownian_bundle, PathBundle, TimeGrid};
use crate::model::Scenario;
use crate::rng::RandomStream;
use crate::{Error, Result};

/// Minimum number of perturbations per verification run.
pub const MIN_PERTURBATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// N-game, major deviates against the frozen minor paths: `Y` must not increase.
    NGameMajor,
    /// N-game, minors deviate against the frozen major path: `Y` must not decrease.
    NGameMinor,
    /// Limit game, major deviates.
    LimitMajor,
    /// Limit game, representative minor deviates.
    LimitMinor,
    /// N-game, major deviates and minors best-respond: `Y` drops by a
    /// margin quadratic in the deviation.
    UniquenessMajor,
    /// N-game, minors deviate: `Y` rises by a margin quadratic in the deviation.
    UniquenessMinor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Pieces of the piecewise-constant perturbations.
    pub pieces: usize,
    /// Outer samples per solve.
    pub n_samples: usize,
}

impl VerifyOptions {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            pieces: 4,
            n_samples: s.mc_outer,
        }
    }
}

/// One inequality. `margin >= 0` means it holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheck {
    pub side: Side,
    pub index: usize,
    pub delta: f64,
    pub base: f64,
    pub perturbed: f64,
    /// Required strict improvement (0 for the plain saddle inequalities).
    pub bound: f64,
    pub tol: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub side: Side,
    pub index: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub n_minor: usize,
    pub n_perturb: usize,
    pub delta: f64,
    pub n_samples: usize,
    pub pieces: usize,
    pub base_n: f64,
    pub base_limit: f64,
    pub tol_n: f64,
    pub tol_limit: f64,
    pub checks: Vec<PerturbationCheck>,
    pub violations: Vec<Violation>,
    pub pass: bool,
    pub runtime_s: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// Piecewise-constant adapted perturbation: on piece `p` the value is
/// `a_p * sign(W at the start of the piece)`, with sign `+1` on the first
/// piece. Its square is deterministic. Returns `[sample][step]`.
fn perturbation(amplitudes: &[f64], w: impl Fn(usize, usize) -> f64, n_samples: usize, n_steps: usize) -> Vec<f64> {
    let pieces = amplitudes.len();
    let mut out = Vec::with_capacity(n_samples * n_steps);
    for k in 0..n_samples {
        for i in 0..n_steps {
            let p = i * pieces / n_steps;
            let start = (p * n_steps).div_ceil(pieces);
            let sign = if w(k, start) < 0.0 { -1.0 } else { 1.0 };
            out.push(amplitudes[p] * sign);
        }
    }
    out
}

/// `h sum_i e^{-L (t_i - t)} a_i^2`, the discounted energy of a perturbation
/// with deterministic square `a_i^2`.
fn discounted_energy(amplitudes: &[f64], grid: &TimeGrid, lip_y: f64) -> f64 {
    let ns = grid.n_steps;
    let h = grid.h();
    (0..ns)
        .map(|i| {
            let a = amplitudes[i * amplitudes.len() / ns];
            h * (-lip_y * (grid.times[i] - grid.t_start)).exp() * a * a
        })
        .sum()
}

fn check(side: Side, index: usize, delta: f64, base: f64, perturbed: f64, bound: f64, tol: f64) -> PerturbationCheck {
    // Major deviations lower Y; minor deviations raise it.
    let gain = match side {
        Side::NGameMajor | Side::LimitMajor | Side::UniquenessMajor => base - perturbed,
        Side::NGameMinor | Side::LimitMinor | Side::UniquenessMinor => perturbed - base,
    };
    let margin = gain - bound + tol;
    PerturbationCheck {
        side,
        index,
        delta,
        base,
        perturbed,
        bound,
        tol,
        margin,
        pass: margin >= 0.0,
    }
}

fn tolerance(sol: &BsdeSolution) -> f64 {
    3.0 * (sol.diagnostics.mc_std + sol.diagnostics.picard_residual())
}

/// Saddle inequalities of the N-game and the limit game under random
/// bounded adapted perturbations of size `magnitude`, plus the strict
/// concavity/convexity margins that make the saddle point unique.
pub fn verify_saddle_and_uniqueness(
    s: &Scenario,
    n_minor: usize,
    n_perturb: usize,
    magnitude: f64,
) -> Result<VerificationReport> {
    verify_with(s, n_minor, n_perturb, magnitude, VerifyOptions::for_scenario(s))
}

pub fn verify_with(
    s: &Scenario,
    n_minor: usize,
    n_perturb: usize,
    magnitude: f64,
    opts: VerifyOptions,
) -> Result<VerificationReport> {
    let started = Instant::now();
    if n_perturb < MIN_PERTURBATIONS {
        return Err(Error::OutOfRange {
            key: "perturbations".into(),
            msg: format!("need at least {MIN_PERTURBATIONS}, got {n_perturb}"),
        });
    }
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::OutOfRange {
            key: "delta".into(),
            msg: format!("perturbation size must be finite and non-negative, got {magnitude}"),
        });
    }
    if opts.pieces == 0 || opts.pieces > s.n_steps {
        return Err(Error::OutOfRange {
            key: "pieces".into(),
            msg: format!("need between 1 and n_steps = {} pieces, got {}", s.n_steps, opts.pieces),
        });
    }
    s.validate()?;
    let grid = TimeGrid::from_scenario(s);
    let ns = grid.n_steps;
    let n = opts.n_samples;
    let bundle = sample_brownian_bundle(&grid, n_minor, n, &RandomStream::new(s.seed, "verify", 0));
    let m = &s.model;
    let lip_y = m.kappa_g.abs();
    let lambda = m.lambda_mod();
    let mu = m.mu_mod();
    let reduced_modulus = (lambda * lambda - mu * mu) / lambda;

    // N-game around the realised saddle controls.
    let saddle = solve_saddle_bsde(s, n_minor, &bundle)?;
    let sp = saddle.controls.clone().expect("saddle solve records controls");
    let base_n = solve_controlled_bsde(s, n_minor, &bundle, &sp, MinorPolicy::Fixed(&sp))?;
    let tol_n = tolerance(&saddle).max(tolerance(&base_n));

    // Limit game around its own saddle solution.
    let major = major_only(&bundle);
    let reference = solve_limit_game_bsde(s, LimitMajorControl::Saddle, LimitMinorControl::BestResponse, &major)?;
    let u_ref = reference.controls.as_ref().expect("limit solve records controls").u.clone();
    let frozen = LimitMinorControl::Frozen {
        reference: &reference,
        shift: None,
    };
    let base_limit = solve_limit_game_bsde(s, LimitMajorControl::Path(&u_ref), frozen, &major)?;
    let tol_limit = tolerance(&reference).max(tolerance(&base_limit));

    let bundle_ref = &bundle;
    let w_at = |j: usize| move |k: usize, i: usize| bundle_ref.dw(k, j)[..i].iter().sum::<f64>();

    let mut checks = Vec::with_capacity(5 * n_perturb);
    for p in 0..n_perturb {
        let stream = RandomStream::new(s.seed, "perturbation", p as u64);
        let amps = stream.uniforms(opts.pieces * (n_minor + 2), -1.0, 1.0);
        let (a_u, rest) = amps.split_at(opts.pieces);
        let (a_limit_v, a_v) = rest.split_at(opts.pieces);

        // Major deviation in the N-game.
        let eta_u = perturbation(a_u, w_at(0), n, ns);
        let mut u_dev = sp.clone();
        for (u, e) in u_dev.u.iter_mut().zip(&eta_u) {
            *u += magnitude * e;
        }
        let pert = solve_controlled_bsde(s, n_minor, &bundle, &u_dev, MinorPolicy::Fixed(&sp))?;
        checks.push(check(Side::NGameMajor, p, magnitude, base_n.y0(), pert.y0(), 0.0, tol_n));
        let energy_u = discounted_energy(a_u, &grid, lip_y);
        let pert = solve_controlled_bsde(s, n_minor, &bundle, &u_dev, MinorPolicy::BestResponse)?;
        let bound = 0.5 * reduced_modulus * magnitude * magnitude * energy_u;
        checks.push(check(Side::UniquenessMajor, p, magnitude, base_n.y0(), pert.y0(), bound, tol_n));

        // Minor deviations in the N-game; each minor perturbs along its own noise.
        let mut v_dev = sp.clone();
        let mut energy_v = 0.0;
        for l in 0..n_minor {
            let a = &a_v[l * opts.pieces..(l + 1) * opts.pieces];
            energy_v += discounted_energy(a, &grid, lip_y) / n_minor as f64;
            let eta = perturbation(a, w_at(l + 1), n, ns);
            for (at, e) in eta.iter().enumerate() {
                v_dev.v[at * n_minor + l] += magnitude * e;
            }
        }
        let pert = solve_controlled_bsde(s, n_minor, &bundle, &sp, MinorPolicy::Fixed(&v_dev))?;
        checks.push(check(Side::NGameMinor, p, magnitude, base_n.y0(), pert.y0(), 0.0, tol_n));
        let bound = 0.5 * lambda * magnitude * magnitude * energy_v;
        checks.push(check(Side::UniquenessMinor, p, magnitude, base_n.y0(), pert.y0(), bound, tol_n));

        // Limit game: major path and minor feedback shifted along W^0.
        let u_pert: Vec<f64> = u_ref.iter().zip(&eta_u).map(|(u, e)| u + magnitude * e).collect();
        let pert = solve_limit_game_bsde(s, LimitMajorControl::Path(&u_pert), frozen, &major)?;
        checks.push(check(Side::LimitMajor, p, magnitude, base_limit.y0(), pert.y0(), 0.0, tol_limit));
        let shift: Vec<f64> = perturbation(a_limit_v, w_at(0), n, ns).iter().map(|e| magnitude * e).collect();
        let shifted = LimitMinorControl::Frozen {
            reference: &reference,
            shift: Some(&shift),
        };
        let pert = solve_limit_game_bsde(s, LimitMajorControl::Path(&u_ref), shifted, &major)?;
        checks.push(check(Side::LimitMinor, p, magnitude, base_limit.y0(), pert.y0(), 0.0, tol_limit));
    }
    let violations: Vec<Violation> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| Violation {
            side: c.side,
            index: c.index,
            margin: c.margin,
        })
        .collect();
    Ok(VerificationReport {
        n_minor,
        n_perturb,
        delta: magnitude,
        n_samples: n,
        pieces: opts.pieces,
        base_n: base_n.y0(),
        base_limit: base_limit.y0(),
        tol_n,
        tol_limit,
        pass: violations.is_empty(),
        checks,
        violations,
        runtime_s: started.elapsed().as_secs_f64(),
        seed: s.seed,
        config_digest: s.digest(),
    })
}

fn major_only(bundle: &PathBundle) -> PathBundle {
    bundle.restrict(0).expect("zero minors always fit")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::ControlPaths;
    use crate::model::ModelParams;

    fn small(model: ModelParams, n_samples: usize) -> (Scenario, VerifyOptions) {
        let s = Scenario {
            model,
            n_steps: 8,
            mc_outer: n_samples,
            ..Scenario::default()
        };
        (s, VerifyOptions { pieces: 4, n_samples })
    }

    fn quadratic() -> ModelParams {
        ModelParams {
            a_lin: 1.0,
            c_lin: 0.0,
            ..ModelParams::null()
        }
    }

    #[test]
    fn zero_perturbation_reproduces_the_base() {
        let (s, o) = small(ModelParams::default(), 300);
        let r = verify_with(&s, 4, MIN_PERTURBATIONS, 0.0, o).unwrap();
        assert!(r.pass, "{:?}", r.violations);
        for c in &r.checks {
            if c.side == Side::UniquenessMajor {
                // Best responses to the saddle control are the saddle controls, up to solver noise.
                assert!((c.margin - c.tol).abs() <= c.tol, "{c:?}");
            } else {
                assert_eq!(c.perturbed, c.base, "{c:?}");
                assert_eq!(c.margin, c.tol);
            }
        }
    }

    #[test]
    fn quadratic_family_drop_matches_closed_form() {
        let s = Scenario {
            model: quadratic(),
            ..Scenario::default()
        };
        let grid = TimeGrid::from_scenario(&s);
        let n_minor = 3;
        let n = 64;
        let bundle = sample_brownian_bundle(&grid, n_minor, n, &RandomStream::new(5, "quad", 0));
        let ns = grid.n_steps;
        let saddle = ControlPaths::constant(n, ns, n_minor, 0.4, -0.2);
        let base = solve_controlled_bsde(&s, n_minor, &bundle, &saddle, MinorPolicy::Fixed(&saddle)).unwrap();
        assert!((base.y0() - 0.2).abs() < 1e-12);
        let delta = 0.5;
        let dev = ControlPaths::constant(n, ns, n_minor, 0.4 + delta, -0.2);
        let pert = solve_controlled_bsde(&s, n_minor, &bundle, &dev, MinorPolicy::BestResponse).unwrap();
        let drop = base.y0() - pert.y0();
        let expected = s.model.reduced_curvature() / 2.0 * delta * delta * (s.t_end - s.t_start);
        assert!((expected - 0.3125).abs() < 1e-15);
        assert!((drop - expected).abs() < 1e-12, "drop {drop}");

        // The probe's required margin is a valid lower bound for this drop.
        let (lambda, mu) = (s.model.lambda_mod(), s.model.mu_mod());
        let bound = 0.5 * (lambda * lambda - mu * mu) / lambda * delta * delta * discounted_energy(&[1.0; 4], &grid, 0.0);
        let c = check(Side::UniquenessMajor, 0, delta, base.y0(), pert.y0(), bound, 0.0);
        assert!(c.pass && c.margin > 0.1);
    }

    #[test]
    fn perturbation_signs_follow_the_noise() {
        let w = |k: usize, i: usize| if k == 0 { 1.0 } else { -(i as f64) };
        let eta = perturbation(&[0.5, -0.25], w, 2, 4);
        assert_eq!(eta, vec![0.5, 0.5, -0.25, -0.25, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn default_family_has_no_violations() {
        let (s, o) = small(ModelParams::default(), 500);
        for delta in [0.1, 0.5] {
            let r = verify_with(&s, 8, MIN_PERTURBATIONS, delta, o).unwrap();
            assert!(r.pass, "delta {delta}: {:?}", r.violations);
            assert_eq!(r.checks.len(), 6 * MIN_PERTURBATIONS);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (s, o) = small(ModelParams::default(), 100);
        assert!(verify_with(&s, 2, MIN_PERTURBATIONS - 1, 0.1, o).is_err());
        assert!(verify_with(&s, 2, MIN_PERTURBATIONS, -0.1, o).is_err());
        assert!(verify_with(&s, 2, MIN_PERTURBATIONS, f64::NAN, o).is_err());
        let o = VerifyOptions { pieces: 9, ..o };
        assert!(verify_with(&s, 2, MIN_PERTURBATIONS, 0.1, o).is_err());
    }
}
