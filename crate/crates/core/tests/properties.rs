use mfg_core::experiments::fit_rate;
use mfg_core::forward::{sample_brownian_bundle, TimeGrid};
use mfg_core::hamiltonian::{eval_hamiltonian_n, eval_hbar_n, saddle_point_n, PointView, SADDLE_MAX_ITER, SADDLE_TOL};
use mfg_core::limit::{vbar, LimitHamiltonian, LimitPoint};
use mfg_core::model::{ModelParams, Scenario};
use mfg_core::numeric::fsum;
use mfg_core::quadrature::gauss_hermite;
use mfg_core::rng::RandomStream;
use proptest::prelude::*;

fn model() -> impl Strategy<Value = ModelParams> {
    (1.0..3.0f64, 1.0..3.0f64, 0.0..0.9f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..1.0f64).prop_map(
        |(alpha, gamma, beta_frac, a, c, kappa_g)| ModelParams {
            alpha,
            gamma,
            beta: beta_frac * alpha.min(gamma),
            a_lin: a,
            c_lin: c,
            kappa_g,
            ..ModelParams::default()
        },
    )
}

/// `(x, z)` for a point with `n` minors.
fn point(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-2.0..2.0f64, n + 1),
        prop::collection::vec(-2.0..2.0f64, n + 1),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fsum_ignores_order(mut v in prop::collection::vec(-1e8..1e8f64, 1..50), rot in 0usize..50) {
        let a = fsum(v.iter().copied());
        let k = rot % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert_eq!(a, fsum(v.iter().copied()));
    }

    #[test]
    fn saddle_point_is_a_saddle(
        m in model(),
        (x, z) in (1usize..6).prop_flat_map(point),
        y in -2.0..2.0f64,
        eps in 0.0..0.5f64,
        du in -1.0..1.0f64,
        dv in -1.0..1.0f64,
    ) {
        let p = PointView::new(&x, y, &z, eps).unwrap();
        let sp = saddle_point_n(p, &m, SADDLE_TOL, SADDLE_MAX_ITER).unwrap();
        let h = eval_hamiltonian_n(p, sp.u, &sp.v, &m).unwrap();
        let up = eval_hamiltonian_n(p, sp.u + du, &sp.v, &m).unwrap();
        prop_assert!(up <= h + 1e-9, "u-deviation raised H: {} > {}", up, h);
        let v: Vec<f64> = sp.v.iter().enumerate().map(|(l, v)| v + dv * if l % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let vp = eval_hamiltonian_n(p, sp.u, &v, &m).unwrap();
        prop_assert!(vp >= h - 1e-9, "v-deviation lowered H: {} < {}", vp, h);
    }

    #[test]
    fn hbar_is_invariant_under_minor_relabelling(
        (x, z) in (2usize..7).prop_flat_map(point),
        y in -2.0..2.0f64,
        shift in 1usize..6,
    ) {
        let m = ModelParams::default();
        let eps = 0.3;
        let a = eval_hbar_n(PointView::new(&x, y, &z, eps).unwrap(), &m).unwrap();
        let n = x.len() - 1;
        let perm = |v: &[f64]| {
            let mut out = vec![v[0]];
            out.extend((0..n).map(|l| v[1 + (l + shift) % n]));
            out
        };
        let (xp, zp) = (perm(&x), perm(&z));
        let b = eval_hbar_n(PointView::new(&xp, y, &zp, eps).unwrap(), &m).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn vbar_matches_its_closed_form(m in model(), x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, y in -1.0..1.0f64, z0 in -1.0..1.0f64, u in -2.0..2.0f64) {
        let v = vbar(x0, x1, y, z0, u, &m);
        prop_assert!((v + (m.c_lin + m.beta * u) / m.gamma).abs() < 1e-10);
    }

    #[test]
    fn limit_hamiltonian_is_strongly_concave(
        m in model(),
        x0 in -2.0..2.0f64,
        y in -1.0..1.0f64,
        z0 in -1.0..1.0f64,
        s in 0.0..1.0f64,
        u1 in -2.0..2.0f64,
        u2 in -2.0..2.0f64,
    ) {
        let sc = Scenario { model: m, quad_order: 20, ..Scenario::default() };
        let lh = LimitHamiltonian::from_scenario(&sc).unwrap();
        let pt = LimitPoint { s, x0, y, z0 };
        let (_, g1) = lh.value_and_grad(&pt, u1).unwrap();
        let (_, g2) = lh.value_and_grad(&pt, u2).unwrap();
        let (lambda, mu) = (sc.model.lambda_mod(), sc.model.mu_mod());
        let modulus = (lambda * lambda - mu * mu) / lambda;
        prop_assert!((g1 - g2) * (u1 - u2) <= -modulus * (u1 - u2).powi(2) + 1e-9);
    }

    #[test]
    fn fit_rate_recovers_power_laws(c in 0.01..100.0f64, b in -2.5..-0.1f64) {
        let pts: Vec<_> = [4usize, 8, 16, 32, 64].iter().map(|&n| (n, c * (n as f64).powf(b), 0.0)).collect();
        let fit = fit_rate(&pts, 0.0).unwrap();
        prop_assert!((fit.slope - b).abs() < 1e-9);
        prop_assert!(fit.ci.0 <= fit.slope && fit.slope <= fit.ci.1);
    }

    #[test]
    fn gauss_hermite_integrates_low_moments(mean in -3.0..3.0f64, var in 0.0..4.0f64) {
        let rule = gauss_hermite(10).unwrap();
        let m2 = rule.expect(mean, var, |x| x * x);
        let m4 = rule.expect(mean, var, |x| x.powi(4));
        prop_assert!((m2 - (mean * mean + var)).abs() < 1e-10);
        let exact4 = mean.powi(4) + 6.0 * mean * mean * var + 3.0 * var * var;
        prop_assert!((m4 - exact4).abs() < 1e-9 * exact4.max(1.0));
    }

    #[test]
    fn restricted_bundles_keep_their_prefix(seed in any::<u64>(), keep in 0usize..4) {
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let b = sample_brownian_bundle(&g, 4, 3, &RandomStream::new(seed, "prop", 0));
        let r = b.restrict(keep).unwrap();
        for k in 0..3 {
            for j in 0..=keep {
                prop_assert_eq!(r.dw(k, j), b.dw(k, j));
            }
        }
        prop_assert!(b.restrict(5).is_err());
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), idx in 0u64..100) {
        let a = RandomStream::new(seed, "x", idx).normals(8);
        prop_assert_eq!(&a, &RandomStream::new(seed, "x", idx).normals(8));
        prop_assert_ne!(&a, &RandomStream::new(seed, "y", idx).normals(8));
    }
}
