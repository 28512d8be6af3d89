//! Gauss–Hermite rules for expectations under a normal law.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Nodes and weights with `E[g(Z)] ~ sum_q w_q g(nodes_q)` for `Z ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[g(mean + sqrt(var) Z)]`; with `var == 0` this is exactly `g(mean)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut g: F) -> f64 {
        if var == 0.0 {
            return g(mean);
        }
        let sd = var.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(mean + sd * z))
            .sum()
    }
}

const MAX_ITER: usize = 100;

fn compute(order: usize) -> Result<GaussHermite> {
    // Newton on the orthonormal physicists' Hermite polynomial, with the
    // standard asymptotic initial guesses for the largest roots.
    let n = order;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..MAX_ITER {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                what: "Gauss-Hermite root",
                iterations: MAX_ITER,
                residual: f64::NAN,
            });
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let sqrt_2 = std::f64::consts::SQRT_2;
    // Ascending nodes.
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(&w).map(|(a, b)| (a * sqrt_2, b / sqrt_pi)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Shared rule of the given order (computed once per order).
pub fn gauss_hermite(order: usize) -> Result<Arc<GaussHermite>> {
    if order < 2 {
        return Err(Error::OutOfRange {
            key: "quad_order".into(),
            msg: format!("need at least 2 nodes, got {order}"),
        });
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().expect("quadrature cache").get(&order) {
        return Ok(rule.clone());
    }
    let rule = Arc::new(compute(order)?);
    cache
        .lock()
        .expect("quadrature cache")
        .entry(order)
        .or_insert_with(|| rule.clone());
    Ok(rule)
}

/// Gauss rule with at most `order` nodes for the empirical measure of `points`.
///
/// Lanczos on the (standardised) atoms builds
/// the Jacobi matrix; its eigen-decomposition gives nodes and weights. The
/// rule integrates polynomials up to degree `2 order - 1` exactly against the
/// uniform measure on `points`. Fewer nodes are returned when the measure has
/// fewer distinct atoms.
pub fn empirical_gauss(points: &[f64], order: usize) -> Result<GaussHermite> {
    let m = points.len();
    if m == 0 {
        return Err(Error::Empty("points"));
    }
    let mean = points.iter().sum::<f64>() / m as f64;
    let sd = (points.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64).sqrt();
    if !mean.is_finite() || !sd.is_finite() {
        return Err(Error::NonFinite("empirical quadrature atoms".into()));
    }
    if sd == 0.0 || order <= 1 {
        return Ok(GaussHermite {
            nodes: vec![mean],
            weights: vec![1.0],
        });
    }
    let xs: Vec<f64> = points.iter().map(|x| (x - mean) / sd).collect();
    let steps = order.min(m);
    let mut prev = vec![0.0; m];
    let mut cur = vec![(1.0 / m as f64).sqrt(); m];
    let mut v = vec![0.0; m];
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    for j in 0..steps {
        let mut a = 0.0;
        for ((vi, x), c) in v.iter_mut().zip(&xs).zip(&cur) {
            *vi = x * c;
            a += *vi * c;
        }
        alpha.push(a);
        if j + 1 == steps {
            break;
        }
        // Local reorthogonalisation against the two latest vectors keeps the
        // cost linear in the number of atoms.
        let (mut c_cur, mut c_prev) = (0.0, 0.0);
        for ((vi, c), p) in v.iter().zip(&cur).zip(&prev) {
            c_cur += vi * c;
            c_prev += vi * p;
        }
        let mut b2 = 0.0;
        for ((vi, c), p) in v.iter_mut().zip(&cur).zip(&prev) {
            *vi -= c_cur * c + c_prev * p;
            b2 += *vi * *vi;
        }
        let b = b2.sqrt();
        if b < 1e-10 {
            break;
        }
        beta.push(b);
        for (p, (c, vi)) in prev.iter_mut().zip(cur.iter_mut().zip(&v)) {
            *p = *c;
            *c = vi / b;
        }
    }
    let k = alpha.len();
    let jac = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            alpha[a]
        } else if a + 1 == b {
            beta[a]
        } else if b + 1 == a {
            beta[b]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|c| (mean + sd * eig.eigenvalues[c], eig.eigenvectors[(0, c)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_rule_matches_moments() {
        let pts: Vec<f64> = (0..500).map(|i| ((i * 7919) % 1000) as f64 / 250.0 - 2.0 + (i as f64 * 0.37).sin()).collect();
        let rule = empirical_gauss(&pts, 8).unwrap();
        assert_eq!(rule.order(), 8);
        for p in 0..16 {
            let want = pts.iter().map(|x| x.powi(p)).sum::<f64>() / 500.0;
            let got: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p)).sum();
            assert!((got - want).abs() < 1e-8 * (1.0 + want.abs()), "moment {p}: {got} vs {want}");
        }
        let want = pts.iter().map(|x| (0.3 + x).tanh()).sum::<f64>() / 500.0;
        let rule = empirical_gauss(&pts, 16).unwrap();
        let got: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * (0.3 + x).tanh()).sum();
        assert!((got - want).abs() < 1e-6);

        let normals = crate::rng::RandomStream::new(4, "atoms", 0).normals(2048);
        let pts: Vec<f64> = normals.iter().map(|z| 1.7 * z + 0.4 * z.sin()).collect();
        let rule = empirical_gauss(&pts, 16).unwrap();
        for p in 0..24 {
            let want = pts.iter().map(|x| x.powi(p)).sum::<f64>() / pts.len() as f64;
            let got: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p)).sum();
            assert!((got - want).abs() < 1e-7 * (1.0 + want.abs()), "moment {p}: {got} vs {want}");
        }
        let want = pts.iter().map(|x| (0.3 + x).tanh()).sum::<f64>() / pts.len() as f64;
        let got: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * (0.3 + x).tanh()).sum();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn empirical_rule_degenerate_measures() {
        let r = empirical_gauss(&[1.5; 10], 6).unwrap();
        assert_eq!((r.nodes.clone(), r.weights.clone()), (vec![1.5], vec![1.0]));
        let r = empirical_gauss(&[0.0, 1.0, 0.0, 1.0], 6).unwrap();
        assert_eq!(r.order(), 2);
        assert!((r.weights[0] - 0.5).abs() < 1e-12 && (r.nodes[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments() {
        for order in [2usize, 5, 20, 40, 80] {
            let r = gauss_hermite(order).unwrap();
            let m0: f64 = r.weights.iter().sum();
            assert!((m0 - 1.0).abs() < 1e-13, "order {order}: {m0}");
            assert!(r.expect(0.0, 1.0, |z| z).abs() < 1e-13);
            assert!((r.expect(0.0, 1.0, |z| z * z) - 1.0).abs() < 1e-12);
            if order >= 3 {
                assert!((r.expect(0.0, 1.0, |z| z.powi(4)) - 3.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn two_point_rule() {
        let r = gauss_hermite(2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-14 && (r.nodes[1] - 1.0).abs() < 1e-14);
        assert!((r.weights[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn shifted_gaussian_and_degenerate() {
        let r = gauss_hermite(30).unwrap();
        // E[exp(X)] = exp(m + v/2).
        let v = r.expect(0.3, 0.5, f64::exp);
        assert!((v - (0.3f64 + 0.25).exp()).abs() < 1e-12);
        assert_eq!(r.expect(1.5, 0.0, |x| x * x), 2.25);
    }

    #[test]
    fn odd_tanh_vanishes() {
        let r = gauss_hermite(40).unwrap();
        assert!(r.expect(0.0, 1.0, f64::tanh).abs() < 1e-10);
    }
}
