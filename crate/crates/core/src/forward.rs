//! Brownian bundles, the coupled N+1 particle system and its conditional
//! McKean–Vlasov limit.
//!
//! Both systems use the sine-of-sums coefficients of [`ModelParams`], which
//! lets every `(1/N) sum_l` over minors collapse to two order-independent
//! moments `mean cos(x_l)` and `mean sin(x_l)`.

use serde::{Deserialize, Serialize};

use crate::exec::map_indexed;
use crate::model::{ModelParams, Scenario};
use crate::numeric::fsum;
use crate::rng::RandomStream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start < t_end) || n_steps == 0 {
            return Err(Error::OutOfRange {
                key: "grid".into(),
                msg: format!("need t_start < t_end and n_steps >= 1, got [{t_start}, {t_end}] / {n_steps}"),
            });
        }
        let h = (t_end - t_start) / n_steps as f64;
        let mut times: Vec<f64> = (0..=n_steps).map(|i| t_start + i as f64 * h).collect();
        times[n_steps] = t_end;
        Ok(Self {
            t_start,
            t_end,
            n_steps,
            times,
        })
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        Self::new(s.t_start, s.t_end, s.n_steps).expect("validated scenario has a valid grid")
    }

    pub fn h(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }
}

/// Brownian increments `dW^j_i` for `j = 0..=N`, laid out `[sample][j][step]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_minor: usize,
    pub n_samples: usize,
    pub increments: Vec<f64>,
}

impl PathBundle {
    /// Increments of `W^j` on sample `sample`.
    pub fn dw(&self, sample: usize, j: usize) -> &[f64] {
        let n = self.grid.n_steps;
        let start = (sample * (self.n_minor + 1) + j) * n;
        &self.increments[start..start + n]
    }

    /// All increments of one sample, `[j][step]`.
    pub fn sample(&self, sample: usize) -> &[f64] {
        let stride = (self.n_minor + 1) * self.grid.n_steps;
        &self.increments[sample * stride..(sample + 1) * stride]
    }

    /// The same samples with only the major and the first `n_minor` minors.
    pub fn restrict(&self, n_minor: usize) -> Result<PathBundle> {
        if n_minor > self.n_minor {
            return Err(Error::Dimension(format!(
                "cannot restrict a bundle with {} minors to {n_minor}",
                self.n_minor
            )));
        }
        let n = self.grid.n_steps;
        let mut increments = Vec::with_capacity(self.n_samples * (n_minor + 1) * n);
        for k in 0..self.n_samples {
            increments.extend_from_slice(&self.sample(k)[..(n_minor + 1) * n]);
        }
        Ok(PathBundle {
            grid: self.grid.clone(),
            n_minor,
            n_samples: self.n_samples,
            increments,
        })
    }

    /// Brownian path `W^j_{t_i} - W^j_t` for `i = 0..=n_steps`.
    pub fn path(&self, sample: usize, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.n_steps + 1);
        let mut w = 0.0;
        out.push(w);
        for &d in self.dw(sample, j) {
            w += d;
            out.push(w);
        }
        out
    }
}

/// Stream that produces the increments of `W^j` on outer sample `sample`.
///
/// The key does not involve N, so runs with different N share `W^0, W^1, ...`.
pub fn brownian_stream(stream: &RandomStream, sample: usize, j: usize) -> RandomStream {
    stream.derive(sample as u64).derive(j as u64)
}

pub fn sample_brownian_bundle(
    grid: &TimeGrid,
    n_minor: usize,
    n_samples: usize,
    stream: &RandomStream,
) -> PathBundle {
    let n = grid.n_steps;
    let sqrt_h = grid.h().sqrt();
    let per_sample = map_indexed(n_samples, |s| {
        let mut block = vec![0.0; (n_minor + 1) * n];
        for (j, chunk) in block.chunks_mut(n).enumerate() {
            brownian_stream(stream, s, j).fill_normal(chunk);
            for v in chunk.iter_mut() {
                *v *= sqrt_h;
            }
        }
        block
    });
    PathBundle {
        grid: grid.clone(),
        n_minor,
        n_samples,
        increments: per_sample.concat(),
    }
}

/// Simulated states `X^j_{t_i}`, laid out `[sample][j][step]` with `n_steps + 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePaths {
    pub grid: TimeGrid,
    pub n_minor: usize,
    pub n_samples: usize,
    pub values: Vec<f64>,
}

impl ParticlePaths {
    pub fn path(&self, sample: usize, j: usize) -> &[f64] {
        let n = self.grid.n_steps + 1;
        let start = (sample * (self.n_minor + 1) + j) * n;
        &self.values[start..start + n]
    }

    /// States of all particles of one sample at step `i`, major first.
    pub fn state(&self, sample: usize, i: usize) -> Vec<f64> {
        (0..=self.n_minor).map(|j| self.path(sample, j)[i]).collect()
    }
}

/// Mean of `cos` and `sin` over a set of positions.
fn trig_moments(xs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let c = fsum(xs.clone().map(f64::cos)) / n as f64;
    let s = fsum(xs.map(f64::sin)) / n as f64;
    (c, s)
}

/// Same as [`trig_moments`] with plain summation, for the cloud whose member
/// order is fixed.
fn cloud_trig_moments(xs: &[f64]) -> (f64, f64) {
    let (c, s) = xs
        .iter()
        .fold((0.0, 0.0), |(c, s), x| {
            let (sn, cs) = x.sin_cos();
            (c + cs, s + sn)
        });
    (c / xs.len() as f64, s / xs.len() as f64)
}

/// `mean_l sin(a + x_l)` from the trig moments of the `x_l`.
#[inline]
fn mean_sin_shift(a: f64, (c, s): (f64, f64)) -> f64 {
    a.sin() * c + a.cos() * s
}

/// One Euler step of a major particle and a set of minors against the
/// moments `mom` of the measure they interact with.
#[inline]
fn major_step(m: &ModelParams, x0: f64, mom: (f64, f64), h: f64, dw: f64) -> f64 {
    let ms = mean_sin_shift(x0, mom);
    x0 + h * m.kappa_b0 * ms + (1.0 + m.sigma_amp * ms) * dw
}

#[inline]
fn minor_step(m: &ModelParams, x0: f64, xj: f64, mom: (f64, f64), h: f64, dw: f64) -> f64 {
    let ms = mean_sin_shift(x0 + xj, mom);
    xj + h * m.kappa_b1 * ms + (1.0 + m.sigma_amp * ms) * dw
}

/// Euler–Maruyama for the coupled system on one sample; `dw` is `[j][step]`.
fn simulate_one(m: &ModelParams, x_init: &[f64], dw: &[f64], n_steps: usize, h: f64) -> Vec<f64> {
    let n_minor = x_init.len() - 1;
    let cols = n_steps + 1;
    let mut out = vec![0.0; (n_minor + 1) * cols];
    let mut x = x_init.to_vec();
    let mut next = x.clone();
    for (j, &x0) in x.iter().enumerate() {
        out[j * cols] = x0;
    }
    for i in 0..n_steps {
        let mom = trig_moments(x[1..].iter().copied(), n_minor);
        next[0] = major_step(m, x[0], mom, h, dw[i]);
        for j in 1..=n_minor {
            next[j] = minor_step(m, x[0], x[j], mom, h, dw[j * n_steps + i]);
        }
        std::mem::swap(&mut x, &mut next);
        for (j, &xj) in x.iter().enumerate() {
            out[j * cols + i + 1] = xj;
        }
    }
    out
}

/// Simulates the uncontrolled coupled system on every sample of `bundle`.
pub fn simulate_n_system(s: &Scenario, n_minor: usize, bundle: &PathBundle) -> Result<ParticlePaths> {
    if bundle.n_minor != n_minor {
        return Err(Error::Dimension(format!(
            "bundle carries {} minors, expected {n_minor}",
            bundle.n_minor
        )));
    }
    if n_minor < 2 {
        return Err(Error::Dimension(format!("need N >= 2, got {n_minor}")));
    }
    let mut x_init = vec![s.x0_init];
    x_init.extend(s.minor_starts(n_minor)?);
    let n_steps = bundle.grid.n_steps;
    let h = bundle.grid.h();
    let per_sample = map_indexed(bundle.n_samples, |k| {
        simulate_one(&s.model, &x_init, bundle.sample(k), n_steps, h)
    });
    Ok(ParticlePaths {
        grid: bundle.grid.clone(),
        n_minor,
        n_samples: bundle.n_samples,
        values: per_sample.concat(),
    })
}

/// Particle approximation of the limit system given one `W^0` path.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalCloud {
    pub w0_path: Vec<f64>,
    pub x0_path: Vec<f64>,
    /// `[M][n_steps + 1]`, copies of the representative minor sharing `W^0`.
    pub cloud: Vec<f64>,
    /// `[n_tagged][n_steps + 1]`.
    pub tagged: Vec<f64>,
    pub m_cloud: usize,
    pub n_tagged: usize,
    pub n_steps: usize,
}

impl ConditionalCloud {
    pub fn member(&self, m: usize) -> &[f64] {
        let c = self.n_steps + 1;
        &self.cloud[m * c..(m + 1) * c]
    }

    pub fn tagged_path(&self, j: usize) -> &[f64] {
        let c = self.n_steps + 1;
        &self.tagged[j * c..(j + 1) * c]
    }

    /// Cloud values at step `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.m_cloud).map(|m| self.member(m)[i]).collect()
    }

    /// Cloud average of `h(x0, x1)` at step `i`.
    pub fn average<F: Fn(f64, f64) -> f64>(&self, i: usize, h: F) -> f64 {
        let x0 = self.x0_path[i];
        fsum((0..self.m_cloud).map(|m| h(x0, self.member(m)[i]))) / self.m_cloud as f64
    }
}

/// Simulates the conditional McKean–Vlasov system: the major driven by
/// `w0_increments`, `m_cloud` cloud members with fresh noise from `stream`,
/// and tagged minors driven by the given increments (`[n_tagged][n_steps]`).
pub fn simulate_limit_with_tagged(
    s: &Scenario,
    w0_increments: &[f64],
    tagged_increments: &[f64],
    m_cloud: usize,
    stream: &RandomStream,
) -> Result<ConditionalCloud> {
    let n_steps = w0_increments.len();
    if n_steps == 0 {
        return Err(Error::Empty("w0_increments"));
    }
    if m_cloud < 2 {
        return Err(Error::OutOfRange {
            key: "mc_cloud".into(),
            msg: format!("need at least 2 cloud members, got {m_cloud}"),
        });
    }
    if tagged_increments.len() % n_steps != 0 {
        return Err(Error::Dimension("tagged increments are not a whole number of paths".into()));
    }
    let n_tagged = tagged_increments.len() / n_steps;
    let h = s.step();
    let sqrt_h = h.sqrt();
    let m = &s.model;
    let cols = n_steps + 1;

    let mut cloud_dw = vec![0.0; m_cloud * n_steps];
    for (k, chunk) in cloud_dw.chunks_mut(n_steps).enumerate() {
        stream.derive(k as u64).fill_normal(chunk);
        for v in chunk.iter_mut() {
            *v *= sqrt_h;
        }
    }

    let mut w0_path = vec![0.0; cols];
    let mut x0_path = vec![s.x0_init; cols];
    let mut cloud = vec![s.xbar_init; m_cloud * cols];
    let mut tagged = vec![s.xbar_init; n_tagged * cols];
    let mut xc = vec![s.xbar_init; m_cloud];
    let mut x0 = s.x0_init;
    for i in 0..n_steps {
        let mom = cloud_trig_moments(&xc);
        let dw0 = w0_increments[i];
        for (k, x) in xc.iter_mut().enumerate() {
            *x = minor_step(m, x0, *x, mom, h, cloud_dw[k * n_steps + i]);
            cloud[k * cols + i + 1] = *x;
        }
        for j in 0..n_tagged {
            let prev = tagged[j * cols + i];
            tagged[j * cols + i + 1] = minor_step(m, x0, prev, mom, h, tagged_increments[j * n_steps + i]);
        }
        x0 = major_step(m, x0, mom, h, dw0);
        x0_path[i + 1] = x0;
        w0_path[i + 1] = w0_path[i] + dw0;
    }
    Ok(ConditionalCloud {
        w0_path,
        x0_path,
        cloud,
        tagged,
        m_cloud,
        n_tagged,
        n_steps,
    })
}

/// Conditional McKean–Vlasov system with `n_tagged` tagged minors whose noise
/// is drawn from `stream` (label suffix `tagged`).
pub fn simulate_conditional_mkv(
    s: &Scenario,
    w0_increments: &[f64],
    n_tagged: usize,
    m_cloud: usize,
    stream: &RandomStream,
) -> Result<ConditionalCloud> {
    let n_steps = w0_increments.len();
    let sqrt_h = s.step().sqrt();
    let tagged_stream = stream.relabel(format!("{}/tagged", stream.label));
    let mut tagged = vec![0.0; n_tagged * n_steps];
    if n_steps > 0 {
        for (j, chunk) in tagged.chunks_mut(n_steps).enumerate() {
            tagged_stream.derive(j as u64).fill_normal(chunk);
            for v in chunk.iter_mut() {
                *v *= sqrt_h;
            }
        }
    }
    simulate_limit_with_tagged(s, w0_increments, &tagged, m_cloud, stream)
}

/// Wasserstein-2 distance between two empirical measures with equally many atoms.
pub fn wasserstein2_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if samples_a.len() != samples_b.len() {
        return Err(Error::Dimension(format!(
            "sample sizes differ: {} vs {}",
            samples_a.len(),
            samples_b.len()
        )));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq = fsum(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)));
    Ok((sq / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scen(model: ModelParams) -> Scenario {
        Scenario {
            model,
            n_steps: 8,
            ..Scenario::default()
        }
    }

    fn brownian() -> ModelParams {
        ModelParams {
            kappa_b0: 0.0,
            kappa_b1: 0.0,
            sigma_amp: 0.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(0.5, 2.0, 7).unwrap();
        assert_eq!(g.times[0], 0.5);
        assert_eq!(g.times[7], 2.0);
        assert!(g.times.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn bundle_moments() {
        let g = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let b = sample_brownian_bundle(&g, 0, 100_000, &RandomStream::new(5, "w", 0));
        let xs: Vec<f64> = (0..b.n_samples).map(|k| b.dw(k, 0)[0]).collect();
        let mean = fsum(xs.iter().copied()) / xs.len() as f64;
        let var = fsum(xs.iter().map(|x| (x - mean) * (x - mean))) / (xs.len() - 1) as f64;
        assert!(mean.abs() < 0.016, "{mean}");
        // Variance standard error is sqrt(2/n) for unit variance.
        assert!((var - 1.0).abs() < 5.0 * (2.0f64 / 1e5).sqrt(), "{var}");
    }

    #[test]
    fn bundle_is_deterministic_and_shared_across_n() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let st = RandomStream::new(9, "w", 0);
        let a = sample_brownian_bundle(&g, 3, 5, &st);
        assert_eq!(a, sample_brownian_bundle(&g, 3, 5, &st));
        let big = sample_brownian_bundle(&g, 6, 5, &st);
        for k in 0..5 {
            for j in 0..=3 {
                assert_eq!(a.dw(k, j), big.dw(k, j));
            }
        }
    }

    #[test]
    fn pure_brownian_system() {
        let s = scen(brownian());
        let g = TimeGrid::from_scenario(&s);
        let b = sample_brownian_bundle(&g, 4, 3, &RandomStream::new(1, "w", 0));
        let p = simulate_n_system(&s, 4, &b).unwrap();
        for k in 0..3 {
            for j in 0..=4 {
                let mut acc = if j == 0 { s.x0_init } else { s.xbar_init };
                let path = p.path(k, j);
                assert_eq!(path[0], acc);
                for i in 0..g.n_steps {
                    acc += b.dw(k, j)[i];
                    assert_eq!(path[i + 1], acc);
                }
            }
        }
    }

    #[test]
    fn single_step_drift_matches_direct_average() {
        let s = Scenario {
            n_steps: 1,
            x0_init: 0.3,
            minor_inits: Some((0..8).map(|l| -1.0 + 0.25 * l as f64).collect()),
            ..Scenario::default()
        };
        let g = TimeGrid::from_scenario(&s);
        let mut b = sample_brownian_bundle(&g, 8, 1, &RandomStream::new(1, "w", 0));
        b.increments.iter_mut().for_each(|v| *v = 0.0);
        let p = simulate_n_system(&s, 8, &b).unwrap();
        let xs = s.minor_inits.clone().unwrap();
        let drift: f64 = xs.iter().map(|&xl| s.model.drift0_unc(0.3, xl)).sum::<f64>() / 8.0;
        assert!((p.path(0, 0)[1] - (0.3 + g.h() * drift)).abs() < 1e-14);
        for j in 0..8 {
            let d: f64 = xs.iter().map(|&xl| s.model.drift1_unc(0.3, xs[j], xl)).sum::<f64>() / 8.0;
            assert!((p.path(0, j + 1)[1] - (xs[j] + g.h() * d)).abs() < 1e-14);
        }
    }

    /// Direct pairwise Euler step, used as an oracle for the separable update.
    fn pairwise_paths(s: &Scenario, b: &PathBundle, k: usize) -> Vec<Vec<f64>> {
        let n = b.n_minor;
        let m = &s.model;
        let h = b.grid.h();
        let mut x = vec![s.x0_init];
        x.extend(s.minor_starts(n).unwrap());
        let mut out = vec![x.clone()];
        for i in 0..b.grid.n_steps {
            let mut nx = x.clone();
            let d0: f64 = (1..=n).map(|l| m.drift0_unc(x[0], x[l])).sum::<f64>() / n as f64;
            let s0: f64 = (1..=n).map(|l| m.diff0_unc(x[0], x[l])).sum::<f64>() / n as f64;
            nx[0] = x[0] + h * d0 + s0 * b.dw(k, 0)[i];
            for j in 1..=n {
                let d: f64 = (1..=n).map(|l| m.drift1_unc(x[0], x[j], x[l])).sum::<f64>() / n as f64;
                let sg: f64 = (1..=n).map(|l| m.diff1_unc(x[0], x[j], x[l])).sum::<f64>() / n as f64;
                nx[j] = x[j] + h * d + sg * b.dw(k, j)[i];
            }
            x = nx;
            out.push(x.clone());
        }
        out
    }

    #[test]
    fn separable_update_matches_pairwise() {
        let s = scen(ModelParams {
            kappa_b0: 1.3,
            kappa_b1: -0.7,
            sigma_amp: 0.4,
            ..ModelParams::default()
        });
        let g = TimeGrid::from_scenario(&s);
        let b = sample_brownian_bundle(&g, 6, 2, &RandomStream::new(3, "w", 0));
        let p = simulate_n_system(&s, 6, &b).unwrap();
        for k in 0..2 {
            let oracle = pairwise_paths(&s, &b, k);
            for (i, row) in oracle.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    assert!((p.path(k, j)[i] - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn minor_relabelling_permutes_rows() {
        let s = Scenario {
            minor_inits: Some(vec![0.1, -0.4, 0.9, 0.2, -1.0]),
            ..scen(ModelParams::default())
        };
        let g = TimeGrid::from_scenario(&s);
        let b = sample_brownian_bundle(&g, 5, 2, &RandomStream::new(3, "w", 0));
        let p = simulate_n_system(&s, 5, &b).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut s2 = s.clone();
        s2.minor_inits = Some(perm.iter().map(|&q| s.minor_inits.as_ref().unwrap()[q]).collect());
        let mut b2 = b.clone();
        let n = g.n_steps;
        for k in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let from = b.dw(k, src + 1).to_vec();
                let start = (k * 6 + dst + 1) * n;
                b2.increments[start..start + n].copy_from_slice(&from);
            }
        }
        let p2 = simulate_n_system(&s2, 5, &b2).unwrap();
        for k in 0..2 {
            assert_eq!(p.path(k, 0), p2.path(k, 0));
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(p.path(k, src + 1), p2.path(k, dst + 1));
            }
        }
    }

    #[test]
    fn rejects_bad_n() {
        let s = scen(ModelParams::default());
        let g = TimeGrid::from_scenario(&s);
        let b = sample_brownian_bundle(&g, 1, 1, &RandomStream::new(1, "w", 0));
        assert!(simulate_n_system(&s, 1, &b).is_err());
        assert!(simulate_n_system(&s, 2, &b).is_err());
    }

    #[test]
    fn decoupled_cloud() {
        let s = scen(brownian());
        let dw0: Vec<f64> = RandomStream::new(1, "w0", 0).normals(8).iter().map(|v| v * s.step().sqrt()).collect();
        let c = simulate_conditional_mkv(&s, &dw0, 3, 16, &RandomStream::new(1, "cloud", 0)).unwrap();
        let mut acc = s.x0_init;
        for i in 0..8 {
            acc += dw0[i];
            assert_eq!(c.x0_path[i + 1], acc);
        }
        assert!(c.member(0) != c.member(1));
        assert_eq!(c.member(0)[0], s.xbar_init);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein2_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein2_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein2_1d(&[0.0, 2.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert!(wasserstein2_1d(&[], &[]).is_err());
        assert!(wasserstein2_1d(&[1.0], &[1.0, 2.0]).is_err());
    }
}
