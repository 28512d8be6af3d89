use crate::forward::{ParticlePaths, PathBundle};
use crate::numeric::fsum;

/// Regression features at a given sample and time step.
///
/// `fill` must write the constant 1 as its first feature. Problems with
/// minor Brownian motions also need the per-minor features used for the
/// pooled `Z^j` fit.
pub trait RegressionBasis: Sync {
    fn dim(&self) -> usize;
    fn fill(&self, sample: usize, step: usize, out: &mut [f64]);
    fn minor_dim(&self) -> usize {
        0
    }
    /// Features for minor `j` (1-based).
    fn fill_minor(&self, sample: usize, j: usize, step: usize, out: &mut [f64]) {
        let _ = (sample, j, step, out);
    }
}

/// Forward states of the major (`j = 0`) and minor players,
/// stored `[sample][step][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct States {
    pub n_samples: usize,
    pub n_minor: usize,
    pub n_steps: usize,
    pub data: Vec<f64>,
}

impl States {
    /// Weak-formulation states `X^j = x_j + W^j`.
    pub fn brownian(bundle: &PathBundle, x0: f64, minor_inits: &[f64]) -> Self {
        let n = bundle.n_samples;
        let nm = bundle.n_minor;
        let ns = bundle.grid.n_steps;
        assert_eq!(minor_inits.len(), nm, "one initial state per minor");
        let w = nm + 1;
        let mut data = vec![0.0; n * (ns + 1) * w];
        for k in 0..n {
            for j in 0..w {
                let start = if j == 0 { x0 } else { minor_inits[j - 1] };
                let dw = bundle.dw(k, j);
                let mut x = start;
                data[k * (ns + 1) * w + j] = x;
                for i in 0..ns {
                    x += dw[i];
                    data[(k * (ns + 1) + i + 1) * w + j] = x;
                }
            }
        }
        Self {
            n_samples: n,
            n_minor: nm,
            n_steps: ns,
            data,
        }
    }

    pub fn from_particles(p: &ParticlePaths) -> Self {
        let ns = p.grid.n_steps;
        let w = p.n_minor + 1;
        let mut data = vec![0.0; p.n_samples * (ns + 1) * w];
        for k in 0..p.n_samples {
            for j in 0..w {
                for (i, &x) in p.path(k, j).iter().enumerate() {
                    data[(k * (ns + 1) + i) * w + j] = x;
                }
            }
        }
        Self {
            n_samples: p.n_samples,
            n_minor: p.n_minor,
            n_steps: ns,
            data,
        }
    }

    /// `(X^0, X^1, .., X^N)` at one sample and step.
    pub fn at(&self, sample: usize, step: usize) -> &[f64] {
        let w = self.n_minor + 1;
        let s = (sample * (self.n_steps + 1) + step) * w;
        &self.data[s..s + w]
    }
}

/// Exchangeable basis: `{1, x0, x0^2, m1, m2, x0 m1}` for `Y` and `Z^0`,
/// `{1, x0, xj, m1, xj^2}` for the minors, with `mk` the empirical minor
/// moments.
pub struct SymmetricBasis<'a> {
    states: &'a States,
    moments: Vec<[f64; 2]>,
    extra: Vec<f64>,
    n_extra: usize,
}

impl<'a> SymmetricBasis<'a> {
    pub fn new(states: &'a States) -> Self {
        Self::with_averages(states, &[])
    }

    /// The exchangeable basis plus the empirical averages `(1/N) sum_l g(x_l)`
    /// of each extra function `g`, appended to the `Y` and `Z^0` features.
    pub fn with_averages(states: &'a States, extra_fns: &[fn(f64) -> f64]) -> Self {
        let ns = states.n_steps;
        let nm = states.n_minor.max(1) as f64;
        let mut moments = Vec::with_capacity(states.n_samples * (ns + 1));
        let mut extra = Vec::with_capacity(states.n_samples * (ns + 1) * extra_fns.len());
        for k in 0..states.n_samples {
            for i in 0..=ns {
                let x = &states.at(k, i)[1..];
                moments.push([
                    fsum(x.iter().copied()) / nm,
                    fsum(x.iter().map(|v| v * v)) / nm,
                ]);
                for g in extra_fns {
                    extra.push(fsum(x.iter().map(|v| g(*v))) / nm);
                }
            }
        }
        Self {
            states,
            moments,
            extra,
            n_extra: extra_fns.len(),
        }
    }

    fn m(&self, k: usize, i: usize) -> [f64; 2] {
        self.moments[k * (self.states.n_steps + 1) + i]
    }
}

impl RegressionBasis for SymmetricBasis<'_> {
    fn dim(&self) -> usize {
        6 + self.n_extra
    }

    fn fill(&self, k: usize, i: usize, out: &mut [f64]) {
        let x0 = self.states.at(k, i)[0];
        let [m1, m2] = self.m(k, i);
        out[..6].copy_from_slice(&[1.0, x0, x0 * x0, m1, m2, x0 * m1]);
        let at = (k * (self.states.n_steps + 1) + i) * self.n_extra;
        out[6..].copy_from_slice(&self.extra[at..at + self.n_extra]);
    }

    fn minor_dim(&self) -> usize {
        if self.states.n_minor > 0 {
            5
        } else {
            0
        }
    }

    fn fill_minor(&self, k: usize, j: usize, i: usize, out: &mut [f64]) {
        let x = self.states.at(k, i);
        let [m1, _] = self.m(k, i);
        out.copy_from_slice(&[1.0, x[0], x[j], m1, x[j] * x[j]]);
    }
}

/// Precomputed features `[sample][step][p]` without minor components.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub n_steps: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    /// Polynomial features `1, x, .., x^degree` of a path table `[sample][step]`
    /// with `n_steps + 1` columns, followed by `extras` columns of the same shape.
    pub fn polynomial(x: &[f64], n_steps: usize, degree: usize, extras: &[&[f64]]) -> Self {
        let cols = n_steps + 1;
        let n = x.len() / cols;
        let p = degree + 1 + extras.len();
        let mut data = Vec::with_capacity(n * cols * p);
        for k in 0..n {
            for i in 0..cols {
                let v = x[k * cols + i];
                let mut pw = 1.0;
                for _ in 0..=degree {
                    data.push(pw);
                    pw *= v;
                }
                for e in extras {
                    data.push(e[k * cols + i]);
                }
            }
        }
        Self { n_steps, p, data }
    }
}

impl RegressionBasis for FeatureTable {
    fn dim(&self) -> usize {
        self.p
    }

    fn fill(&self, k: usize, i: usize, out: &mut [f64]) {
        let s = (k * (self.n_steps + 1) + i) * self.p;
        out.copy_from_slice(&self.data[s..s + self.p]);
    }
}
