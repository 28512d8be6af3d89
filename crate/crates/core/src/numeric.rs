//! Order-independent summation.
//!
//! Sums over minor agents go through [`fsum`] so that relabelling the minors
//! leaves every aggregate bit-identical: the result is the correctly rounded
//! value of the exact sum, which does not depend on the order of the terms.

/// Correctly rounded sum of finite `f64`s (Shewchuk partials, as in Python's `math.fsum`).
pub fn fsum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = ExactSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Mean of `values` computed with [`fsum`]. Returns NaN for an empty input.
pub fn fmean(values: &[f64]) -> f64 {
    fsum(values.iter().copied()) / values.len() as f64
}

/// Incremental exact accumulator backing [`fsum`].
#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            partials: Vec::with_capacity(4),
        }
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even fix-up when the remaining partials push the sum past a tie.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_cancellation() {
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum([0.1; 10]), 1.0);
        assert_eq!(fsum(std::iter::empty()), 0.0);
    }

    #[test]
    fn order_independent() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 7919) % 113) as f64 * 0.37 - 20.1).collect();
        let mut r = v.clone();
        r.reverse();
        let mut s = v.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let a = fsum(v.iter().copied());
        assert_eq!(a.to_bits(), fsum(r).to_bits());
        assert_eq!(a.to_bits(), fsum(s).to_bits());
    }
}
