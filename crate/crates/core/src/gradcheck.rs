//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of every backward kernel it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Symmetric relative error with a small absolute floor so that two
/// gradients that are both essentially zero compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        if self.checked == 0 || e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &CheckReport) {
        if other.checked == 0 {
            return;
        }
        if self.checked == 0 || other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self.checked += other.checked;
    }
}

/// Compares `analytic[i]` with `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each
/// `i` in `indices`. `x` is restored before returning.
pub fn check_indices(
    x: &mut [f64],
    indices: &[usize],
    analytic: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckReport {
    let mut report = CheckReport::default();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x);
        x[i] = orig - step;
        let minus = f(x);
        x[i] = orig;
        report.record(i, analytic[i], (plus - minus) / (2.0 * step));
    }
    report
}

/// Checks every coordinate.
pub fn check_all(x: &mut [f64], analytic: &[f64], step: f64, f: impl FnMut(&[f64]) -> f64) -> CheckReport {
    let idx: Vec<usize> = (0..x.len()).collect();
    check_indices(x, &idx, analytic, step, f)
}

/// `count` distinct indices below `len`, sorted, drawn deterministically from `seed`.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, len, count.min(len)).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_up_to_rounding() {
        let mut x = vec![0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = check_all(&mut x, &g, FD_STEP, |x| x.iter().map(|v| v * v).sum());
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(x, vec![0.3, -1.2, 2.0]);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut x = vec![1.0];
        let r = check_all(&mut x, &[3.0], FD_STEP, |x| x[0] * x[0]);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn sampled_indices_are_distinct_and_deterministic() {
        let a = sample_indices(1000, 20, 7);
        assert_eq!(a, sample_indices(1000, 20, 7));
        assert_eq!(a.len(), 20);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
