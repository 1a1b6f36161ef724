//! Numeric gradient checking utilities.
//!
//! Analytic gradients are compared against central differences,
//! `(f(x + h) - f(x - h)) / 2h`, at a subset of parameter slots. With f64
//! losses and `h = 1e-5` the difference is accurate to roughly 1e-9, so a
//! relative tolerance of 1e-4 leaves a wide margin.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Perturbation step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative error tolerance for accepting an analytic gradient.
pub const FD_TOL: f64 = 1e-4;

pub fn central_difference(f_plus: f64, f_minus: f64, step: f64) -> f64 {
    (f_plus - f_minus) / (2.0 * step)
}

/// Relative error with a floor that keeps near-zero gradient pairs from
/// blowing up on rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Picks a random subset of `0..n` of roughly `fraction` size, never empty.
pub fn pick_fraction(n: usize, fraction: f64, rng: &mut ChaCha20Rng) -> Vec<usize> {
    assert!(n > 0, "cannot sample from an empty parameter set");
    let want = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < want {
        picked.insert(rng.random_range(0..n));
    }
    picked.into_iter().collect()
}

/// Running worst-case tracker for a gradient check sweep.
#[derive(Debug, Default, Clone)]
pub struct GradCheckStats {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckStats {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel_err < FD_TOL
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn central_difference_matches_polynomial() {
        // f(x) = x^3 at x=2: f' = 12
        let f = |x: f64| x * x * x;
        let d = central_difference(f(2.0 + FD_STEP), f(2.0 - FD_STEP), FD_STEP);
        assert!(rel_err(12.0, d) < 1e-8);
    }

    #[test]
    fn pick_fraction_is_bounded_and_nonempty() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let picked = pick_fraction(1000, 0.01, &mut rng);
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|&i| i < 1000));
        assert_eq!(pick_fraction(3, 0.0001, &mut rng).len(), 1);
    }

    #[test]
    fn stats_track_worst_case() {
        let mut stats = GradCheckStats::default();
        stats.record(1.0, 1.0);
        stats.record(1.0, 1.001);
        assert_eq!(stats.checked, 2);
        assert!(!stats.ok());
        assert!((stats.worst_numeric - 1.001).abs() < 1e-12);
    }
}
