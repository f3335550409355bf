use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A scalar function of a flat parameter vector together with a claimed gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> f64;
    fn gradient(&self, params: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

const STEP: f64 = 1e-5;
const MIN_COORDS: usize = 32;

/// Compare `objective.gradient` with central differences (h = 1e-5) on a
/// seeded random subset of at least 32 coordinates (all of them when fewer).
///
/// Relative error per coordinate is `|g − fd| / max(|g|, |fd|, 1e-6)`.
pub fn finite_diff_check(objective: &dyn Objective, params: &[f64], tolerance: f64, seed: u64) -> FdReport {
    let g = objective.gradient(params);
    let n = params.len();
    let coords: Vec<usize> = if n <= MIN_COORDS {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, MIN_COORDS).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut p = params.to_vec();
    let mut worst = (0.0f64, None);
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = objective.value(&p);
        p[i] = orig - STEP;
        let down = objective.value(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(i));
        }
    }
    FdReport {
        checked: coords.len(),
        max_rel_err: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        corrupt: Option<usize>,
    }

    impl Objective for Quadratic {
        fn value(&self, p: &[f64]) -> f64 {
            p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum()
        }
        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            let mut g: Vec<f64> = p.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
            if let Some(i) = self.corrupt {
                g[i] *= 2.0;
            }
            g
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn value(&self, _: &[f64]) -> f64 {
            1.5
        }
        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            vec![0.0; p.len()]
        }
    }

    #[test]
    fn correct_gradient_passes() {
        let p: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let r = finite_diff_check(&Quadratic { corrupt: None }, &p, 1e-4, 0);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn corrupted_coordinate_fails() {
        let p: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        let r = finite_diff_check(&Quadratic { corrupt: Some(7) }, &p, 1e-4, 0);
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(7));
    }

    #[test]
    fn constant_passes() {
        let r = finite_diff_check(&Constant, &[0.3; 100], 1e-4, 1);
        assert!(r.passed);
        assert_eq!(r.checked, 32);
    }
}
