//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check a seeded random subset of this many coordinates; `None` checks all.
    pub sample: Option<usize>,
    pub seed: u64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            sample: None,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub passed: bool,
}

pub fn grad_check<F>(loss: F, params: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(cfg.epsilon > 0.0, "epsilon must be positive");
    assert_eq!(params.len(), analytic.len());
    let indices: Vec<usize> = match cfg.sample {
        Some(k) if k < params.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, params.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..params.len()).collect(),
    };
    let mut work = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + cfg.epsilon;
        let up = loss(&work);
        work[i] = orig - cfg.epsilon;
        let down = loss(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        checked: indices.len(),
        passed: max_rel_error < cfg.tolerance,
    }
}
