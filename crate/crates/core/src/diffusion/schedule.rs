//! Variance-preserving noise schedules.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-timestep coefficients for `t` in `1..=T`; index 0 holds the clean
/// state (`alpha = 1`, `beta = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    steps: usize,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    weight: Vec<f64>,
}

const LINEAR_BETA: (f64, f64) = (1e-4, 0.02);
const COSINE_OFFSET: f64 = 0.008;

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("noise schedule needs T >= 2, got {steps}")));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = LINEAR_BETA;
            let mut prod = 1.0;
            for t in 1..=steps {
                let b = lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64;
                prod *= 1.0 - b;
                alpha_bar.push(prod);
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            for t in 1..=steps {
                // Keep a sliver of signal at t = T so alpha stays strictly decreasing.
                alpha_bar.push((f(t as f64) / f0).clamp(1e-9, 1.0));
            }
        }
    }
    let alpha: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let beta: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let weight = beta.iter().map(|b| b * b).collect();
    Ok(NoiseSchedule {
        kind,
        steps,
        alpha_bar,
        alpha,
        beta,
        weight,
    })
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal scale.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Noise scale.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Score-distillation weighting `w(t)`.
    pub fn weight(&self, t: usize) -> f64 {
        self.weight[t]
    }

    /// `alpha_t x + beta_t eps`, elementwise.
    pub fn add_noise(&self, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        add_noise(x, t, eps, self)
    }
}

pub fn add_noise(x: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "add_noise",
            format!("image {:?} vs noise {:?}", x.shape(), eps.shape()),
        ));
    }
    let (a, b) = (schedule.alpha(t), schedule.beta(t));
    let data = x.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::SeedRng;
    use proptest::prelude::*;

    #[test]
    fn variance_preserving_for_both_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(1000, kind).unwrap();
            for t in 0..=1000 {
                let (a, b) = (s.alpha(t), s.beta(t));
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
                if t > 0 {
                    assert!(a <= s.alpha(t - 1) && b >= s.beta(t - 1));
                }
            }
            assert!(s.alpha(1) > 0.99);
        }
    }

    #[test]
    fn cosine_strictly_decreasing() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha(t) < s.alpha(t - 1), "t={t}");
        }
    }

    #[test]
    fn linear_matches_reference_formula() {
        // Closed-form product written independently: log-sum of (1 - beta_k).
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let log_ab: f64 = (0..500)
            .map(|k| (1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0)).ln())
            .sum();
        let ab = log_ab.exp();
        assert!((s.alpha(500) - ab.sqrt()).abs() < 1e-12);
        assert!((s.beta(500) - (1.0 - ab).sqrt()).abs() < 1e-12);
        assert!((s.weight(500) - (1.0 - ab)).abs() < 1e-12);
    }

    #[test]
    fn rejects_short_schedule_and_bad_inputs() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x = Tensor::zeros(vec![2, 2]);
        assert!(s.add_noise(&x, 3, &Tensor::zeros(vec![4])).is_err());
        assert!(s.add_noise(&x, 11, &x).is_err());
    }

    #[test]
    fn endpoints() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        let mut rng = SeedRng::new(1);
        let x = Tensor::new(vec![8], rng.normal_vec(8)).unwrap();
        let e = Tensor::new(vec![8], rng.normal_vec(8)).unwrap();
        let z0 = s.add_noise(&x, 0, &e).unwrap();
        assert!(z0.max_abs_diff(&x) < 1e-6);
        let lin = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let z1 = lin.add_noise(&x, 1, &e).unwrap();
        assert!(z1.max_abs_diff(&x) < 2e-2);
        let zt = lin.add_noise(&x, 1000, &e).unwrap();
        assert!(zt.max_abs_diff(&e) < 1e-2);
    }

    #[test]
    fn monte_carlo_mean_and_variance() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let t = 300;
        let x = Tensor::new(vec![3], vec![0.7, -0.2, 0.4]).unwrap();
        let mut rng = SeedRng::new(9);
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let e = Tensor::new(vec![3], rng.normal_vec(3)).unwrap();
            let z = s.add_noise(&x, t, &e).unwrap();
            for k in 0..3 {
                sum[k] += z.data()[k];
                sq[k] += z.data()[k] * z.data()[k];
            }
        }
        let b = s.beta(t);
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se = b / (n as f64).sqrt();
            assert!((mean - s.alpha(t) * x.data()[k]).abs() < 3.0 * se);
            // Variance of a sample variance of normals: 2 sigma^4 / n.
            let se_var = (2.0 / n as f64).sqrt() * b * b;
            assert!((var - b * b).abs() < 3.0 * se_var, "{var} vs {}", b * b);
        }
    }

    proptest! {
        #[test]
        fn noising_is_affine(t in 0usize..=50, xs in prop::collection::vec(-1.0f64..1.0, 4), es in prop::collection::vec(-3.0f64..3.0, 4)) {
            let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
            let x = Tensor::new(vec![4], xs.clone()).unwrap();
            let e = Tensor::new(vec![4], es.clone()).unwrap();
            let z = s.add_noise(&x, t, &e).unwrap();
            for k in 0..4 {
                prop_assert!((z.data()[k] - (s.alpha(t) * xs[k] + s.beta(t) * es[k])).abs() < 1e-12);
            }
        }
    }
}
