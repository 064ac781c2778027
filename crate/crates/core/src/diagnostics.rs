//! Verification utilities and experiment metrics.

use rand::Rng;

use crate::dynamics::{leapfrog_trajectory, HmcConfig, Mass, PhaseState};
use crate::error::{Error, Result};
use crate::models::TargetModel;

/// One epoch of a sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub theta: Vec<f64>,
    pub energy: f64,
    /// E-step sample size in force during the epoch; `None` for base samplers.
    pub s_count: Option<usize>,
    /// Metropolis decision, HMC kinds only.
    pub accepted: Option<bool>,
    /// Wall-clock duration of the epoch in milliseconds, when timing is on.
    pub epoch_ms: Option<f64>,
}

/// Per-coordinate `√(mean((θᵢ − truthᵢ)²))`.
pub fn rmse(samples: &[Vec<f64>], truth: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut acc = vec![0.0; truth.len()];
    for s in samples {
        if s.len() != truth.len() {
            return Err(Error::DimensionMismatch { expected: truth.len(), got: s.len() });
        }
        for ((a, v), t) in acc.iter_mut().zip(s).zip(truth) {
            *a += (v - t).powi(2);
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n).sqrt()).collect())
}

/// Per-coordinate `|mean(θᵢ) − truthᵢ|`.
pub fn posterior_mean_error(samples: &[Vec<f64>], truth: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut acc = vec![0.0; truth.len()];
    for s in samples {
        if s.len() != truth.len() {
            return Err(Error::DimensionMismatch { expected: truth.len(), got: s.len() });
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    Ok(acc.into_iter().zip(truth).map(|(a, t)| (a / n - t).abs()).collect())
}

/// Worst coordinate of `|fd − g| / max(1, |g|)` with central differences of
/// the full-data log likelihood.
pub fn finite_diff_grad_check(model: &dyn TargetModel, theta: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let grad = model.grad_log_lik(theta)?;
    let mut worst = 0.0_f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = model.log_lik(&probe)?;
        probe[i] = theta[i] - h;
        let down = model.log_lik(&probe)?;
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Runs the leapfrog forward, negates the momentum, runs forward again and
/// returns `‖θ_final − θ_initial‖∞`.
pub fn reversibility_check(model: &dyn TargetModel, mass: &Mass, cfg: &HmcConfig, state: &PhaseState) -> Result<f64> {
    let (mut mid, _) = leapfrog_trajectory(state, model, mass, cfg)?;
    mid.negate_momentum();
    let (end, _) = leapfrog_trajectory(&mid, model, mass, cfg)?;
    Ok(end
        .theta
        .iter()
        .zip(&state.theta)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
}

/// Mean `|ΔH|` at step size `ε` over mean `|ΔH|` at `ε/2`, for `trials`
/// trajectories started at the model's reference point with `p ~ N(0, M)`.
/// The half-step runs use `2·steps` so both cover the same integration time.
/// Returns NaN when the half-step error is zero (an exactly integrable target).
pub fn energy_scaling_check<R: Rng + ?Sized>(
    model: &dyn TargetModel,
    mass: &Mass,
    step_size: f64,
    steps: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials < 10 {
        return Err(Error::InvalidConfig(format!("energy scaling needs at least 10 trials, got {trials}")));
    }
    let coarse = HmcConfig { step_size, steps };
    let fine = HmcConfig { step_size: 0.5 * step_size, steps: 2 * steps };
    let theta = model.reference_point();
    let (mut sum_coarse, mut sum_fine) = (0.0, 0.0);
    for _ in 0..trials {
        let start = PhaseState::new(theta.clone(), mass.sample_momentum(rng)?);
        sum_coarse += leapfrog_trajectory(&start, model, mass, &coarse)?.1.abs();
        sum_fine += leapfrog_trajectory(&start, model, mass, &fine)?.1.abs();
    }
    // Rounding noise alone sits near 1e-15 per trajectory.
    if sum_fine <= 1e-13 * trials as f64 {
        return Ok(f64::NAN);
    }
    Ok(sum_coarse / sum_fine)
}

/// Fraction of accepted epochs among records that carry a Metropolis decision.
pub fn acceptance_rate(records: &[TraceRecord]) -> Option<f64> {
    let decided: Vec<bool> = records.iter().filter_map(|r| r.accepted).collect();
    if decided.is_empty() {
        return None;
    }
    Some(decided.iter().filter(|a| **a).count() as f64 / decided.len() as f64)
}

pub fn mean_epoch_ms(records: &[TraceRecord]) -> Option<f64> {
    let times: Vec<f64> = records.iter().filter_map(|r| r.epoch_ms).collect();
    if times.is_empty() {
        return None;
    }
    Some(times.iter().sum::<f64>() / times.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_mixture_lr_data, BayesLogisticModel, Batch, GaussianTarget};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// `L(θ) = c·θ₀`: constant gradient, integrated exactly by leapfrog.
    struct Linear(f64);

    impl TargetModel for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn n_data(&self) -> usize {
            0
        }
        fn log_prior(&self, theta: &[f64]) -> f64 {
            self.0 * theta[0]
        }
        fn add_grad_log_prior(&self, _: &[f64], out: &mut [f64]) {
            out[0] += self.0;
        }
        fn data_log_lik(&self, _: &[f64], _: Batch<'_>) -> f64 {
            0.0
        }
        fn add_data_grad(&self, _: &[f64], _: Batch<'_>, _: f64, _: &mut [f64]) {}
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(rmse(&[vec![0.0], vec![2.0]], &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(rmse(&[], &[1.0]), Err(Error::EmptyTrace));
    }

    #[test]
    fn rmse_of_gaussian_draws_is_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let samples: Vec<Vec<f64>> = (0..100_000).map(|_| vec![2.0 + normal.sample(&mut rng)]).collect();
        let r = rmse(&samples, &[2.0]).unwrap()[0];
        assert!((r - 0.3).abs() < 0.3 * 0.01, "{r}");
    }

    #[test]
    fn posterior_mean_error_example() {
        assert_eq!(posterior_mean_error(&[vec![0.0], vec![3.0]], &[1.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn grad_check_examples() {
        let lr = BayesLogisticModel::new(generate_mixture_lr_data(200, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fine = finite_diff_grad_check(&lr, &theta, 1e-5).unwrap();
        assert!(fine < 1e-5, "{fine}");
        let coarse = finite_diff_grad_check(&lr, &theta, 1e-1).unwrap();
        assert!(coarse > fine);

        let quad = GaussianTarget::with_precisions(vec![1.0, 3.0]);
        assert!(finite_diff_grad_check(&quad, &[0.4, -1.2], 1e-3).unwrap() < 1e-10);
    }

    #[test]
    fn reversibility_examples() {
        let m = GaussianTarget::with_precisions(vec![2.0, 0.5]);
        let st = PhaseState::new(vec![0.3, -0.9], vec![1.0, 0.2]);
        let mass = Mass::identity(2);
        let err = reversibility_check(&m, &mass, &HmcConfig { step_size: 0.01, steps: 50 }, &st).unwrap();
        assert!(err < 1e-8);
        assert_eq!(reversibility_check(&m, &mass, &HmcConfig { step_size: 0.01, steps: 0 }, &st).unwrap(), 0.0);
        let free = reversibility_check(&Linear(0.0), &Mass::identity(1), &HmcConfig { step_size: 0.1, steps: 20 }, &PhaseState::new(vec![1.0], vec![0.5]))
            .unwrap();
        assert!(free < 1e-14);
    }

    #[test]
    fn energy_scaling_is_quadratic() {
        let m = GaussianTarget::standard(1);
        let ratios: Vec<f64> = (0..5)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                energy_scaling_check(&m, &Mass::identity(1), 0.05, 10, 100, &mut rng).unwrap()
            })
            .collect();
        for r in &ratios {
            assert!((3.0..=5.0).contains(r), "{ratios:?}");
        }
        let spread = ratios.iter().cloned().fold(f64::MIN, f64::max) - ratios.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 1.0, "{ratios:?}");
    }

    #[test]
    fn energy_scaling_on_linear_potential_is_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(energy_scaling_check(&Linear(2.0), &Mass::identity(1), 0.05, 10, 20, &mut rng).unwrap().is_nan());
    }

    fn rec(accepted: Option<bool>, ms: Option<f64>) -> TraceRecord {
        TraceRecord { epoch: 0, theta: vec![], energy: 0.0, s_count: None, accepted, epoch_ms: ms }
    }

    #[test]
    fn tallies() {
        let r = [rec(Some(true), Some(1.0)), rec(Some(false), Some(3.0)), rec(None, None)];
        assert_eq!(acceptance_rate(&r), Some(0.5));
        assert_eq!(mean_epoch_ms(&r), Some(2.0));
        assert_eq!(acceptance_rate(&[rec(None, None)]), None);
    }

    proptest! {
        #[test]
        fn rmse_is_permutation_invariant(mut xs in prop::collection::vec(-10.0f64..10.0, 1..40), t in -5.0f64..5.0) {
            let a = rmse(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>(), &[t]).unwrap();
            xs.reverse();
            let half = xs.len() / 2;
            xs.rotate_left(half);
            let b = rmse(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>(), &[t]).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-12 * a[0].max(1.0));
        }

        #[test]
        fn rmse_is_translation_covariant(xs in prop::collection::vec(-10.0f64..10.0, 1..40), t in -5.0f64..5.0, c in -100.0f64..100.0) {
            let a = rmse(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>(), &[t]).unwrap();
            let b = rmse(&xs.iter().map(|x| vec![*x + c]).collect::<Vec<_>>(), &[t + c]).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-9 * a[0].max(1.0));
        }

        #[test]
        fn reversibility_ignores_momentum_sign(p0 in -2.0f64..2.0, p1 in -2.0f64..2.0, t0 in -1.0f64..1.0) {
            let m = GaussianTarget::with_precisions(vec![1.0, 4.0]);
            let cfg = HmcConfig { step_size: 0.02, steps: 30 };
            let st = PhaseState::new(vec![t0, 0.1], vec![p0, p1]);
            let mut flipped = st.clone();
            flipped.negate_momentum();
            let a = reversibility_check(&m, &Mass::identity(2), &cfg, &st).unwrap();
            let b = reversibility_check(&m, &Mass::identity(2), &cfg, &flipped).unwrap();
            prop_assert!(a < 1e-8 && b < 1e-8);
        }
    }
}
