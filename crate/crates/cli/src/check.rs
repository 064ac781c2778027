//! Diagnostics suite behind the `check` subcommand.

use massmc::diagnostics::{energy_scaling_check, finite_diff_grad_check, reversibility_check};
use massmc::dynamics::{HmcConfig, Mass, PhaseState};
use massmc::mcem::{mcem_loop, MassState};
use massmc::models::{Batch, TargetModel};
use massmc::seeding::{stream_rng, CHAIN_STREAM};
use massmc::SpdMatrix;
use rand::Rng;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, SamplerName};
use crate::experiment::build_model;
use crate::CliError;

/// Quadratic energy error makes halving the step shrink `|ΔH|` about fourfold.
pub const SCALING_BAND: (f64, f64) = (3.0, 5.0);
pub const M_STEP_TOLERANCE: f64 = 0.05;
const REVERSIBILITY_TRIALS: usize = 5;
const M_STEP_BATCH: usize = 200;
const M_STEP_COUNT: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub value: Option<f64>,
    pub detail: String,
}

impl PropertyResult {
    fn from_value(name: &'static str, value: f64, passed: bool, detail: String) -> Self {
        Self { name, passed, value: Some(value), detail }
    }

    fn errored(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self { name, passed: false, value: None, detail: err.to_string() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }

    pub fn to_json(&self) -> Value {
        json!({ "name": self.name, "passed": self.passed, "value": self.value, "detail": self.detail })
    }
}

/// Test hook: perturbs the gradient so it no longer matches the log likelihood.
struct CorruptGradient<'a>(&'a dyn TargetModel);

impl TargetModel for CorruptGradient<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn n_data(&self) -> usize {
        self.0.n_data()
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.0.log_prior(theta)
    }

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        self.0.add_grad_log_prior(theta, out);
        out.iter_mut().for_each(|g| *g += 1.0);
    }

    fn data_log_lik(&self, theta: &[f64], batch: Batch<'_>) -> f64 {
        self.0.data_log_lik(theta, batch)
    }

    fn add_data_grad(&self, theta: &[f64], batch: Batch<'_>, scale: f64, out: &mut [f64]) {
        self.0.add_data_grad(theta, batch, 1.1 * scale, out);
    }

    fn reference_point(&self) -> Vec<f64> {
        self.0.reference_point()
    }
}

fn gradient(model: &dyn TargetModel, cfg: &ExperimentConfig) -> PropertyResult {
    const NAME: &str = "gradient";
    match finite_diff_grad_check(model, &model.reference_point(), cfg.grad_h) {
        Ok(err) => PropertyResult::from_value(
            NAME,
            err,
            err <= cfg.grad_tolerance,
            format!("max relative error {err:.3e} (tolerance {:.1e})", cfg.grad_tolerance),
        ),
        Err(e) => PropertyResult::errored(NAME, e),
    }
}

fn reversibility<R: Rng>(model: &dyn TargetModel, cfg: &ExperimentConfig, rng: &mut R) -> PropertyResult {
    const NAME: &str = "reversibility";
    let mass = Mass::identity(model.dim());
    let hmc = HmcConfig { step_size: cfg.step_size, steps: cfg.reversibility_steps };
    let mut worst = 0.0_f64;
    for _ in 0..REVERSIBILITY_TRIALS {
        let p = match mass.sample_momentum(rng) {
            Ok(p) => p,
            Err(e) => return PropertyResult::errored(NAME, e),
        };
        match reversibility_check(model, &mass, &hmc, &PhaseState::new(model.reference_point(), p)) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return PropertyResult::errored(NAME, e),
        }
    }
    PropertyResult::from_value(
        NAME,
        worst,
        worst <= cfg.reversibility_tolerance,
        format!(
            "max |θ error| {worst:.3e} over {} steps (tolerance {:.1e})",
            cfg.reversibility_steps, cfg.reversibility_tolerance
        ),
    )
}

fn energy_scaling<R: Rng>(model: &dyn TargetModel, cfg: &ExperimentConfig, rng: &mut R) -> PropertyResult {
    const NAME: &str = "energy-scaling";
    let eps = cfg.scaling_step_size.unwrap_or(cfg.step_size);
    let mass = Mass::identity(model.dim());
    match energy_scaling_check(model, &mass, eps, cfg.leapfrog_steps, cfg.scaling_trials, rng) {
        Ok(ratio) => PropertyResult::from_value(
            NAME,
            ratio,
            (SCALING_BAND.0..=SCALING_BAND.1).contains(&ratio),
            format!(
                "mean |ΔH| ratio {ratio:.3} between ε={eps:e} and ε/2 (band [{}, {}])",
                SCALING_BAND.0, SCALING_BAND.1
            ),
        ),
        Err(e) => PropertyResult::errored(NAME, e),
    }
}

/// Relative Frobenius error of the M-step after feeding i.i.d. momenta with
/// a known covariance; the inverse mass should approach its inverse.
pub fn m_step_oracle<R: Rng>(rng: &mut R) -> massmc::Result<f64> {
    let sigma = SpdMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]])?;
    let target = sigma.inverse()?;
    let mut state = MassState::identity(2);
    for _ in 0..M_STEP_COUNT {
        let batch = (0..M_STEP_BATCH)
            .map(|_| sigma.sample_zero_mean_gaussian(rng))
            .collect::<massmc::Result<Vec<_>>>()?;
        state.m_step(&batch, None)?;
    }
    Ok(state.m_inv().frobenius_distance(&target) / target.frobenius_norm())
}

fn m_step<R: Rng>(rng: &mut R) -> PropertyResult {
    const NAME: &str = "m-step-convergence";
    match m_step_oracle(rng) {
        Ok(err) => PropertyResult::from_value(
            NAME,
            err,
            err < M_STEP_TOLERANCE,
            format!("relative Frobenius error {err:.4} after {M_STEP_COUNT} M-steps (tolerance {M_STEP_TOLERANCE})"),
        ),
        Err(e) => PropertyResult::errored(NAME, e),
    }
}

fn np_stability(model: &dyn TargetModel, cfg: &ExperimentConfig) -> PropertyResult {
    const NAME: &str = "np-stability";
    let mut np = cfg.clone();
    if !np.sampler.is_np() {
        np.sampler = SamplerName::SgNphmc;
    }
    np.step_size = cfg.np_check_step_size.unwrap_or(cfg.step_size);
    np.epochs = cfg.np_check_epochs;
    let mut rng = stream_rng(cfg.seed, CHAIN_STREAM);
    let theta0 = vec![0.0; model.dim()];
    match mcem_loop(model, &theta0, &np.loop_spec(model.dim()), &mut rng) {
        Ok(trace) => match trace.failure {
            None => PropertyResult::from_value(
                NAME,
                trace.records.len() as f64,
                true,
                format!("{} epochs at ε={:e} without divergence", trace.records.len(), np.step_size),
            ),
            Some(f) => PropertyResult::from_value(
                NAME,
                f.epoch as f64,
                false,
                format!("diverged at epoch {} with ε={:e}: {}", f.epoch, np.step_size, f.message),
            ),
        },
        Err(e) => PropertyResult::errored(NAME, e),
    }
}

/// Runs every property on the configured model. The Nosé–Poincaré stability
/// run is included when the sampler is a Nosé–Poincaré kind or a check step
/// size is given.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<Vec<PropertyResult>, CliError> {
    let built = build_model(cfg)?;
    let corrupted;
    let model: &dyn TargetModel = if cfg.corrupt_gradient {
        corrupted = CorruptGradient(built.model.as_ref());
        &corrupted
    } else {
        built.model.as_ref()
    };
    let mut rng = stream_rng(cfg.seed, CHAIN_STREAM);
    let mut results = vec![
        gradient(model, cfg),
        reversibility(model, cfg, &mut rng),
        energy_scaling(model, cfg, &mut rng),
        m_step(&mut rng),
    ];
    if cfg.sampler.is_np() || cfg.np_check_step_size.is_some() {
        results.push(np_stability(model, cfg));
    }
    Ok(results)
}

/// `check` subcommand: prints one line per property and fails if any did.
pub fn check(cfg: &ExperimentConfig) -> Result<Vec<PropertyResult>, CliError> {
    let results = run_checks(cfg)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::PropertyFailure(format!("properties failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig { n_data: 500, scaling_trials: 20, ..ExperimentConfig::default() }
    }

    #[test]
    fn default_gaussian_passes() {
        let results = run_checks(&cfg()).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn corrupted_gradient_fails_only_gradient_check() {
        let results = run_checks(&ExperimentConfig { corrupt_gradient: true, ..cfg() }).unwrap();
        assert!(!results[0].passed);
        assert!(matches!(
            check(&ExperimentConfig { corrupt_gradient: true, ..cfg() }),
            Err(CliError::PropertyFailure(_))
        ));
    }

    #[test]
    fn np_blowup_is_reported() {
        let c = ExperimentConfig { sampler: SamplerName::SgNphmc, np_check_step_size: Some(1.0), ..cfg() };
        let results = run_checks(&c).unwrap();
        let np = results.iter().find(|r| r.name == "np-stability").unwrap();
        assert!(!np.passed);
        assert!(np.detail.contains("diverged"), "{}", np.detail);
    }

    #[test]
    fn lr_model_passes_structural_checks() {
        let c = ExperimentConfig { model: crate::config::ModelName::BayesLrSynthetic, ..cfg() };
        let results = run_checks(&c).unwrap();
        assert!(results[0].passed && results[1].passed && results[3].passed, "{results:?}");
    }
}
