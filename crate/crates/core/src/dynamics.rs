//! Energy functions and one-epoch transition kernels.
//!
//! Every kernel receives a frozen [`Mass`] snapshot; the MCEM controller swaps
//! in a new snapshot between epochs. Momentum dynamics ascend the joint log
//! likelihood (`ṗ = +∇L(θ)`), so `∇̃L` below is always the (minibatch) gradient
//! of `L`, never of `−L`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{Minibatcher, TargetModel};
use crate::spd::SpdMatrix;

/// Auxiliary thermostat variables carried by some samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thermostat {
    None,
    /// Scalar Nosé–Hoover thermostat `ξ` (SGNHT).
    NoseHoover { xi: f64 },
    /// Nosé–Poincaré time scaling `s > 0` and its conjugate momentum `q`.
    NosePoincare { s: f64, q: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub thermostat: Thermostat,
}

impl PhaseState {
    pub fn new(theta: Vec<f64>, p: Vec<f64>) -> Self {
        Self { theta, p, thermostat: Thermostat::None }
    }

    pub fn with_thermostat(mut self, thermostat: Thermostat) -> Self {
        self.thermostat = thermostat;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn xi(&self) -> Option<f64> {
        match self.thermostat {
            Thermostat::NoseHoover { xi } => Some(xi),
            _ => None,
        }
    }

    pub fn s_q(&self) -> Option<(f64, f64)> {
        match self.thermostat {
            Thermostat::NosePoincare { s, q } => Some((s, q)),
            _ => None,
        }
    }

    pub fn negate_momentum(&mut self) {
        self.p.iter_mut().for_each(|v| *v = -*v);
        if let Thermostat::NosePoincare { q, .. } = &mut self.thermostat {
            *q = -*q;
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.theta.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.theta.len() });
        }
        if self.p.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.p.len() });
        }
        Ok(())
    }
}

/// Inverse mass `M⁻¹` (the stored, updated object) together with the mass `M`
/// used for momentum draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Mass {
    inv: SpdMatrix,
    mass: SpdMatrix,
}

impl Mass {
    pub fn from_inverse(inv: SpdMatrix) -> Result<Self> {
        let mass = inv.inverse()?;
        mass.cholesky()?;
        Ok(Self { inv, mass })
    }

    pub fn identity(dim: usize) -> Self {
        Self { inv: SpdMatrix::identity(dim), mass: SpdMatrix::identity(dim) }
    }

    pub fn inverse(&self) -> &SpdMatrix {
        &self.inv
    }

    pub fn mass(&self) -> &SpdMatrix {
        &self.mass
    }

    pub fn dim(&self) -> usize {
        self.inv.dim()
    }

    /// `M⁻¹·p`
    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        self.inv.mul_vec(p)
    }

    /// `½·pᵀM⁻¹p`
    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * self.inv.quad_form(p)
    }

    /// Draws `p ~ N(0, M)`.
    pub fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.mass.sample_zero_mean_gaussian(rng)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub steps: usize,
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        positive("step size", self.step_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SghmcConfig {
    pub step_size: f64,
    pub steps: usize,
    /// Friction constant `C`.
    pub friction: f64,
    /// Gradient-noise estimate `B̂`; the injected noise variance is `2(C − B̂)ε`.
    pub noise_estimate: f64,
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        positive("step size", self.step_size)?;
        nonnegative("noise estimate", self.noise_estimate)?;
        if self.friction < self.noise_estimate {
            return Err(Error::InvalidConfig(format!(
                "friction {} must be at least the noise estimate {}",
                self.friction, self.noise_estimate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgnhtConfig {
    pub step_size: f64,
    pub steps: usize,
    /// Diffusion constant `A`, also the initial thermostat value.
    pub diffusion: f64,
    /// Thermostat energy weight; diagnostics only.
    pub mu_th: f64,
    /// Thermostat energy centre; diagnostics only.
    pub xi_bar: f64,
}

impl SgnhtConfig {
    pub fn new(step_size: f64, steps: usize, diffusion: f64) -> Self {
        Self { step_size, steps, diffusion, mu_th: 1.0, xi_bar: diffusion }
    }

    pub fn validate(&self) -> Result<()> {
        positive("step size", self.step_size)?;
        positive("diffusion", self.diffusion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpConfig {
    pub step_size: f64,
    pub steps: usize,
    /// Thermostat mass `Q`.
    pub q_mass: f64,
    /// Degrees-of-freedom constant `g`.
    pub g: f64,
    pub kt: f64,
    /// Energy offset `H₀`; `None` until resolved against a starting state.
    pub h0: Option<f64>,
    pub a_noise: f64,
    pub b_noise: f64,
}

impl NpConfig {
    /// Defaults `g = D`, `kT = 1`, `Q = 1`, no noise terms, unresolved `H₀`.
    pub fn new(step_size: f64, steps: usize, dim: usize) -> Self {
        Self { step_size, steps, q_mass: 1.0, g: dim as f64, kt: 1.0, h0: None, a_noise: 0.0, b_noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        positive("step size", self.step_size)?;
        positive("thermostat mass Q", self.q_mass)?;
        positive("kT", self.kt)?;
        nonnegative("A noise", self.a_noise)?;
        nonnegative("B noise", self.b_noise)
    }

    fn h0(&self) -> Result<f64> {
        self.h0.ok_or_else(|| Error::InvalidConfig("Nosé-Poincaré energy offset H0 is unresolved".into()))
    }

    /// Fixes `H₀` so that the Nosé–Poincaré energy of `state` is zero.
    pub fn resolve_h0(mut self, state: &PhaseState, model: &dyn TargetModel, mass: &Mass) -> Result<Self> {
        let (s, q) = np_vars(state)?;
        let energy = -model.log_lik(&state.theta)? + mass.kinetic(&state.p) / (s * s)
            + q * q / (2.0 * self.q_mass)
            + self.g * self.kt * s.ln();
        self.h0 = Some(energy);
        Ok(self)
    }
}

fn np_vars(state: &PhaseState) -> Result<(f64, f64)> {
    let (s, q) = state
        .s_q()
        .ok_or_else(|| Error::InvalidConfig("state has no Nosé-Poincaré thermostat".into()))?;
    if !(s > 0.0) {
        return Err(Error::ThermostatBlowup(format!("time scaling s = {s} is not positive")));
    }
    Ok((s, q))
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what))
    }
}

/// `H(θ, p) = −L(θ) + ½pᵀM⁻¹p`
pub fn gibbs_energy(state: &PhaseState, model: &dyn TargetModel, mass: &Mass) -> Result<f64> {
    state.validate(model.dim())?;
    let h = -model.log_lik(&state.theta)? + mass.kinetic(&state.p);
    if h.is_finite() {
        Ok(h)
    } else {
        Err(Error::NonFiniteValue("Gibbs energy"))
    }
}

/// Störmer–Verlet integration for `cfg.steps` steps. Returns the end state and
/// the energy change `H(end) − H(start)`.
pub fn leapfrog_trajectory(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &HmcConfig,
) -> Result<(PhaseState, f64)> {
    let h_start = gibbs_energy(state, model, mass)?;
    let eps = cfg.step_size;
    let mut theta = state.theta.clone();
    let mut p = state.p.clone();
    let mut grad = model.grad_log_lik(&theta)?;
    for _ in 0..cfg.steps {
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * gi;
        }
        let v = mass.velocity(&p);
        for (ti, vi) in theta.iter_mut().zip(&v) {
            *ti += eps * vi;
        }
        grad = model.grad_log_lik(&theta)?;
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * gi;
        }
    }
    check_finite(&p, "leapfrog momentum")?;
    let end = PhaseState { theta, p, thermostat: state.thermostat };
    let h_end = gibbs_energy(&end, model, mass)?;
    Ok((end, h_end - h_start))
}

/// Metropolis–Hastings test: accept with probability `min(1, exp(−ΔH))`.
/// Always consumes one uniform draw; a NaN energy change is rejected.
pub fn mh_accept<R: Rng + ?Sized>(delta_h: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    if delta_h.is_nan() {
        return false;
    }
    u < (-delta_h).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub state: PhaseState,
    /// Metropolis decision for kernels that apply one.
    pub accepted: Option<bool>,
}

/// One HMC epoch: fresh momentum from `N(0, M)`, a leapfrog trajectory and a
/// Metropolis correction. A rejected (or numerically divergent) proposal keeps
/// the old position together with the freshly drawn momentum.
pub fn hmc_em_epoch<R: Rng + ?Sized>(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &HmcConfig,
    rng: &mut R,
) -> Result<EpochOutcome> {
    cfg.validate()?;
    let p = mass.sample_momentum(rng)?;
    let start = PhaseState { theta: state.theta.clone(), p, thermostat: state.thermostat };
    let proposal = match leapfrog_trajectory(&start, model, mass, cfg) {
        Ok(r) => Some(r),
        Err(Error::NonFiniteValue(_)) => None,
        Err(e) => return Err(e),
    };
    let (next, delta_h) = match proposal {
        Some((s, dh)) => (Some(s), dh),
        None => (None, f64::NAN),
    };
    let accepted = mh_accept(delta_h, rng);
    let state = match (accepted, next) {
        (true, Some(s)) => s,
        _ => start,
    };
    Ok(EpochOutcome { state, accepted: Some(accepted) })
}

fn standard_normal_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// SGHMC inner path from `start` (no momentum refresh); one state per step.
pub fn sghmc_trajectory<R: Rng + ?Sized>(
    start: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &SghmcConfig,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<Vec<PhaseState>> {
    cfg.validate()?;
    start.validate(model.dim())?;
    let eps = cfg.step_size;
    let noise_sd = (2.0 * (cfg.friction - cfg.noise_estimate) * eps).sqrt();
    let mut theta = start.theta.clone();
    let mut p = start.p.clone();
    let mut path = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = batcher.draw(rng);
        let grad = model.batch_grad_log_lik(&theta, batch.as_deref())?;
        let drag = mass.velocity(&p);
        for ((pi, gi), di) in p.iter_mut().zip(&grad).zip(&drag) {
            *pi += -eps * cfg.friction * di + eps * gi;
        }
        if noise_sd > 0.0 {
            for (pi, z) in p.iter_mut().zip(standard_normal_vec(theta.len(), rng)) {
                *pi += noise_sd * z;
            }
        }
        let v = mass.velocity(&p);
        for (ti, vi) in theta.iter_mut().zip(&v) {
            *ti += eps * vi;
        }
        check_finite(&theta, "SGHMC position")?;
        path.push(PhaseState { theta: theta.clone(), p: p.clone(), thermostat: start.thermostat });
    }
    Ok(path)
}

/// One SGHMC epoch: momentum refresh from `N(0, M)` followed by the
/// friction-corrected stochastic path; no Metropolis step.
pub fn sghmc_epoch<R: Rng + ?Sized>(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &SghmcConfig,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<EpochOutcome> {
    let p = mass.sample_momentum(rng)?;
    let start = PhaseState { theta: state.theta.clone(), p, thermostat: state.thermostat };
    let path = sghmc_trajectory(&start, model, mass, cfg, batcher, rng)?;
    Ok(EpochOutcome { state: path.into_iter().last().unwrap_or(start), accepted: None })
}

/// Thermostat update `ξ + ε·(pᵀM⁻¹p / D − 1)`.
pub fn sgnht_xi_update(xi: f64, p: &[f64], mass: &Mass, step_size: f64) -> f64 {
    let d = p.len() as f64;
    xi + step_size * (mass.inverse().quad_form(p) / d - 1.0)
}

/// One SGNHT epoch (no momentum refresh).
pub fn sgnht_epoch<R: Rng + ?Sized>(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &SgnhtConfig,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<EpochOutcome> {
    cfg.validate()?;
    state.validate(model.dim())?;
    let mut xi = state
        .xi()
        .ok_or_else(|| Error::InvalidConfig("SGNHT state needs a thermostat value".into()))?;
    let eps = cfg.step_size;
    let noise_sd = (2.0 * cfg.diffusion * eps).sqrt();
    let mut theta = state.theta.clone();
    let mut p = state.p.clone();
    for _ in 0..cfg.steps {
        let batch = batcher.draw(rng);
        let grad = model.batch_grad_log_lik(&theta, batch.as_deref())?;
        let drag = mass.velocity(&p);
        let z = standard_normal_vec(theta.len(), rng);
        for (((pi, gi), di), zi) in p.iter_mut().zip(&grad).zip(&drag).zip(&z) {
            *pi += -eps * xi * di + eps * gi + noise_sd * zi;
        }
        let v = mass.velocity(&p);
        for (ti, vi) in theta.iter_mut().zip(&v) {
            *ti += eps * vi;
        }
        xi = sgnht_xi_update(xi, &p, mass, eps);
        check_finite(&theta, "SGNHT position")?;
        if !xi.is_finite() {
            return Err(Error::NonFiniteValue("SGNHT thermostat"));
        }
    }
    Ok(EpochOutcome { state: PhaseState { theta, p, thermostat: Thermostat::NoseHoover { xi } }, accepted: None })
}

/// Diagnostic energy `−L + ½pᵀM⁻¹p − ½log|M⁻¹| + μ(ξ − ξ̄)²/2`.
pub fn sgnht_energy(state: &PhaseState, model: &dyn TargetModel, mass: &Mass, cfg: &SgnhtConfig) -> Result<f64> {
    let xi = state
        .xi()
        .ok_or_else(|| Error::InvalidConfig("SGNHT state needs a thermostat value".into()))?;
    let h = gibbs_energy(state, model, mass)? - 0.5 * mass.inverse().log_det()?
        + 0.5 * cfg.mu_th * (xi - cfg.xi_bar).powi(2);
    if h.is_finite() {
        Ok(h)
    } else {
        Err(Error::NonFiniteValue("SGNHT energy"))
    }
}

/// `H_NP = s·[−L(θ) + ½(p/s)ᵀM⁻¹(p/s) + q²/2Q + gkT·log s − H₀]`
pub fn np_energy(state: &PhaseState, model: &dyn TargetModel, mass: &Mass, cfg: &NpConfig) -> Result<f64> {
    state.validate(model.dim())?;
    let (s, q) = np_vars(state)?;
    let h0 = cfg.h0()?;
    let scaled: Vec<f64> = state.p.iter().map(|v| v / s).collect();
    let inner = -model.log_lik(&state.theta)? + mass.kinetic(&scaled) + q * q / (2.0 * cfg.q_mass)
        + cfg.g * cfg.kt * s.ln()
        - h0;
    let h = s * inner;
    if h.is_finite() {
        Ok(h)
    } else {
        Err(Error::NonFiniteValue("Nosé-Poincaré energy"))
    }
}

/// One generalized-leapfrog step of the stochastic Nosé–Poincaré dynamics,
/// with likelihood terms evaluated on `batch` (`None` = full data).
pub fn np_step(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &NpConfig,
    batch: Option<&[usize]>,
) -> Result<PhaseState> {
    state.validate(model.dim())?;
    let (s, q) = np_vars(state)?;
    let h0 = cfg.h0()?;
    let eps = cfg.step_size;
    let qm = cfg.q_mass;
    let gkt = cfg.g * cfg.kt;

    // p half-step, implicit in the friction term only.
    let grad = model.batch_grad_log_lik(&state.theta, batch)?;
    let rhs: Vec<f64> = state.p.iter().zip(&grad).map(|(p, g)| p + 0.5 * eps * s * g).collect();
    let p_half = if cfg.b_noise > 0.0 {
        let c = eps * cfg.b_noise / (2.0 * s.sqrt());
        mass.inverse().scaled(c)?.add_scaled_identity(1.0)?.solve(&rhs)?
    } else {
        rhs
    };

    // q half-step: (ε/4Q)q'² + βq' − c = 0, root continuous with q' → c.
    let lik = model.batch_log_lik(&state.theta, batch)?;
    let kin_s = mass.kinetic(&p_half) / (s * s);
    let c = q + 0.5 * eps * (-gkt * (1.0 + s.ln()) + kin_s + lik + h0);
    let beta = 1.0 + cfg.a_noise * s * eps / (2.0 * qm);
    let disc = beta * beta + (eps / qm) * c;
    if !(disc >= 0.0) {
        return Err(Error::ThermostatBlowup(format!("negative discriminant {disc:e} in thermostat momentum update")));
    }
    let q_half = 2.0 * c / (beta + disc.sqrt());

    // s full-step (trapezoidal).
    let r = eps * q_half / (2.0 * qm);
    if !(r < 1.0) {
        return Err(Error::ThermostatBlowup(format!("time-scaling update singular (εq/2Q = {r})")));
    }
    let s_new = s * (1.0 + r) / (1.0 - r);
    if !(s_new > 0.0) || !s_new.is_finite() {
        return Err(Error::ThermostatBlowup(format!("time scaling became {s_new}")));
    }

    // θ full-step.
    let v = mass.velocity(&p_half);
    let w = 0.5 * eps * (1.0 / s + 1.0 / s_new);
    let theta: Vec<f64> = state.theta.iter().zip(&v).map(|(t, vi)| t + w * vi).collect();
    check_finite(&theta, "Nosé-Poincaré position")?;

    // Explicit closing half-steps.
    let grad_new = model.batch_grad_log_lik(&theta, batch)?;
    let drag = mass.velocity(&p_half);
    let friction = cfg.b_noise / s_new.sqrt();
    let p: Vec<f64> = p_half
        .iter()
        .zip(&grad_new)
        .zip(&drag)
        .map(|((ph, g), d)| ph + 0.5 * eps * (s_new * g - friction * d))
        .collect();
    let lik_new = model.batch_log_lik(&theta, batch)?;
    let kin_new = mass.kinetic(&p_half) / (s_new * s_new);
    let q_new = q_half
        + 0.5 * eps
            * (h0 + lik_new - gkt * (1.0 + s_new.ln()) + kin_new
                - cfg.a_noise * s_new * q_half / qm
                - q_half * q_half / (2.0 * qm));
    check_finite(&p, "Nosé-Poincaré momentum")?;
    if !q_new.is_finite() {
        return Err(Error::NonFiniteValue("Nosé-Poincaré thermostat momentum"));
    }
    Ok(PhaseState { theta, p, thermostat: Thermostat::NosePoincare { s: s_new, q: q_new } })
}

/// `cfg.steps` Nosé–Poincaré steps from `start` without momentum refresh, a
/// fresh minibatch per step.
pub fn np_trajectory<R: Rng + ?Sized>(
    start: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &NpConfig,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<PhaseState> {
    cfg.validate()?;
    let mut state = start.clone();
    for _ in 0..cfg.steps {
        let batch = batcher.draw(rng);
        state = np_step(&state, model, mass, cfg, batch.as_deref())?;
    }
    Ok(state)
}

/// One SG-NPHMC epoch: refresh `p ~ N(0, M)` and `q ~ N(0, Q)`, keep `s`, then
/// run the stochastic Nosé–Poincaré trajectory.
pub fn sgnphmc_epoch<R: Rng + ?Sized>(
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    cfg: &NpConfig,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<EpochOutcome> {
    cfg.validate()?;
    let (s, _) = np_vars(state)?;
    let p = mass.sample_momentum(rng)?;
    let q = cfg.q_mass.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let start = PhaseState { theta: state.theta.clone(), p, thermostat: Thermostat::NosePoincare { s, q } };
    let state = np_trajectory(&start, model, mass, cfg, batcher, rng)?;
    Ok(EpochOutcome { state, accepted: None })
}
