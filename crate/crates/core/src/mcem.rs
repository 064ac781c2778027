//! Monte Carlo EM controller: momentum buffering, the online inverse-mass
//! M-step and adaptive E-step sample sizes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diagnostics::TraceRecord;
use crate::dynamics::{
    gibbs_energy, hmc_em_epoch, np_energy, sghmc_epoch, sgnht_energy, sgnphmc_epoch, sgnht_epoch, EpochOutcome,
    HmcConfig, Mass, NpConfig, PhaseState, SghmcConfig, SgnhtConfig, Thermostat,
};
use crate::error::{Error, Result};
use crate::models::{Minibatcher, TargetModel};
use crate::seeding::ChainRng;
use crate::spd::{default_ridge, empirical_covariance, SpdMatrix};

/// Step size `κ_c / (k + κ_t0)` of the `k`-th M-step, capped at 1.
pub fn kappa(k: usize, kappa_c: f64, kappa_t0: f64) -> f64 {
    (kappa_c / (k as f64 + kappa_t0)).min(1.0)
}

/// Current inverse mass and the M-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct MassState {
    m_inv: SpdMatrix,
    k: usize,
    kappa_c: f64,
    kappa_t0: f64,
}

impl MassState {
    pub fn new(m_inv: SpdMatrix, kappa_c: f64, kappa_t0: f64) -> Result<Self> {
        if !(kappa_c > 0.0) || !(kappa_t0 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step schedule needs kappa_c > 0 and kappa_t0 >= 0, got {kappa_c}, {kappa_t0}"
            )));
        }
        m_inv.cholesky()?;
        Ok(Self { m_inv, k: 0, kappa_c, kappa_t0 })
    }

    pub fn identity(dim: usize) -> Self {
        Self { m_inv: SpdMatrix::identity(dim), k: 0, kappa_c: 1.0, kappa_t0: 0.0 }
    }

    pub fn m_inv(&self) -> &SpdMatrix {
        &self.m_inv
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Blends in the inverse empirical covariance of `buffer`. The ridge
    /// defaults to `1e-6·trace/D` of the unregularized covariance.
    pub fn m_step(&mut self, buffer: &[Vec<f64>], ridge: Option<f64>) -> Result<()> {
        let ridge = ridge.unwrap_or_else(|| default_ridge(buffer));
        let estimate = empirical_covariance(buffer, ridge)?.inverse()?;
        let weight = kappa(self.k + 1, self.kappa_c, self.kappa_t0);
        let blended = self.m_inv.blend(&estimate, weight)?;
        blended.cholesky()?;
        self.m_inv = blended;
        self.k += 1;
        Ok(())
    }
}

/// Offsets `t_s = Σᵢ xᵢ` with `xᵢ − 1 ~ Poisson(ν·iᵈ)`.
pub fn poisson_offsets<R: Rng + ?Sized>(count: usize, nu: f64, d: f64, rng: &mut R) -> Result<Vec<usize>> {
    let mut gaps = PoissonGaps::new(nu, d)?;
    Ok((0..count).map(|_| gaps.next_offset(rng)).collect())
}

struct PoissonGaps {
    nu: f64,
    d: f64,
    i: usize,
    t: usize,
}

impl PoissonGaps {
    fn new(nu: f64, d: f64) -> Result<Self> {
        if !(nu >= 1.0) || !(d > 0.0) || !nu.is_finite() || !d.is_finite() {
            return Err(Error::InvalidConfig(format!("offset constants need nu >= 1 and d > 0, got {nu}, {d}")));
        }
        Ok(Self { nu, d, i: 0, t: 0 })
    }

    fn next_offset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        self.i += 1;
        let rate = self.nu * (self.i as f64).powf(self.d);
        let extra = Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(f64::MAX);
        self.t = self.t.saturating_add(1).saturating_add(extra.min(usize::MAX as f64 / 4.0) as usize);
        self.t
    }
}

/// Where test-function evaluations fall within an E-step cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetPolicy {
    Poisson { nu: f64, d: f64 },
    Stride(usize),
}

impl OffsetPolicy {
    fn validate(&self) -> Result<()> {
        match *self {
            OffsetPolicy::Poisson { nu, d } => PoissonGaps::new(nu, d).map(|_| ()),
            OffsetPolicy::Stride(0) => Err(Error::InvalidConfig("offset stride must be positive".into())),
            OffsetPolicy::Stride(_) => Ok(()),
        }
    }

    /// 1-based positions within a cycle of `len` epochs.
    fn cycle_offsets<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        match *self {
            OffsetPolicy::Poisson { nu, d } => {
                let mut gaps = PoissonGaps::new(nu, d)?;
                let mut out = Vec::new();
                loop {
                    let t = gaps.next_offset(rng);
                    if t > len {
                        return Ok(out);
                    }
                    out.push(t);
                }
            }
            OffsetPolicy::Stride(k) => Ok((1..=len / k).map(|i| i * k).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Hmc,
    Sghmc,
    Sgnht,
    Sgnphmc,
}

fn thermostat_missing(kind: SamplerKind) -> Error {
    Error::InvalidConfig(format!("{kind:?} test function needs its thermostat variables"))
}

/// Test function for the interval check; gradients use the full dataset.
///
/// HMC and SGHMC: `[M⁻¹p, ∇L]`. SGNHT: `[M⁻¹p, ∇L + ξM⁻¹p, pᵀM⁻¹p]`.
/// SG-NPHMC: `[M⁻¹(p/s), ∇L]`.
pub fn test_function(kind: SamplerKind, state: &PhaseState, model: &dyn TargetModel, m_inv: &SpdMatrix) -> Result<Vec<f64>> {
    let grad = model.grad_log_lik(&state.theta)?;
    let out = match kind {
        SamplerKind::Hmc | SamplerKind::Sghmc => {
            let mut v = m_inv.mul_vec(&state.p);
            v.extend_from_slice(&grad);
            v
        }
        SamplerKind::Sgnht => {
            let xi = state.xi().ok_or_else(|| thermostat_missing(kind))?;
            let mp = m_inv.mul_vec(&state.p);
            let kinetic: f64 = mp.iter().zip(&state.p).map(|(a, b)| a * b).sum();
            let mut v = mp.clone();
            v.extend(grad.iter().zip(&mp).map(|(g, m)| g + xi * m));
            v.push(kinetic);
            v
        }
        SamplerKind::Sgnphmc => {
            let (s, _) = state.s_q().ok_or_else(|| thermostat_missing(kind))?;
            let scaled: Vec<f64> = state.p.iter().map(|v| v / s).collect();
            let mut v = m_inv.mul_vec(&scaled);
            v.extend_from_slice(&grad);
            v
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("test function"));
    }
    Ok(out)
}

/// Two-sided standard-normal critical value `Φ⁻¹(1 − α/2)`.
pub fn z_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("interval level alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Componentwise `m_S ± z·v_S` with `v_S` the (biased) sample variance.
pub fn confidence_interval(values: &[Vec<f64>], alpha: f64) -> Result<Vec<(f64, f64)>> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: values.len() });
    }
    let z = z_critical(alpha)?;
    let dim = values[0].len();
    let n = values.len() as f64;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for v in values {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
            }
            sum += v[j];
            sum_sq += v[j] * v[j];
        }
        let m = sum / n;
        let var = (sum_sq / n - m * m).max(0.0);
        out.push((m - z * var, m + z * var));
    }
    Ok(out)
}

/// E-step sample size and the most recent confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSizeState {
    pub s: usize,
    pub s_i: usize,
    pub last_interval: Option<Vec<(f64, f64)>>,
}

impl SampleSizeState {
    pub fn new(s: usize, s_i: usize) -> Result<Self> {
        if s < 2 {
            return Err(Error::InvalidConfig(format!("initial sample count must be at least 2, got {s}")));
        }
        if s_i == 0 {
            return Err(Error::InvalidConfig("growth divisor S_I must be positive".into()));
        }
        Ok(Self { s, s_i, last_interval: None })
    }

    /// Grows `S` by `max(1, ⌊S/S_I⌋)` when every component of `q_new` lies in
    /// the last interval. Returns whether it grew.
    pub fn maybe_grow(&mut self, q_new: &[f64]) -> bool {
        let Some(interval) = &self.last_interval else {
            return false;
        };
        let inside = interval.len() == q_new.len()
            && interval.iter().zip(q_new).all(|((lo, hi), v)| *lo <= *v && *v <= *hi);
        if inside {
            self.s = self.s.saturating_add((self.s / self.s_i).max(1));
        }
        inside
    }
}

/// Transition kernel and its configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Hmc(HmcConfig),
    Sghmc(SghmcConfig),
    Sgnht(SgnhtConfig),
    Sgnphmc(NpConfig),
}

impl Kernel {
    pub fn kind(&self) -> SamplerKind {
        match self {
            Kernel::Hmc(_) => SamplerKind::Hmc,
            Kernel::Sghmc(_) => SamplerKind::Sghmc,
            Kernel::Sgnht(_) => SamplerKind::Sgnht,
            Kernel::Sgnphmc(_) => SamplerKind::Sgnphmc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Hmc(c) => c.validate(),
            Kernel::Sghmc(c) => c.validate(),
            Kernel::Sgnht(c) => c.validate(),
            Kernel::Sgnphmc(c) => c.validate(),
        }
    }
}

/// Starting phase state: zero momentum, except SGNHT (which never refreshes
/// momentum) draws `p ~ N(0, M)`. Thermostats start at `ξ = A` and `s = 1, q = 0`.
pub fn initial_state<R: Rng + ?Sized>(kernel: &Kernel, theta0: &[f64], mass: &Mass, rng: &mut R) -> Result<PhaseState> {
    let zero = vec![0.0; theta0.len()];
    Ok(match kernel {
        Kernel::Hmc(_) | Kernel::Sghmc(_) => PhaseState::new(theta0.to_vec(), zero),
        Kernel::Sgnht(c) => PhaseState::new(theta0.to_vec(), mass.sample_momentum(rng)?)
            .with_thermostat(Thermostat::NoseHoover { xi: c.diffusion }),
        Kernel::Sgnphmc(_) => {
            PhaseState::new(theta0.to_vec(), zero).with_thermostat(Thermostat::NosePoincare { s: 1.0, q: 0.0 })
        }
    })
}

/// One epoch of whichever kernel is configured.
pub fn sampler_epoch<R: Rng + ?Sized>(
    kernel: &Kernel,
    state: &PhaseState,
    model: &dyn TargetModel,
    mass: &Mass,
    batcher: &Minibatcher,
    rng: &mut R,
) -> Result<EpochOutcome> {
    match kernel {
        Kernel::Hmc(c) => hmc_em_epoch(state, model, mass, c, rng),
        Kernel::Sghmc(c) => sghmc_epoch(state, model, mass, c, batcher, rng),
        Kernel::Sgnht(c) => sgnht_epoch(state, model, mass, c, batcher, rng),
        Kernel::Sgnphmc(c) => sgnphmc_epoch(state, model, mass, c, batcher, rng),
    }
}

/// The energy each kernel preserves, evaluated on the full dataset.
pub fn kernel_energy(kernel: &Kernel, state: &PhaseState, model: &dyn TargetModel, mass: &Mass) -> Result<f64> {
    match kernel {
        Kernel::Hmc(_) | Kernel::Sghmc(_) => gibbs_energy(state, model, mass),
        Kernel::Sgnht(c) => sgnht_energy(state, model, mass, c),
        Kernel::Sgnphmc(c) => np_energy(state, model, mass, c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McemConfig {
    /// Initial E-step sample count; `None` never runs an M-step.
    pub s_init: Option<usize>,
    pub s_i: usize,
    pub offsets: OffsetPolicy,
    pub alpha: f64,
    pub kappa_c: f64,
    pub kappa_t0: f64,
    pub ridge: Option<f64>,
    /// Also learn the Nosé–Poincaré thermostat mass `Q` from `q` samples.
    pub adapt_q: bool,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            s_init: Some(100),
            s_i: 10,
            offsets: OffsetPolicy::Poisson { nu: 1.0, d: 2.0 },
            alpha: 0.05,
            kappa_c: 1.0,
            kappa_t0: 0.0,
            ridge: None,
            adapt_q: true,
        }
    }
}

impl McemConfig {
    pub fn disabled() -> Self {
        Self { s_init: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.s_init {
            SampleSizeState::new(s, self.s_i)?;
        }
        self.offsets.validate()?;
        z_critical(self.alpha)?;
        if let Some(r) = self.ridge {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidConfig(format!("ridge must be nonnegative, got {r}")));
            }
        }
        MassState::new(SpdMatrix::identity(1), self.kappa_c, self.kappa_t0).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSpec {
    pub kernel: Kernel,
    pub mcem: McemConfig,
    /// Minibatch size for stochastic kernels; `None` uses the full dataset.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub timing: bool,
}

/// Epoch at which a run stopped and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_m_inv: SpdMatrix,
    pub final_q_mass: Option<f64>,
    pub final_s_count: Option<usize>,
    pub m_steps: usize,
    pub failure: Option<Failure>,
}

const CONTROLLER_STREAM_TAG: u64 = 0x6d63_656d;

/// Offsets are drawn from a sibling stream of the chain generator so the
/// chain itself is unaffected by whether the controller is active.
fn controller_rng(chain: &ChainRng) -> ChainRng {
    let mut rng = ChaCha8Rng::from_seed(chain.get_seed());
    rng.set_stream(chain.get_stream() ^ CONTROLLER_STREAM_TAG);
    rng
}

/// Runs `spec.epochs` sampler epochs from `theta0` under the MCEM controller.
///
/// A thermostat blowup or numerical divergence halts the run; the trace keeps
/// the epochs completed so far and records the failure.
pub fn mcem_loop(model: &dyn TargetModel, theta0: &[f64], spec: &LoopSpec, rng: &mut ChainRng) -> Result<Trace> {
    let dim = model.dim();
    if theta0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: theta0.len() });
    }
    spec.kernel.validate()?;
    spec.mcem.validate()?;
    let kind = spec.kernel.kind();
    let batcher = match spec.batch_size {
        Some(b) if b < model.n_data() => Minibatcher::new(model.n_data(), b),
        _ => Minibatcher::full(model.n_data()),
    };

    let mut ctrl = controller_rng(rng);
    let mut mass_state = MassState::new(SpdMatrix::identity(dim), spec.mcem.kappa_c, spec.mcem.kappa_t0)?;
    let mut mass = Mass::identity(dim);
    let mut kernel = spec.kernel;
    let mut state = initial_state(&kernel, theta0, &mass, rng)?;
    if let Kernel::Sgnphmc(c) = &mut kernel {
        if c.h0.is_none() {
            *c = c.resolve_h0(&state, model, &mass)?;
        }
    }
    let mut q_inv = match kernel {
        Kernel::Sgnphmc(c) => Some(1.0 / c.q_mass),
        _ => None,
    };

    let mut sizes = spec.mcem.s_init.map(|s| SampleSizeState::new(s, spec.mcem.s_i)).transpose()?;
    let mut buffer_p: Vec<Vec<f64>> = Vec::new();
    let mut buffer_q: Vec<Vec<f64>> = Vec::new();
    let mut test_values: Vec<Vec<f64>> = Vec::new();
    let mut offsets = match &sizes {
        Some(s) => spec.mcem.offsets.cycle_offsets(s.s, &mut ctrl)?,
        None => Vec::new(),
    };
    let mut next_offset = 0;
    let mut m_steps = 0;
    let mut records = Vec::with_capacity(spec.epochs);
    let mut failure = None;

    for epoch in 0..spec.epochs {
        let started = spec.timing.then(Instant::now);
        let s_count = sizes.as_ref().map(|s| s.s);
        let step = sampler_epoch(&kernel, &state, model, &mass, &batcher, rng)
            .and_then(|o| kernel_energy(&kernel, &o.state, model, &mass).map(|e| (o, e)));
        let (outcome, energy) = match step {
            Ok(v) => v,
            Err(e @ (Error::ThermostatBlowup(_) | Error::NonFiniteValue(_))) => {
                failure = Some(Failure { epoch, message: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        };
        state = outcome.state;

        // A degenerate M-step on a diverging chain counts as divergence too.
        let controlled = match sizes.as_mut() {
            None => Ok(()),
            Some(sizes) => (|| -> Result<()> {
                buffer_p.push(state.p.clone());
                if let Some((_, q)) = state.s_q() {
                    buffer_q.push(vec![q]);
                }
                let pos = buffer_p.len();
                if offsets.get(next_offset) == Some(&pos) {
                    test_values.push(test_function(kind, &state, model, mass.inverse())?);
                    next_offset += 1;
                }
                if pos >= sizes.s {
                    if test_values.len() >= 2 {
                        sizes.last_interval = Some(confidence_interval(&test_values, spec.mcem.alpha)?);
                    }
                    mass_state.m_step(&buffer_p, spec.mcem.ridge)?;
                    mass = Mass::from_inverse(mass_state.m_inv().clone())?;
                    if let (Kernel::Sgnphmc(c), Some(qi)) = (&mut kernel, q_inv.as_mut()) {
                        if spec.mcem.adapt_q {
                            let var = buffer_q.iter().map(|q| q[0] * q[0]).sum::<f64>() / buffer_q.len() as f64;
                            if var > 0.0 && var.is_finite() {
                                let w = kappa(mass_state.k(), spec.mcem.kappa_c, spec.mcem.kappa_t0);
                                *qi = (1.0 - w) * *qi + w / var;
                                c.q_mass = 1.0 / *qi;
                            }
                        }
                    }
                    m_steps += 1;
                    if sizes.last_interval.is_some() {
                        let q_new = test_function(kind, &state, model, mass.inverse())?;
                        sizes.maybe_grow(&q_new);
                    }
                    buffer_p.clear();
                    buffer_q.clear();
                    test_values.clear();
                    offsets = spec.mcem.offsets.cycle_offsets(sizes.s, &mut ctrl)?;
                    next_offset = 0;
                }
                Ok(())
            })(),
        };
        match controlled {
            Ok(()) => {}
            Err(e @ (Error::ThermostatBlowup(_) | Error::NonFiniteValue(_) | Error::NotPositiveDefinite { .. })) => {
                failure = Some(Failure { epoch, message: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        }

        let epoch_ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        records.push(TraceRecord {
            epoch,
            theta: state.theta.clone(),
            energy,
            s_count,
            accepted: outcome.accepted,
            epoch_ms,
        });
    }

    Ok(Trace {
        records,
        final_m_inv: mass_state.m_inv().clone(),
        final_q_mass: match kernel {
            Kernel::Sgnphmc(c) => Some(c.q_mass),
            _ => None,
        },
        final_s_count: sizes.map(|s| s.s),
        m_steps,
        failure,
    })
}
