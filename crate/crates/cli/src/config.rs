//! Experiment configuration: TOML file with `[run]`, `[model]`, `[dynamics]`,
//! `[mcem]` and `[check]` sections whose keys share one flat namespace, so any
//! key can be overridden from the command line as `--key value`.

use std::path::{Path, PathBuf};

use massmc::dynamics::{HmcConfig, NpConfig, SghmcConfig, SgnhtConfig};
use massmc::mcem::{Kernel, LoopSpec, McemConfig, OffsetPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SECTIONS: [&str; 5] = ["run", "model", "dynamics", "mcem", "check"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerName {
    Hmc,
    HmcEm,
    Sghmc,
    SghmcEm,
    Sgnht,
    SgnhtEm,
    SgNphmc,
    SgNphmcEm,
}

impl SamplerName {
    pub const ALL: [SamplerName; 8] = [
        SamplerName::Hmc,
        SamplerName::HmcEm,
        SamplerName::Sghmc,
        SamplerName::SghmcEm,
        SamplerName::Sgnht,
        SamplerName::SgnhtEm,
        SamplerName::SgNphmc,
        SamplerName::SgNphmcEm,
    ];

    pub fn is_em(self) -> bool {
        matches!(self, SamplerName::HmcEm | SamplerName::SghmcEm | SamplerName::SgnhtEm | SamplerName::SgNphmcEm)
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, SamplerName::Hmc | SamplerName::HmcEm)
    }

    pub fn is_np(self) -> bool {
        matches!(self, SamplerName::SgNphmc | SamplerName::SgNphmcEm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerName::Hmc => "hmc",
            SamplerName::HmcEm => "hmc-em",
            SamplerName::Sghmc => "sghmc",
            SamplerName::SghmcEm => "sghmc-em",
            SamplerName::Sgnht => "sgnht",
            SamplerName::SgnhtEm => "sgnht-em",
            SamplerName::SgNphmc => "sg-nphmc",
            SamplerName::SgNphmcEm => "sg-nphmc-em",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CliError::Validation(format!("unknown sampler {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    GaussianNw,
    BayesLrSynthetic,
    BayesLrCsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Per-sample RMSE against the generating values.
    Rmse,
    /// Absolute error of the post-burn-in mean.
    PosteriorMeanError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // [run]
    pub sampler: SamplerName,
    pub epochs: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub timing: bool,
    pub metric: Metric,

    // [model]
    pub model: ModelName,
    pub n_data: usize,
    pub data_path: Option<PathBuf>,
    pub label_column: Option<usize>,
    pub standardize: bool,
    pub prior_variance: f64,

    // [dynamics]
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub batch_size: usize,
    pub friction: f64,
    pub noise_estimate: f64,
    pub diffusion: f64,
    pub mu_th: f64,
    pub xi_bar: Option<f64>,
    pub q_mass: f64,
    pub g: Option<f64>,
    pub kt: f64,
    pub h0: Option<f64>,
    pub a_noise: f64,
    pub b_noise: f64,

    // [mcem]
    pub s_init: usize,
    pub s_i: usize,
    pub nu: f64,
    pub d: f64,
    pub offset_stride: Option<usize>,
    pub alpha: f64,
    pub kappa_c: f64,
    pub kappa_t0: f64,
    pub ridge: Option<f64>,
    pub adapt_q: bool,

    // [check]
    pub grad_h: f64,
    pub grad_tolerance: f64,
    pub reversibility_steps: usize,
    pub reversibility_tolerance: f64,
    pub scaling_step_size: Option<f64>,
    pub scaling_trials: usize,
    pub np_check_step_size: Option<f64>,
    pub np_check_epochs: usize,
    pub corrupt_gradient: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerName::HmcEm,
            epochs: 10_000,
            burn_in: 5_000,
            seed: 1,
            output_dir: PathBuf::from("out"),
            timing: false,
            metric: Metric::Rmse,

            model: ModelName::GaussianNw,
            n_data: 5_000,
            data_path: None,
            label_column: None,
            standardize: false,
            prior_variance: 10.0,

            step_size: 1e-2,
            leapfrog_steps: 10,
            batch_size: 100,
            friction: 10.0,
            noise_estimate: 0.0,
            diffusion: 1.0,
            mu_th: 1.0,
            xi_bar: None,
            q_mass: 1.0,
            g: None,
            kt: 1.0,
            h0: None,
            a_noise: 0.01,
            b_noise: 0.01,

            s_init: 100,
            s_i: 10,
            nu: 1.0,
            d: 2.0,
            offset_stride: None,
            alpha: 0.05,
            kappa_c: 1.0,
            kappa_t0: 0.0,
            ridge: None,
            adapt_q: true,

            grad_h: 1e-5,
            grad_tolerance: 1e-5,
            reversibility_steps: 50,
            reversibility_tolerance: 1e-8,
            scaling_step_size: None,
            scaling_trials: 100,
            np_check_step_size: None,
            np_check_epochs: 200,
            corrupt_gradient: false,
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Merges the sections of a parsed TOML document into one flat table.
fn flatten(doc: toml::Table) -> Result<toml::Table, CliError> {
    let mut flat = toml::Table::new();
    for (key, value) in doc {
        match value {
            toml::Value::Table(section) if SECTIONS.contains(&key.as_str()) => {
                for (k, v) in section {
                    if flat.insert(k.clone(), v).is_some() {
                        return Err(validation(format!("key {k:?} appears in more than one section")));
                    }
                }
            }
            toml::Value::Table(_) => return Err(validation(format!("unknown section [{key}]"))),
            other => {
                if flat.insert(key.clone(), other).is_some() {
                    return Err(validation(format!("key {key:?} appears in more than one section")));
                }
            }
        }
    }
    Ok(flat)
}

/// Reads a command-line value as a TOML literal, falling back to a string.
fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let doc: toml::Table = text.parse().map_err(|e| validation(format!("config parse error: {e}")))?;
        Self::from_flat(flatten(doc)?, overrides)
    }

    /// This config with `--key value` overrides applied on top.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let flat = toml::Table::try_from(self).map_err(|e| validation(format!("config does not serialize: {e}")))?;
        Self::from_flat(flat, overrides)
    }

    fn from_flat(mut flat: toml::Table, overrides: &[(String, String)]) -> Result<Self, CliError> {
        for (key, raw) in overrides {
            let key = key.trim_start_matches('-').replace('-', "_");
            let mut value = parse_override(raw);
            // Paths and names stay strings even if they look like numbers.
            if matches!(key.as_str(), "output_dir" | "data_path") {
                value = toml::Value::String(raw.clone());
            }
            flat.insert(key, value);
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(flat).try_into().map_err(|e| validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.epochs == 0 {
            return Err(validation("epochs must be positive"));
        }
        if self.epochs <= self.burn_in {
            return Err(validation(format!("epochs ({}) must exceed burn_in ({})", self.epochs, self.burn_in)));
        }
        if self.leapfrog_steps == 0 {
            return Err(validation("leapfrog_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(validation("batch_size must be positive"));
        }
        match self.model {
            ModelName::BayesLrCsv if self.data_path.is_none() => {
                return Err(validation("model bayes-lr-csv needs data_path"));
            }
            ModelName::GaussianNw | ModelName::BayesLrSynthetic if self.n_data == 0 => {
                return Err(validation("n_data must be positive"));
            }
            _ => {}
        }
        if !(self.prior_variance > 0.0) {
            return Err(validation("prior_variance must be positive"));
        }
        self.kernel(1).validate().map_err(CliError::from)?;
        self.mcem().validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn kernel(&self, dim: usize) -> Kernel {
        let (step_size, steps) = (self.step_size, self.leapfrog_steps);
        match self.sampler {
            SamplerName::Hmc | SamplerName::HmcEm => Kernel::Hmc(HmcConfig { step_size, steps }),
            SamplerName::Sghmc | SamplerName::SghmcEm => Kernel::Sghmc(SghmcConfig {
                step_size,
                steps,
                friction: self.friction,
                noise_estimate: self.noise_estimate,
            }),
            SamplerName::Sgnht | SamplerName::SgnhtEm => {
                let mut c = SgnhtConfig::new(step_size, steps, self.diffusion);
                c.mu_th = self.mu_th;
                c.xi_bar = self.xi_bar.unwrap_or(self.diffusion);
                Kernel::Sgnht(c)
            }
            SamplerName::SgNphmc | SamplerName::SgNphmcEm => {
                let mut c = NpConfig::new(step_size, steps, dim);
                c.q_mass = self.q_mass;
                c.g = self.g.unwrap_or(dim as f64);
                c.kt = self.kt;
                c.h0 = self.h0;
                c.a_noise = self.a_noise;
                c.b_noise = self.b_noise;
                Kernel::Sgnphmc(c)
            }
        }
    }

    pub fn mcem(&self) -> McemConfig {
        McemConfig {
            s_init: self.sampler.is_em().then_some(self.s_init),
            s_i: self.s_i,
            offsets: match self.offset_stride {
                Some(k) => OffsetPolicy::Stride(k),
                None => OffsetPolicy::Poisson { nu: self.nu, d: self.d },
            },
            alpha: self.alpha,
            kappa_c: self.kappa_c,
            kappa_t0: self.kappa_t0,
            ridge: self.ridge,
            adapt_q: self.adapt_q,
        }
    }

    pub fn loop_spec(&self, dim: usize) -> LoopSpec {
        LoopSpec {
            kernel: self.kernel(dim),
            mcem: self.mcem(),
            batch_size: self.sampler.is_stochastic().then_some(self.batch_size),
            epochs: self.epochs,
            timing: self.timing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sections_flatten_and_override() {
        let text = "[run]\nsampler = \"sgnht\"\nepochs = 300\nburn_in = 100\n[dynamics]\nstep_size = 0.001\n";
        let cfg = ExperimentConfig::from_toml_str(text, &ov(&[("--step-size", "0.002"), ("seed", "7")])).unwrap();
        assert_eq!(cfg.sampler, SamplerName::Sgnht);
        assert_eq!(cfg.step_size, 0.002);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 300);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[run]\nbogus = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("[extra]\nseed = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &ov(&[("--nope", "1")])).is_err());
        assert!(ExperimentConfig::from_toml_str("[run]\nseed = 1\n[mcem]\nseed = 2\n", &[]).is_err());
    }

    #[test]
    fn burn_in_must_be_shorter_than_run() {
        let err = ExperimentConfig::from_toml_str("[run]\nepochs = 100\nburn_in = 200\n", &[]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
    }

    #[test]
    fn csv_model_needs_path() {
        assert!(ExperimentConfig::from_toml_str("[model]\nmodel = \"bayes-lr-csv\"\n", &[]).is_err());
    }

    #[test]
    fn string_overrides_for_paths() {
        let cfg = ExperimentConfig::from_toml_str("", &ov(&[("--output-dir", "123")])).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("123"));
        let cfg = ExperimentConfig::from_toml_str("", &ov(&[("--sampler", "sg-nphmc-em")])).unwrap();
        assert_eq!(cfg.sampler, SamplerName::SgNphmcEm);
    }

    #[test]
    fn sampler_names_round_trip() {
        for s in SamplerName::ALL {
            assert_eq!(SamplerName::parse(s.as_str()).unwrap(), s);
        }
        assert!(SamplerName::parse("rhmc").is_err());
    }

    #[test]
    fn overrides_on_top_of_a_config() {
        let base = ExperimentConfig { sampler: SamplerName::Sgnht, xi_bar: Some(2.0), ..ExperimentConfig::default() };
        let cfg = base.with_overrides(&ov(&[("--epochs", "700"), ("burn-in", "100")])).unwrap();
        assert_eq!((cfg.epochs, cfg.burn_in, cfg.sampler, cfg.xi_bar), (700, 100, SamplerName::Sgnht, Some(2.0)));
        assert_eq!(base.with_overrides(&[]).unwrap(), base);
        assert!(base.with_overrides(&ov(&[("--bogus", "1")])).is_err());
    }

    #[test]
    fn mcem_only_for_em_kinds() {
        let mut cfg = ExperimentConfig { sampler: SamplerName::Hmc, ..ExperimentConfig::default() };
        assert_eq!(cfg.mcem().s_init, None);
        cfg.sampler = SamplerName::HmcEm;
        assert_eq!(cfg.mcem().s_init, Some(100));
    }
}
