//! Single experiment runs and their artifacts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use massmc::diagnostics::{acceptance_rate, mean_epoch_ms, posterior_mean_error, rmse};
use massmc::mcem::{mcem_loop, Trace};
use massmc::models::{
    generate_gaussian_data, generate_mixture_lr_data, load_csv_dataset, BayesLogisticModel, GaussianNormalGammaModel,
    TargetModel, MIXTURE_WEIGHTS,
};
use massmc::seeding::{stream_rng, CHAIN_STREAM};
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, Metric, ModelName};
use crate::CliError;

/// A model together with the generating parameter values, when known.
pub struct BuiltModel {
    pub model: Box<dyn TargetModel>,
    pub truth: Option<Vec<f64>>,
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<BuiltModel, CliError> {
    Ok(match cfg.model {
        ModelName::GaussianNw => BuiltModel {
            model: Box::new(GaussianNormalGammaModel::new(generate_gaussian_data(cfg.n_data, cfg.seed))?),
            truth: Some(vec![0.0, 1.0]),
        },
        ModelName::BayesLrSynthetic => BuiltModel {
            model: Box::new(
                BayesLogisticModel::new(generate_mixture_lr_data(cfg.n_data, cfg.seed))?
                    .with_prior_variance(cfg.prior_variance),
            ),
            truth: Some(MIXTURE_WEIGHTS.to_vec()),
        },
        ModelName::BayesLrCsv => {
            let path = cfg.data_path.as_deref().ok_or_else(|| CliError::Validation("data_path missing".into()))?;
            let mut data = load_csv_dataset(path, cfg.label_column)?;
            if cfg.standardize {
                data.standardize();
            }
            BuiltModel {
                model: Box::new(BayesLogisticModel::new(data)?.with_prior_variance(cfg.prior_variance)),
                truth: None,
            }
        }
    })
}

pub struct RunResult {
    pub trace: Trace,
    pub summary: Value,
    pub names: Vec<String>,
}

/// Runs one experiment in memory. Divergence is reported through the
/// summary's `failed` field rather than as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    cfg.validate()?;
    let built = build_model(cfg)?;
    let model = built.model.as_ref();
    let theta0 = vec![0.0; model.dim()];
    let mut rng = stream_rng(cfg.seed, CHAIN_STREAM);
    let trace = mcem_loop(model, &theta0, &cfg.loop_spec(model.dim()), &mut rng)?;
    let names = model.report_names();
    let summary = summarize(cfg, model, built.truth.as_deref(), &trace)?;
    Ok(RunResult { trace, summary, names })
}

fn summarize(cfg: &ExperimentConfig, model: &dyn TargetModel, truth: Option<&[f64]>, trace: &Trace) -> Result<Value, CliError> {
    let mut s = Map::new();
    s.insert("sampler".into(), json!(cfg.sampler.as_str()));
    s.insert("seed".into(), json!(cfg.seed));
    s.insert("epochs_completed".into(), json!(trace.records.len()));
    s.insert("metric".into(), serde_json::to_value(cfg.metric).expect("metric serializes"));

    let kept: Vec<Vec<f64>> =
        trace.records.iter().skip(cfg.burn_in).map(|r| model.report(&r.theta)).collect();
    let errors = match truth {
        Some(t) if !kept.is_empty() => Some(match cfg.metric {
            Metric::Rmse => rmse(&kept, t)?,
            Metric::PosteriorMeanError => posterior_mean_error(&kept, t)?,
        }),
        _ => None,
    };
    for (i, name) in model.report_names().iter().enumerate() {
        s.insert(format!("rmse_{name}"), json!(errors.as_ref().map(|e| e[i])));
    }
    s.insert("acceptance_rate".into(), json!(acceptance_rate(&trace.records)));
    s.insert("mean_epoch_ms".into(), json!(mean_epoch_ms(&trace.records)));
    s.insert("final_m_inv".into(), json!(trace.final_m_inv.rows()));
    s.insert("final_s_count".into(), json!(trace.final_s_count));
    s.insert("m_steps".into(), json!(trace.m_steps));
    if cfg.sampler.is_np() {
        s.insert("final_q_mass".into(), json!(trace.final_q_mass));
    }
    s.insert("failed".into(), json!(trace.failure.is_some()));
    s.insert(
        "failure".into(),
        trace
            .failure
            .as_ref()
            .map_or(Value::Null, |f| json!({ "epoch": f.epoch, "message": f.message })),
    );
    Ok(Value::Object(s))
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,theta_0..theta_{D−1},energy,s_count,accepted,epoch_ms`
pub fn write_trace_csv(path: &Path, trace: &Trace, dim: usize) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut header = vec!["epoch".to_string()];
    header.extend((0..dim).map(|i| format!("theta_{i}")));
    header.extend(["energy", "s_count", "accepted", "epoch_ms"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for r in &trace.records {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.theta.iter().map(|v| v.to_string()));
        row.push(r.energy.to_string());
        row.push(fmt_opt(r.s_count));
        row.push(fmt_opt(r.accepted.map(u8::from)));
        row.push(fmt_opt(r.epoch_ms));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, result: &RunResult) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let dim = result.trace.final_m_inv.dim();
    write_trace_csv(&dir.join("trace.csv"), &result.trace, dim)?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    write_json(&dir.join("config-echo.json"), &serde_json::to_value(cfg).expect("config serializes"))?;
    Ok(())
}

/// `run` subcommand: sample, write artifacts, and turn divergence into an error.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    let result = run_experiment(cfg)?;
    write_artifacts(&cfg.output_dir, cfg, &result)?;
    if let Some(f) = &result.trace.failure {
        return Err(CliError::Runtime(format!("run diverged at epoch {}: {}", f.epoch, f.message)));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SamplerName;

    fn small(sampler: SamplerName) -> ExperimentConfig {
        ExperimentConfig { sampler, epochs: 60, burn_in: 20, n_data: 300, s_init: 10, ..ExperimentConfig::default() }
    }

    #[test]
    fn gaussian_summary_keys() {
        let r = run_experiment(&small(SamplerName::HmcEm)).unwrap();
        let obj = r.summary.as_object().unwrap();
        for key in ["rmse_mu", "rmse_tau", "acceptance_rate", "mean_epoch_ms", "final_m_inv", "final_s_count", "m_steps", "failed"] {
            assert!(obj.contains_key(key), "{key}");
        }
        assert!(obj["rmse_mu"].as_f64().unwrap() >= 0.0);
        assert!(obj["mean_epoch_ms"].is_null());
        assert!(!obj.contains_key("final_q_mass"));
    }

    #[test]
    fn key_set_is_fixed_per_kind() {
        let a = run_experiment(&small(SamplerName::SgNphmcEm)).unwrap();
        let mut other = small(SamplerName::SgNphmcEm);
        other.seed = 2;
        let b = run_experiment(&other).unwrap();
        let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&a.summary), keys(&b.summary));
        assert!(a.summary["final_q_mass"].is_number());
    }

    #[test]
    fn lr_summary_uses_weight_names() {
        let cfg = ExperimentConfig { model: ModelName::BayesLrSynthetic, ..small(SamplerName::Sgnht) };
        let r = run_experiment(&cfg).unwrap();
        assert!(r.summary["rmse_w0"].is_number() && r.summary["rmse_w1"].is_number());
        assert!(r.summary["acceptance_rate"].is_null());
    }

    #[test]
    fn trace_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(SamplerName::Hmc);
        let r = run_experiment(&cfg).unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &r.trace, 2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,theta_0,theta_1,energy,s_count,accepted,epoch_ms");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 7);
        assert_eq!(first[0], "0");
        assert_eq!(first[4], "");
        assert!(first[5] == "0" || first[5] == "1");
        assert_eq!(text.lines().count(), 61);
        assert!(!text.contains('\r'));
    }
}
