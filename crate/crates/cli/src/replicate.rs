//! Multi-seed replication of the Gaussian and logistic-regression comparison
//! tables, with per-sampler medians and seed-paired ordering checks.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ModelName, SamplerName};
use crate::experiment::{run_experiment, write_artifacts, write_json};
use crate::CliError;

pub const MIN_SEEDS: usize = 3;
/// Step sizes tried for every sampler on the logistic-regression table.
pub const TABLE2_GRID: [f64; 3] = [1e-2, 1e-4, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    Gaussian,
    Logistic,
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::Gaussian => "table1",
            Table::Logistic => "table2",
        }
    }

    /// Preset for one sampler; the seed is filled in per run.
    pub fn preset(self, sampler: SamplerName) -> ExperimentConfig {
        let base = ExperimentConfig { sampler, leapfrog_steps: 10, batch_size: 100, timing: true, ..Default::default() };
        match self {
            Table::Gaussian => ExperimentConfig {
                model: ModelName::GaussianNw,
                n_data: 5_000,
                epochs: 10_000,
                burn_in: 5_000,
                step_size: if sampler.is_stochastic() { 1e-3 } else { 1e-2 },
                friction: 10.0,
                diffusion: 1.0,
                s_init: 100,
                ..base
            },
            Table::Logistic => ExperimentConfig {
                model: ModelName::BayesLrSynthetic,
                n_data: 2_000,
                epochs: 20_000,
                burn_in: 10_000,
                s_init: if sampler.is_np() { 200 } else { 300 },
                ..base
            },
        }
    }

    /// Step sizes to try; an explicit `step_size` override pins a single one.
    fn grid(self, overrides: &[(String, String)]) -> Vec<Option<f64>> {
        let pinned = overrides.iter().any(|(k, _)| k.trim_start_matches('-').replace('-', "_") == "step_size");
        match self {
            Table::Logistic if !pinned => TABLE2_GRID.iter().map(|&e| Some(e)).collect(),
            _ => vec![None],
        }
    }

    /// `(better, worse, coordinate, strict)` pairs compared seed by seed.
    fn orderings(self) -> Vec<(SamplerName, SamplerName, &'static str, bool)> {
        use SamplerName::*;
        match self {
            Table::Gaussian => vec![
                (HmcEm, Hmc, "mu", true),
                (SgnhtEm, Sgnht, "mu", false),
                (SghmcEm, Sghmc, "mu", false),
                (SgNphmcEm, SgNphmc, "mu", false),
            ],
            Table::Logistic => vec![
                (SgnhtEm, Sgnht, "w1", false),
                (HmcEm, Hmc, "w1", false),
                (SghmcEm, Sghmc, "w1", false),
                (SgNphmcEm, SgNphmc, "w1", false),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateOptions {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Samplers to run; empty means all eight.
    pub samplers: Vec<SamplerName>,
    /// Worker threads; `None` lets the pool decide.
    pub jobs: Option<usize>,
    /// `--key value` overrides applied on top of every preset.
    pub overrides: Vec<(String, String)>,
}

/// Outcome of one (sampler, step size, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub sampler: SamplerName,
    pub step_size: f64,
    pub seed: u64,
    pub errors: Vec<(String, f64)>,
    pub ms_per_epoch: Option<f64>,
    pub failure: Option<String>,
}

impl RunOutcome {
    fn error(&self, coord: &str) -> Option<f64> {
        if self.failure.is_some() {
            return None;
        }
        self.errors.iter().find(|(n, _)| n == coord).map(|(_, v)| *v)
    }

    /// Mean error across coordinates, the criterion for picking a step size.
    fn score(&self) -> Option<f64> {
        if self.failure.is_some() || self.errors.is_empty() {
            return None;
        }
        Some(self.errors.iter().map(|(_, v)| v).sum::<f64>() / self.errors.len() as f64)
    }

    fn to_json(&self) -> Value {
        let mut v = json!({
            "seed": self.seed,
            "step_size": self.step_size,
            "ms_per_epoch": self.ms_per_epoch,
            "failed": self.failure.is_some(),
            "failure": self.failure,
        });
        for (name, e) in &self.errors {
            v[format!("rmse_{name}")] = json!(e);
        }
        v
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn run_dir(out: &Path, table: Table, cfg: &ExperimentConfig) -> PathBuf {
    let name = match table {
        Table::Gaussian => format!("{}-seed{}", cfg.sampler.as_str(), cfg.seed),
        Table::Logistic => format!("{}-eps{:e}-seed{}", cfg.sampler.as_str(), cfg.step_size, cfg.seed),
    };
    out.join(name)
}

fn execute(table: Table, cfg: &ExperimentConfig, out: &Path) -> RunOutcome {
    let mut outcome = RunOutcome {
        sampler: cfg.sampler,
        step_size: cfg.step_size,
        seed: cfg.seed,
        errors: Vec::new(),
        ms_per_epoch: None,
        failure: None,
    };
    let result = match run_experiment(cfg) {
        Ok(r) => r,
        Err(e) => {
            outcome.failure = Some(e.to_string());
            return outcome;
        }
    };
    if let Err(e) = write_artifacts(&run_dir(out, table, cfg), cfg, &result) {
        outcome.failure = Some(e.to_string());
    }
    let s = &result.summary;
    outcome.errors = result
        .names
        .iter()
        .filter_map(|n| s[format!("rmse_{n}")].as_f64().map(|v| (n.clone(), v)))
        .collect();
    outcome.ms_per_epoch = s["mean_epoch_ms"].as_f64();
    if let Some(f) = result.trace.failure {
        outcome.failure = Some(format!("diverged at epoch {}: {}", f.epoch, f.message));
    }
    outcome
}

struct Row<'a> {
    sampler: SamplerName,
    runs: Vec<&'a RunOutcome>,
    grid: Vec<Value>,
}

fn grid_entry(step: f64, runs: &[&RunOutcome], coords: &[String]) -> (Value, (usize, f64)) {
    let failed = runs.iter().filter(|r| r.failure.is_some()).count();
    let scores: Vec<f64> = runs.iter().filter_map(|r| r.score()).collect();
    let score = median(&scores);
    let mut v = json!({ "step_size": step, "failed": failed, "median_mean_rmse": score });
    for c in coords {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.error(c)).collect();
        v[format!("rmse_{c}")] = json!(median(&vals));
    }
    (v, (failed, score.unwrap_or(f64::INFINITY)))
}

/// Picks, per sampler, the step size with the fewest failed seeds and then
/// the lowest median error.
fn select_rows<'a>(samplers: &[SamplerName], outcomes: &'a [RunOutcome], coords: &[String]) -> Vec<Row<'a>> {
    samplers
        .iter()
        .map(|&sampler| {
            let mut steps: Vec<f64> = outcomes.iter().filter(|o| o.sampler == sampler).map(|o| o.step_size).collect();
            steps.dedup();
            let mut best: Option<(f64, (usize, f64))> = None;
            let mut grid = Vec::new();
            for &step in &steps {
                let runs: Vec<&RunOutcome> =
                    outcomes.iter().filter(|o| o.sampler == sampler && o.step_size == step).collect();
                let (entry, key) = grid_entry(step, &runs, coords);
                grid.push(entry);
                let better = match best {
                    None => true,
                    Some((_, b)) => key.0 < b.0 || (key.0 == b.0 && key.1 < b.1),
                };
                if better {
                    best = Some((step, key));
                }
            }
            let chosen = best.map(|(s, _)| s);
            let runs = outcomes.iter().filter(|o| o.sampler == sampler && Some(o.step_size) == chosen).collect();
            Row { sampler, runs, grid }
        })
        .collect()
}

fn row_json(row: &Row<'_>, coords: &[String], with_grid: bool) -> Value {
    let failed_seeds: Vec<u64> = row.runs.iter().filter(|r| r.failure.is_some()).map(|r| r.seed).collect();
    let ms: Vec<f64> = row.runs.iter().filter_map(|r| r.ms_per_epoch).collect();
    let mut v = json!({
        "sampler": row.sampler.as_str(),
        "step_size": row.runs.first().map(|r| r.step_size),
        "ms_per_epoch": median(&ms),
        "failed": !row.runs.is_empty() && failed_seeds.len() == row.runs.len(),
        "failed_seeds": failed_seeds,
        "runs": row.runs.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
    });
    for c in coords {
        let vals: Vec<f64> = row.runs.iter().filter_map(|r| r.error(c)).collect();
        v[format!("rmse_{c}")] = json!(median(&vals));
    }
    if with_grid {
        v["grid"] = json!(row.grid);
    }
    v
}

/// Seed-paired comparison: holds in a seed when `better` beats `worse`
/// (strictly if `strict`); a failed run never holds. Passes when the median
/// comparison holds and it holds in at least four fifths of the seeds.
fn ordering_json(rows: &[Row<'_>], better: SamplerName, worse: SamplerName, coord: &str, strict: bool) -> Option<Value> {
    let find = |s: SamplerName| rows.iter().find(|r| r.sampler == s);
    let (b, w) = (find(better)?, find(worse)?);
    let cmp = |x: f64, y: f64| if strict { x < y } else { x <= y };
    let out_of = b.runs.len();
    let holds_in = b
        .runs
        .iter()
        .filter(|rb| {
            let rw = w.runs.iter().find(|rw| rw.seed == rb.seed);
            matches!((rb.error(coord), rw.and_then(|r| r.error(coord))), (Some(x), Some(y)) if cmp(x, y))
        })
        .count();
    let med = |r: &Row<'_>| median(&r.runs.iter().filter_map(|x| x.error(coord)).collect::<Vec<_>>());
    let (mb, mw) = (med(b), med(w));
    let median_holds = matches!((mb, mw), (Some(x), Some(y)) if cmp(x, y));
    Some(json!({
        "better": better.as_str(),
        "worse": worse.as_str(),
        "coordinate": coord,
        "strict": strict,
        "median_better": mb,
        "median_worse": mw,
        "median_holds": median_holds,
        "holds_in": holds_in,
        "out_of": out_of,
        "passed": median_holds && 5 * holds_in >= 4 * out_of,
    }))
}

pub fn replicate(table: Table, opts: &ReplicateOptions) -> Result<Value, CliError> {
    if opts.seeds.len() < MIN_SEEDS {
        return Err(CliError::Validation(format!(
            "replication needs at least {MIN_SEEDS} seeds, got {}",
            opts.seeds.len()
        )));
    }
    let samplers = if opts.samplers.is_empty() { SamplerName::ALL.to_vec() } else { opts.samplers.clone() };
    let grid = table.grid(&opts.overrides);
    let mut configs = Vec::new();
    for &sampler in &samplers {
        let preset = table.preset(sampler).with_overrides(&opts.overrides)?;
        for step in &grid {
            for &seed in &opts.seeds {
                let mut cfg = ExperimentConfig { seed, ..preset.clone() };
                if let Some(eps) = step {
                    cfg.step_size = *eps;
                }
                cfg.validate()?;
                configs.push(cfg);
            }
        }
    }

    std::fs::create_dir_all(&opts.out)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = opts.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let outcomes: Vec<RunOutcome> =
        pool.install(|| configs.par_iter().map(|cfg| execute(table, cfg, &opts.out)).collect());

    let coords: Vec<String> = match table {
        Table::Gaussian => vec!["mu".into(), "tau".into()],
        Table::Logistic => vec!["w0".into(), "w1".into()],
    };
    let rows = select_rows(&samplers, &outcomes, &coords);
    let orderings: Vec<Value> = table
        .orderings()
        .into_iter()
        .filter_map(|(b, w, c, strict)| ordering_json(&rows, b, w, c, strict))
        .collect();
    let report = json!({
        "table": table.name(),
        "seeds": opts.seeds,
        "rows": rows.iter().map(|r| row_json(r, &coords, grid.len() > 1)).collect::<Vec<_>>(),
        "orderings": orderings,
    });
    write_json(&opts.out.join("report.json"), &report)?;
    Ok(report)
}

/// Human-readable table printed after a replication.
pub fn render(report: &Value) -> String {
    let mut out = String::new();
    let rows = report["rows"].as_array().cloned().unwrap_or_default();
    let coords: Vec<String> = rows
        .first()
        .and_then(|r| r.as_object())
        .map(|o| o.keys().filter_map(|k| k.strip_prefix("rmse_").map(String::from)).collect())
        .unwrap_or_default();
    let fmt = |v: &Value| v.as_f64().map_or("-".to_string(), |x| format!("{x:.4}"));
    out.push_str(&format!("{:<12} {:>9}", "sampler", "step"));
    for c in &coords {
        out.push_str(&format!(" {:>10}", format!("rmse_{c}")));
    }
    out.push_str(&format!(" {:>10} {:>7}\n", "ms/epoch", "failed"));
    for r in &rows {
        out.push_str(&format!(
            "{:<12} {:>9}",
            r["sampler"].as_str().unwrap_or(""),
            r["step_size"].as_f64().map_or("-".into(), |x| format!("{x:e}"))
        ));
        for c in &coords {
            out.push_str(&format!(" {:>10}", fmt(&r[format!("rmse_{c}")])));
        }
        let failed = r["failed_seeds"].as_array().map_or(0, Vec::len);
        out.push_str(&format!(" {:>10} {:>7}\n", fmt(&r["ms_per_epoch"]), failed));
    }
    for o in report["orderings"].as_array().into_iter().flatten() {
        out.push_str(&format!(
            "{} {} {} {} on {}: {}/{} seeds, medians {} vs {}\n",
            if o["passed"].as_bool() == Some(true) { "PASS" } else { "FAIL" },
            o["better"].as_str().unwrap_or(""),
            if o["strict"].as_bool() == Some(true) { "<" } else { "<=" },
            o["worse"].as_str().unwrap_or(""),
            o["coordinate"].as_str().unwrap_or(""),
            o["holds_in"],
            o["out_of"],
            fmt(&o["median_better"]),
            fmt(&o["median_worse"]),
        ));
    }
    out
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| CliError::Validation(format!("invalid seed {s:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn small(out: &Path, samplers: Vec<SamplerName>) -> ReplicateOptions {
        ReplicateOptions {
            seeds: vec![1, 2, 3],
            out: out.to_path_buf(),
            samplers,
            jobs: Some(2),
            overrides: ov(&[("epochs", "80"), ("burn_in", "40"), ("n_data", "200"), ("s_init", "10")]),
        }
    }

    #[test]
    fn presets_match_table_settings() {
        let t1 = Table::Gaussian.preset(SamplerName::HmcEm);
        assert_eq!((t1.n_data, t1.epochs, t1.burn_in, t1.step_size, t1.leapfrog_steps), (5000, 10_000, 5000, 1e-2, 10));
        assert_eq!(Table::Gaussian.preset(SamplerName::Sgnht).step_size, 1e-3);
        let t2 = Table::Logistic.preset(SamplerName::SgnhtEm);
        assert_eq!((t2.n_data, t2.burn_in, t2.s_init, t2.batch_size), (2000, 10_000, 300, 100));
        assert_eq!(Table::Logistic.preset(SamplerName::SgNphmcEm).s_init, 200);
        assert_eq!(Table::Logistic.preset(SamplerName::HmcEm).s_init, 300);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn too_few_seeds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ReplicateOptions { seeds: vec![1], ..small(dir.path(), vec![]) };
        assert!(matches!(replicate(Table::Logistic, &opts), Err(CliError::Validation(_))));
    }

    #[test]
    fn filtered_run_has_one_row_and_seed_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let report = replicate(Table::Gaussian, &small(dir.path(), vec![SamplerName::HmcEm])).unwrap();
        let rows = report["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0]["rmse_mu"].is_number() && rows[0]["rmse_tau"].is_number() && rows[0]["ms_per_epoch"].is_number());
        for seed in 1..=3 {
            assert!(dir.path().join(format!("hmc-em-seed{seed}/summary.json")).exists());
        }
        assert!(dir.path().join("report.json").exists());
        assert!(report["orderings"].as_array().unwrap().is_empty());
    }

    #[test]
    fn logistic_sweep_picks_from_grid() {
        let dir = tempfile::tempdir().unwrap();
        let report = replicate(Table::Logistic, &small(dir.path(), vec![SamplerName::Sgnht, SamplerName::SgnhtEm])).unwrap();
        let rows = report["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r["grid"].as_array().unwrap().len(), 3);
            assert!(TABLE2_GRID.contains(&r["step_size"].as_f64().unwrap()));
        }
        let o = &report["orderings"][0];
        assert_eq!((o["better"].as_str(), o["out_of"].as_u64()), (Some("sgnht-em"), Some(3)));
    }

    #[test]
    fn divergent_run_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = small(dir.path(), vec![SamplerName::SgNphmc, SamplerName::Sghmc]);
        opts.overrides.push(("step_size".into(), "1.0".into()));
        let report = replicate(Table::Gaussian, &opts).unwrap();
        let rows = report["rows"].as_array().unwrap();
        let np = rows.iter().find(|r| r["sampler"] == "sg-nphmc").unwrap();
        assert_eq!(np["failed"], json!(true));
        assert_eq!(np["failed_seeds"].as_array().unwrap().len(), 3);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn seed_list_parsing() {
        assert_eq!(parse_seeds("1,2, 3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
    }
}
