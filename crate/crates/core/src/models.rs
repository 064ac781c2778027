//! Target distributions, synthetic data generators and the CSV loader.
//!
//! A [`TargetModel`] exposes the joint log density `L(θ) = log p(X|θ) + log p(θ)`
//! and its gradient, both on the full dataset and on minibatches. Models only
//! implement the per-batch data terms and the prior; the full/minibatch
//! combinations (including the `n/|batch|` rescaling) are provided methods.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::seeding::{stream_rng, DATA_STREAM};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Feature rows (stored flat, row-major) with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            features.extend_from_slice(row);
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::DimensionMismatch { expected: rows.len(), got: l.len() });
            }
        }
        Ok(Self { features, dim, labels })
    }

    /// One-dimensional dataset from scalars.
    pub fn from_scalars(values: Vec<f64>) -> Self {
        Self { features: values, dim: 1, labels: None }
    }

    pub fn empty() -> Self {
        Self { features: Vec::new(), dim: 0, labels: None }
    }

    pub fn len(&self) -> usize {
        self.features.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks(self.dim.max(1))
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels.as_ref().map_or(0.0, |l| l[i])
    }

    /// Rescales every feature column to zero mean and unit (population)
    /// variance. Constant columns are only centred.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        for j in 0..self.dim {
            let mean = (0..n).map(|i| self.features[i * self.dim + j]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (self.features[i * self.dim + j] - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                let v = &mut self.features[i * self.dim + j];
                *v = (*v - mean) / sd;
            }
        }
    }
}

/// Which data points a likelihood evaluation covers.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    All,
    Indices(&'a [usize]),
}

impl Batch<'_> {
    fn for_each(self, n: usize, mut f: impl FnMut(usize)) {
        match self {
            Batch::All => (0..n).for_each(f),
            Batch::Indices(idx) => idx.iter().for_each(|&i| f(i)),
        }
    }
}

pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn n_data(&self) -> usize;

    fn log_prior(&self, theta: &[f64]) -> f64;

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]);

    /// `Σ_{i∈batch} log p(xᵢ|θ)`, unscaled.
    fn data_log_lik(&self, theta: &[f64], batch: Batch<'_>) -> f64;

    /// `out += scale · Σ_{i∈batch} ∇ log p(xᵢ|θ)`.
    fn add_data_grad(&self, theta: &[f64], batch: Batch<'_>, scale: f64, out: &mut [f64]);

    /// A point inside the typical set, used as the default chain start and
    /// as the centre for diagnostic probes.
    fn reference_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Maps sampler coordinates to the reported parameterization.
    fn report(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    fn report_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta_{i}")).collect()
    }

    fn log_lik(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta)?;
        let v = self.data_log_lik(theta, Batch::All) + self.log_prior(theta);
        finite(v, "log likelihood")
    }

    fn grad_log_lik(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(theta)?;
        let mut g = vec![0.0; self.dim()];
        self.add_data_grad(theta, Batch::All, 1.0, &mut g);
        self.add_grad_log_prior(theta, &mut g);
        finite_vec(g, "log likelihood gradient")
    }

    /// Minibatch estimate `(n/|batch|)·Σ log p(xᵢ|θ) + log p(θ)`.
    fn stoch_log_lik(&self, theta: &[f64], batch: &[usize]) -> Result<f64> {
        self.check_dim(theta)?;
        self.check_batch(batch)?;
        let scale = self.n_data() as f64 / batch.len() as f64;
        let v = scale * self.data_log_lik(theta, Batch::Indices(batch)) + self.log_prior(theta);
        finite(v, "minibatch log likelihood")
    }

    /// Minibatch estimate `(n/|batch|)·Σ ∇log p(xᵢ|θ) + ∇log p(θ)`.
    fn stoch_grad_log_lik(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        self.check_dim(theta)?;
        self.check_batch(batch)?;
        let scale = self.n_data() as f64 / batch.len() as f64;
        let mut g = vec![0.0; self.dim()];
        self.add_data_grad(theta, Batch::Indices(batch), scale, &mut g);
        self.add_grad_log_prior(theta, &mut g);
        finite_vec(g, "minibatch log likelihood gradient")
    }

    /// Full-data value when `batch` is `None`.
    fn batch_log_lik(&self, theta: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        match batch {
            Some(b) => self.stoch_log_lik(theta, b),
            None => self.log_lik(theta),
        }
    }

    fn batch_grad_log_lik(&self, theta: &[f64], batch: Option<&[usize]>) -> Result<Vec<f64>> {
        match batch {
            Some(b) => self.stoch_grad_log_lik(theta, b),
            None => self.grad_log_lik(theta),
        }
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.n_data();
        if let Some(&index) = batch.iter().find(|&&i| i >= n) {
            return Err(Error::BatchIndexOutOfRange { index, n });
        }
        Ok(())
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteValue(what))
    }
}

fn finite_vec(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteValue(what))
    }
}

/// Draws minibatch indices uniformly without replacement.
#[derive(Debug, Clone, Copy)]
pub struct Minibatcher {
    n: usize,
    size: usize,
}

impl Minibatcher {
    pub fn new(n: usize, size: usize) -> Self {
        Self { n, size }
    }

    /// Never subsamples.
    pub fn full(n: usize) -> Self {
        Self { n, size: n }
    }

    pub fn is_full(&self) -> bool {
        self.size == 0 || self.size >= self.n
    }

    /// `None` means the full dataset.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<usize>> {
        if self.is_full() {
            None
        } else {
            Some(index::sample(rng, self.n, self.size).into_vec())
        }
    }
}

/// Univariate Gaussian with unknown mean `μ` and precision `τ = exp(η)`,
/// sampled in `θ = (μ, η)`.
///
/// The precision carries a `Gamma(shape, rate)` prior. The mean is flat
/// unless `mu_prior_precision > 0`, in which case `μ | τ ~ N(m₀, (λ₀τ)⁻¹)`.
/// The log density includes the `+η` Jacobian of the log reparametrization.
#[derive(Debug, Clone)]
pub struct GaussianNormalGammaModel {
    data: Dataset,
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub mu_prior_mean: f64,
    pub mu_prior_precision: f64,
}

impl GaussianNormalGammaModel {
    pub fn new(data: Dataset) -> Result<Self> {
        if data.dim() > 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: data.dim() });
        }
        Ok(Self { data, prior_shape: 1.0, prior_rate: 1.0, mu_prior_mean: 0.0, mu_prior_precision: 0.0 })
    }

    pub fn with_gamma_prior(mut self, shape: f64, rate: f64) -> Self {
        self.prior_shape = shape;
        self.prior_rate = rate;
        self
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

impl TargetModel for GaussianNormalGammaModel {
    fn dim(&self) -> usize {
        2
    }

    fn n_data(&self) -> usize {
        self.data.len()
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let (mu, eta) = (theta[0], theta[1]);
        let tau = eta.exp();
        let (a, b) = (self.prior_shape, self.prior_rate);
        let mut lp = a * b.ln() - ln_gamma(a) + (a - 1.0) * eta - b * tau + eta;
        if self.mu_prior_precision > 0.0 {
            let lam = self.mu_prior_precision;
            lp += 0.5 * (lam.ln() + eta - LN_2PI) - 0.5 * lam * tau * (mu - self.mu_prior_mean).powi(2);
        }
        lp
    }

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        let (mu, eta) = (theta[0], theta[1]);
        let tau = eta.exp();
        out[1] += self.prior_shape - self.prior_rate * tau;
        if self.mu_prior_precision > 0.0 {
            let lam = self.mu_prior_precision;
            let d = mu - self.mu_prior_mean;
            out[0] -= lam * tau * d;
            out[1] += 0.5 - 0.5 * lam * tau * d * d;
        }
    }

    fn data_log_lik(&self, theta: &[f64], batch: Batch<'_>) -> f64 {
        let (mu, eta) = (theta[0], theta[1]);
        let tau = eta.exp();
        let mut count = 0usize;
        let mut sq = 0.0;
        batch.for_each(self.data.len(), |i| {
            let d = self.data.features[i] - mu;
            sq += d * d;
            count += 1;
        });
        0.5 * count as f64 * (eta - LN_2PI) - 0.5 * tau * sq
    }

    fn add_data_grad(&self, theta: &[f64], batch: Batch<'_>, scale: f64, out: &mut [f64]) {
        let (mu, eta) = (theta[0], theta[1]);
        let tau = eta.exp();
        let mut count = 0usize;
        let mut lin = 0.0;
        let mut sq = 0.0;
        batch.for_each(self.data.len(), |i| {
            let d = self.data.features[i] - mu;
            lin += d;
            sq += d * d;
            count += 1;
        });
        out[0] += scale * tau * lin;
        out[1] += scale * (0.5 * count as f64 - 0.5 * tau * sq);
    }

    fn report(&self, theta: &[f64]) -> Vec<f64> {
        vec![theta[0], theta[1].exp()]
    }

    fn report_names(&self) -> Vec<String> {
        vec!["mu".into(), "tau".into()]
    }
}

/// Bayesian logistic regression without intercept and an isotropic Gaussian
/// prior `N(0, prior_variance·I)` on the weights.
#[derive(Debug, Clone)]
pub struct BayesLogisticModel {
    data: Dataset,
    pub prior_variance: f64,
}

impl BayesLogisticModel {
    pub fn new(data: Dataset) -> Result<Self> {
        if data.labels().is_none() {
            return Err(Error::InvalidConfig("logistic regression needs labelled data".into()));
        }
        if data.dim() == 0 {
            return Err(Error::InvalidConfig("logistic regression needs at least one feature".into()));
        }
        Ok(Self { data, prior_variance: 10.0 })
    }

    pub fn with_prior_variance(mut self, v: f64) -> Self {
        self.prior_variance = v;
        self
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TargetModel for BayesLogisticModel {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn n_data(&self) -> usize {
        self.data.len()
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let d = theta.len() as f64;
        -0.5 * dot(theta, theta) / self.prior_variance - 0.5 * d * (LN_2PI + self.prior_variance.ln())
    }

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(theta) {
            *o -= w / self.prior_variance;
        }
    }

    fn data_log_lik(&self, theta: &[f64], batch: Batch<'_>) -> f64 {
        let mut acc = 0.0;
        batch.for_each(self.data.len(), |i| {
            let z = dot(self.data.row(i), theta);
            acc += self.data.label(i) * z - softplus(z);
        });
        acc
    }

    fn add_data_grad(&self, theta: &[f64], batch: Batch<'_>, scale: f64, out: &mut [f64]) {
        batch.for_each(self.data.len(), |i| {
            let x = self.data.row(i);
            let r = scale * (self.data.label(i) - sigmoid(dot(x, theta)));
            for (o, xj) in out.iter_mut().zip(x) {
                *o += r * xj;
            }
        });
    }

    fn report_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("w{i}")).collect()
    }
}

/// Gaussian mean with known noise precision and a conjugate normal prior.
/// Its posterior is available in closed form, which makes it the reference
/// target for sampler-correctness checks.
#[derive(Debug, Clone)]
pub struct GaussianMeanModel {
    data: Dataset,
    pub noise_precision: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
}

impl GaussianMeanModel {
    pub fn new(data: Dataset, noise_precision: f64, prior_mean: f64, prior_variance: f64) -> Result<Self> {
        if data.dim() > 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: data.dim() });
        }
        Ok(Self { data, noise_precision, prior_mean, prior_variance })
    }

    /// Closed-form posterior `(mean, variance)` of the mean parameter.
    pub fn posterior(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let sum: f64 = self.data.features.iter().sum();
        let precision = 1.0 / self.prior_variance + n * self.noise_precision;
        let mean = (self.prior_mean / self.prior_variance + self.noise_precision * sum) / precision;
        (mean, 1.0 / precision)
    }
}

impl TargetModel for GaussianMeanModel {
    fn dim(&self) -> usize {
        1
    }

    fn n_data(&self) -> usize {
        self.data.len()
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let d = theta[0] - self.prior_mean;
        -0.5 * (LN_2PI + self.prior_variance.ln()) - 0.5 * d * d / self.prior_variance
    }

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        out[0] -= (theta[0] - self.prior_mean) / self.prior_variance;
    }

    fn data_log_lik(&self, theta: &[f64], batch: Batch<'_>) -> f64 {
        let lam = self.noise_precision;
        let mut acc = 0.0;
        batch.for_each(self.data.len(), |i| {
            let d = self.data.features[i] - theta[0];
            acc += 0.5 * (lam.ln() - LN_2PI) - 0.5 * lam * d * d;
        });
        acc
    }

    fn add_data_grad(&self, theta: &[f64], batch: Batch<'_>, scale: f64, out: &mut [f64]) {
        let mut acc = 0.0;
        batch.for_each(self.data.len(), |i| acc += self.data.features[i] - theta[0]);
        out[0] += scale * self.noise_precision * acc;
    }

    fn reference_point(&self) -> Vec<f64> {
        vec![self.posterior().0]
    }

    fn report_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }
}

/// Data-free zero-mean Gaussian with diagonal precision.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    precisions: Vec<f64>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        Self { precisions: vec![1.0; dim] }
    }

    pub fn with_precisions(precisions: Vec<f64>) -> Self {
        Self { precisions }
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.precisions.len()
    }

    fn n_data(&self) -> usize {
        0
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.precisions
            .iter()
            .zip(theta)
            .map(|(l, t)| 0.5 * (l.ln() - LN_2PI) - 0.5 * l * t * t)
            .sum()
    }

    fn add_grad_log_prior(&self, theta: &[f64], out: &mut [f64]) {
        for ((o, l), t) in out.iter_mut().zip(&self.precisions).zip(theta) {
            *o -= l * t;
        }
    }

    fn data_log_lik(&self, _theta: &[f64], _batch: Batch<'_>) -> f64 {
        0.0
    }

    fn add_data_grad(&self, _theta: &[f64], _batch: Batch<'_>, _scale: f64, _out: &mut [f64]) {}
}

/// `n` i.i.d. draws from `N(0, 1)`.
pub fn generate_gaussian_data(n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, DATA_STREAM);
    Dataset::from_scalars((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Class means of the two-component mixture.
pub const MIXTURE_MEANS: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 1.0]];
/// Weights of the labelling classifier.
pub const MIXTURE_WEIGHTS: [f64; 2] = [1.0, -1.0];

/// Label assigned by the generating linear classifier; ties go to class 0.
pub fn mixture_label(x: &[f64]) -> f64 {
    if dot(x, &MIXTURE_WEIGHTS) > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `n` points from an equal-weight mixture of `N([1,−1], I)` and
/// `N([−1,1], I)`, labelled by the sign of `x·[1,−1]`.
pub fn generate_mixture_lr_data(n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mean = if rng.random::<bool>() { MIXTURE_MEANS[0] } else { MIXTURE_MEANS[1] };
        let x: Vec<f64> = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
        labels.push(mixture_label(&x));
        rows.push(x);
    }
    Dataset::from_rows(&rows, Some(labels)).expect("generated rows are rectangular")
}

/// Reads a numeric CSV file. The label column (default: the last) is removed from the features
/// and mapped onto `{0, 1}`: labels already in `{0, 1}` are kept, any other
/// two-valued column maps its smaller value to 0 and larger to 1. A first row
/// that does not parse as numbers is treated as a header.
///
/// Error rows are 1-based file lines; columns are 0-based.
pub fn load_csv_dataset(path: &Path, label_column: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<(usize, f64)> = Vec::new();
    let mut width: Option<usize> = None;

    for (line_idx, record) in reader.records().enumerate() {
        let line = line_idx + 1;
        let record = record.map_err(|e| Error::ParseError { row: line, col: 0, message: e.to_string() })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if line == 1 && parsed.iter().any(Result::is_err) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        let label_column = label_column.unwrap_or(w.saturating_sub(1));
        if record.len() != w {
            return Err(Error::ParseError {
                row: line,
                col: record.len().min(w),
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        if label_column >= w {
            return Err(Error::ParseError {
                row: line,
                col: label_column,
                message: format!("label column {label_column} out of range for {w} fields"),
            });
        }
        let mut features = Vec::with_capacity(w - 1);
        for (col, value) in parsed.into_iter().enumerate() {
            let v = value.map_err(|e| Error::ParseError {
                row: line,
                col,
                message: format!("'{}': {e}", &record[col]),
            })?;
            if col == label_column {
                labels.push((line, v));
            } else {
                features.push(v);
            }
        }
        rows.push(features);
    }

    let labels = coerce_binary_labels(&labels)?;
    Dataset::from_rows(&rows, Some(labels))
}

fn coerce_binary_labels(raw: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut distinct: Vec<f64> = Vec::new();
    for &(row, v) in raw {
        if !v.is_finite() {
            return Err(Error::LabelDomainError { row, value: v });
        }
        if !distinct.contains(&v) {
            if distinct.len() == 2 {
                return Err(Error::LabelDomainError { row, value: v });
            }
            distinct.push(v);
        }
    }
    if distinct.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(raw.iter().map(|&(_, v)| v).collect());
    }
    let low = distinct.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(raw.iter().map(|&(_, v)| if v == low && distinct.len() == 2 { 0.0 } else { 1.0 }).collect())
}
