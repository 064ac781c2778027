//! Dense symmetric positive-definite matrices.
//!
//! Every kinetic-energy computation in the samplers goes through [`SpdMatrix`]:
//! quadratic forms `pᵀ M⁻¹ p`, linear solves, and zero-mean Gaussian draws via
//! a lazily computed Cholesky factor. Matrices are immutable once built, so the
//! factor is computed at most once and can be shared read-only across threads.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SpdMatrix {
    dim: usize,
    entries: Vec<f64>,
    chol: OnceLock<Result<Vec<f64>>>,
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl SpdMatrix {
    /// Builds a matrix from row-major entries. Symmetry is checked here;
    /// positive definiteness is only checked when the factor is first needed.
    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("matrix dimension must be positive".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: entries.len() });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("matrix entries"));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = entries[i * dim + j];
                let b = entries[j * dim + i];
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, entries, chol: OnceLock::new() })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            entries.extend_from_slice(row);
        }
        Self::from_row_major(dim, entries)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim]).expect("identity is a valid matrix")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let dim = diag.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            entries[i * dim + i] = *d;
        }
        Self::from_row_major(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Lower-triangular Cholesky factor `L` with `L·Lᵀ = self`, row-major.
    pub fn cholesky(&self) -> Result<&[f64]> {
        self.chol
            .get_or_init(|| factorize(self.dim, &self.entries))
            .as_deref()
            .map_err(Clone::clone)
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim;
        (0..n).all(|i| (0..n).all(|j| i == j || self.entries[i * n + j] == 0.0))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.cholesky().is_ok()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.dim);
        self.entries
            .chunks(self.dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `vᵀ·self·v`
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.mul_vec(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Solves `self·x = v` through the cached factor.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let l = self.cholesky()?;
        let n = self.dim;
        if self.is_diagonal() {
            return Ok(v.iter().enumerate().map(|(i, x)| x / self.entries[i * n + i]).collect());
        }
        // forward: L y = v
        let mut y = v.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for k in 0..i {
                acc -= l[i * n + k] * y[k];
            }
            y[i] = acc / l[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l[k * n + i] * y[k];
            }
            y[i] = acc / l[i * n + i];
        }
        Ok(y)
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        // Column solves leave rounding-level asymmetry; average it out.
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
                inv[i * n + j] = avg;
                inv[j * n + i] = avg;
            }
        }
        SpdMatrix::from_row_major(n, inv)
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = self.cholesky()?;
        let n = self.dim;
        Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
    }

    /// Draws `L·z` with `z` standard normal, i.e. a sample from `N(0, self)`.
    pub fn sample_zero_mean_gaussian<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let l = self.cholesky()?;
        let n = self.dim;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok((0..n)
            .map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum())
            .collect())
    }

    /// `(1 − weight)·self + weight·other`.
    pub fn blend(&self, other: &SpdMatrix, weight: f64) -> Result<SpdMatrix> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (1.0 - weight) * a + weight * b)
            .collect();
        SpdMatrix::from_row_major(self.dim, entries)
    }

    pub fn add_scaled_identity(&self, scale: f64) -> Result<SpdMatrix> {
        let mut entries = self.entries.clone();
        for i in 0..self.dim {
            entries[i * self.dim + i] += scale;
        }
        SpdMatrix::from_row_major(self.dim, entries)
    }

    pub fn scaled(&self, factor: f64) -> Result<SpdMatrix> {
        SpdMatrix::from_row_major(self.dim, self.entries.iter().map(|v| v * factor).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_distance(&self, other: &SpdMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn factorize(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = acc / ljj;
        }
    }
    Ok(l)
}

/// Zero-mean sample covariance `(1/n)·Σ pᵢpᵢᵀ + ridge·I`.
///
/// The result is symmetric but only positive definite when the samples span
/// the space or `ridge > 0`.
pub fn empirical_covariance(samples: &[Vec<f64>], ridge: f64) -> Result<SpdMatrix> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: samples.len() });
    }
    let dim = samples[0].len();
    let mut acc = vec![0.0; dim * dim];
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: s.len() });
        }
        for i in 0..dim {
            for j in 0..=i {
                acc[i * dim + j] += s[i] * s[j];
            }
        }
    }
    let n = samples.len() as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = acc[i * dim + j] / n + if i == j { ridge } else { 0.0 };
            acc[i * dim + j] = v;
            acc[j * dim + i] = v;
        }
    }
    SpdMatrix::from_row_major(dim, acc)
}

/// Ridge used when the caller does not supply one: `1e-6 · trace / dim` of the
/// unridged covariance.
pub fn default_ridge(samples: &[Vec<f64>]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let dim = samples[0].len().max(1);
    let n = samples.len() as f64;
    let trace: f64 = samples.iter().flat_map(|s| s.iter().map(|v| v * v)).sum::<f64>() / n;
    let ridge = 1e-6 * trace / dim as f64;
    if ridge > 0.0 {
        ridge
    } else {
        1e-12
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m42() -> SpdMatrix {
        SpdMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap()
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let id = SpdMatrix::identity(3);
        assert_eq!(id.cholesky().unwrap(), SpdMatrix::identity(3).entries());
    }

    #[test]
    fn cholesky_reconstructs() {
        let m = m42();
        let l = m.cholesky().unwrap().to_vec();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| l[i * 2 + k] * l[j * 2 + k]).sum();
                assert!((v - m.get(i, j)).abs() < 1e-12);
            }
        }
        assert_eq!(l[1], 0.0);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = SpdMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
        assert!(matches!(m.solve(&[1.0, 0.0]), Err(Error::NotPositiveDefinite { .. })));
        assert!(matches!(m.inverse(), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_is_rejected() {
        let err = SpdMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap_err();
        assert_eq!(err, Error::NotSymmetric { row: 0, col: 1 });
    }

    #[test]
    fn solve_examples() {
        assert_eq!(SpdMatrix::identity(2).solve(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let x = SpdMatrix::diagonal(&[2.0, 5.0]).unwrap().solve(&[2.0, 5.0]).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);

        let m = m42();
        let x = m.solve(&[1.0, 0.0]).unwrap();
        let r = m.mul_vec(&x);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(SpdMatrix::identity(3).inverse().unwrap(), SpdMatrix::identity(3));
        let d = SpdMatrix::diagonal(&[2.0, 4.0]).unwrap().inverse().unwrap();
        assert_eq!(d.entries(), &[0.5, 0.0, 0.0, 0.25]);

        let m = m42();
        let inv = m.inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| m.get(i, k) * inv.get(k, j)).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-12);
            }
        }
        let back = inv.inverse().unwrap();
        assert!(back.frobenius_distance(&m) < 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn gaussian_draw_with_identity_is_raw_normal() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let drawn = SpdMatrix::identity(2).sample_zero_mean_gaussian(&mut a).unwrap();
        let raw: Vec<f64> = (0..2).map(|_| b.sample(StandardNormal)).collect();
        assert_eq!(drawn, raw);
    }

    #[test]
    fn gaussian_draw_is_replayable() {
        let cov = SpdMatrix::diagonal(&[2.0, 2.0]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| cov.sample_zero_mean_gaussian(&mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
    }

    #[test]
    fn gaussian_draw_matches_diagonal_variance() {
        let cov = SpdMatrix::diagonal(&[4.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let x = cov.sample_zero_mean_gaussian(&mut rng).unwrap();
            sums[0] += x[0] * x[0];
            sums[1] += x[1] * x[1];
        }
        assert!((sums[0] / n as f64 / 4.0 - 1.0).abs() < 0.05);
        assert!((sums[1] / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn covariance_examples() {
        let rank1 = empirical_covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.0).unwrap();
        assert_eq!(rank1.entries(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(!rank1.is_positive_definite());

        let four = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let c = empirical_covariance(&four, 0.0).unwrap();
        assert_eq!(c.entries(), &[0.5, 0.0, 0.0, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let few: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let c = empirical_covariance(&few, 1e-6).unwrap();
        assert!(c.is_positive_definite());

        assert_eq!(
            empirical_covariance(&[vec![1.0]], 0.0).unwrap_err(),
            Error::InsufficientSamples { needed: 2, got: 1 }
        );
    }

    #[test]
    fn log_det_of_diagonal() {
        let d = SpdMatrix::diagonal(&[2.0, 3.0]).unwrap();
        assert!((d.log_det().unwrap() - 6.0_f64.ln()).abs() < 1e-14);
    }
}
