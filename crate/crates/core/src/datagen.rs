//! Synthetic ground truths: low-rank PSD matrices with a prescribed
//! spectrum, EDM point clouds, noise at a fixed SNR and 1-bit targets.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::loss::{sigmoid, ElementSample};
use crate::matrix::{DenseMatrix, FactorMatrix};
use crate::model;

/// Positive eigenvalues in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("spectrum is empty".into()));
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("spectrum must be positive: {values:?}")));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(format!("spectrum must be descending: {values:?}")));
        }
        Ok(Spectrum(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn condition_number(&self) -> f64 {
        self.0[0] / self.0[self.0.len() - 1]
    }
}

impl std::str::FromStr for Spectrum {
    type Err = Error;

    /// Parses a comma-separated list such as `10,1e-1,1e-3`.
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad spectrum entry {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Spectrum::new(values)
    }
}

/// `M = U S U^T` together with its factors.
#[derive(Clone, Debug)]
pub struct LowRank {
    /// `d x r` with orthonormal columns.
    pub u: FactorMatrix,
    /// `U S^{1/2}`, so that `M = Z Z^T`.
    pub z: FactorMatrix,
    pub m: DenseMatrix,
}

/// Random `d x r` orthonormal `U` (QR of a Gaussian matrix) and
/// `M = U diag(spectrum) U^T`.
pub fn gen_low_rank(d: usize, spectrum: &Spectrum, seed: u64) -> Result<(FactorMatrix, FactorMatrix, DenseMatrix)> {
    let lr = gen_low_rank_factors(d, spectrum, seed)?;
    Ok((lr.u, lr.z, lr.m))
}

pub fn gen_low_rank_factors(d: usize, spectrum: &Spectrum, seed: u64) -> Result<LowRank> {
    let r = spectrum.rank();
    if r > d {
        return Err(Error::DimensionMismatch(format!("rank {r} exceeds d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, r, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let u = FactorMatrix::from_nalgebra(&q);
    let scale: Vec<f64> = spectrum.values().iter().map(|s| s.sqrt()).collect();
    let z = FactorMatrix::from_fn(d, r, |i, a| u.get(i, a) * scale[a]);
    let m = z.outer_gram();
    Ok(LowRank { u, z, m })
}

/// A point cloud and its squared-distance matrix.
#[derive(Clone, Debug)]
pub struct EdmInstance {
    /// `n x 3` point coordinates.
    pub points: FactorMatrix,
    /// `D_ab = ||p_a - p_b||^2`.
    pub distances: DenseMatrix,
}

/// `n` points uniform in `[-side/2, side/2]^3`; the first `outlier_count`
/// have their first coordinate shifted by `outlier_shift`.
pub fn gen_edm(n: usize, side: f64, outlier_count: usize, outlier_shift: f64, seed: u64) -> Result<EdmInstance> {
    if outlier_count > n {
        return Err(Error::InvalidConfig(format!(
            "{outlier_count} outliers for {n} points"
        )));
    }
    if !(side > 0.0) {
        return Err(Error::InvalidConfig(format!("side must be > 0, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = side / 2.0;
    let mut points = FactorMatrix::from_fn(n, 3, |_, _| rng.random_range(-h..h));
    for a in 0..outlier_count {
        points.set(a, 0, points.get(a, 0) + outlier_shift);
    }
    let distances = squared_distances(&points);
    Ok(EdmInstance { points, distances })
}

pub fn squared_distances(points: &FactorMatrix) -> DenseMatrix {
    let n = points.rows();
    DenseMatrix::from_fn(n, |a, b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum()
    })
}

/// Ratio of the largest to the smallest singular value of the centered
/// point matrix.
pub fn point_condition_number(points: &FactorMatrix) -> Result<f64> {
    let centered = center(points);
    let sv = centered.to_nalgebra().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) {
        return Err(Error::RankDeficient {
            rank: points.rank(),
            lambda: min,
        });
    }
    Ok(max / min)
}

/// Subtracts the column means.
pub fn center(points: &FactorMatrix) -> FactorMatrix {
    let (n, r) = (points.rows(), points.rank());
    let means: Vec<f64> = (0..r)
        .map(|a| (0..n).map(|i| points.get(i, a)).sum::<f64>() / n as f64)
        .collect();
    FactorMatrix::from_fn(n, r, |i, a| points.get(i, a) - means[a])
}

/// `M + W` with symmetric Gaussian `W` scaled so that
/// `20 log10(||M||_F / ||W||_F) = snr_db`. An infinite `snr_db` returns `M`.
pub fn add_noise(m: &DenseMatrix, snr_db: f64, seed: u64) -> Result<DenseMatrix> {
    if snr_db == f64::INFINITY {
        return Ok(m.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid SNR {snr_db}")));
    }
    let norm = m.frobenius();
    if !(norm > 0.0) {
        return Err(Error::InvalidConfig("cannot set an SNR for a zero matrix".into()));
    }
    let n = m.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DenseMatrix::from_fn(n, |_, _| rng.sample(StandardNormal));
    let w = DenseMatrix::from_fn(n, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
    let target = norm / 10f64.powf(snr_db / 20.0);
    let s = target / w.frobenius();
    Ok(m.add(&w.map(|v| v * s)))
}

/// Realized `20 log10(||M||_F / ||noisy - M||_F)`.
pub fn realized_snr_db(m: &DenseMatrix, noisy: &DenseMatrix) -> f64 {
    20.0 * (m.frobenius() / noisy.sub(m).frobenius()).log10()
}

/// Best rank-`r` approximation: the `r` algebraically largest eigenpairs.
pub fn eigen_truncation(m: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    let n = m.n();
    if r > n {
        return Err(Error::DimensionMismatch(format!("rank {r} exceeds {n}")));
    }
    let eig = m.to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DenseMatrix::zeros(n);
    for &k in &order[..r] {
        let lam = eig.eigenvalues[k];
        for i in 0..n {
            let vi = lam * eig.eigenvectors[(i, k)];
            for j in 0..n {
                out.set(i, j, out.get(i, j) + vi * eig.eigenvectors[(j, k)]);
            }
        }
    }
    Ok(out)
}

/// `(1 / (2 |Omega|)) sum_{(i,j) in Omega} (M'_ij - M_ij)^2` with `M'` the
/// rank-`r` eigentruncation of `M`.
pub fn noise_floor(m: &DenseMatrix, r: usize, omega: &[ElementSample]) -> Result<f64> {
    if omega.is_empty() {
        return Err(Error::EmptySet);
    }
    let mt = eigen_truncation(m, r)?;
    let mut s = 0.0;
    for e in omega {
        if e.i >= m.n() || e.j >= m.n() {
            return Err(Error::IndexOutOfRange {
                index: e.i.max(e.j),
                dim: m.n(),
            });
        }
        s += (mt.get(e.i, e.j) - m.get(e.i, e.j)).powi(2);
    }
    Ok(s / (2.0 * omega.len() as f64))
}

/// `y_ij = sigmoid(M_ij)`.
pub fn one_bit_targets(m: &DenseMatrix) -> DenseMatrix {
    m.map(sigmoid)
}

/// `max |lambda| / min |lambda|` over every eigenvalue of a symmetric matrix.
pub fn full_condition_number(m: &DenseMatrix) -> Result<f64> {
    let abs: Vec<f64> = model::sym_eigenvalues_desc(m).iter().map(|v| v.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let min = abs.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        Ok(max / min)
    } else {
        Err(Error::RankDeficient { rank: m.n(), lambda: min })
    }
}
