//! Ranking metrics, the non-personalized baseline and trace recording.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Dataset, SampleSet};
use crate::error::{Error, Result};
use crate::loss::{self, softplus, TripleSample};
use crate::matrix::FactorMatrix;

pub const TRACE_HEADER: [&str; 6] = ["step", "epoch_frac", "train_loss", "auc", "g_max", "wall_ms"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch_frac: f64,
    pub train_loss: f64,
    pub auc: Option<f64>,
    pub g_max: Option<f64>,
    pub wall_ms: u64,
}

/// Time series of a run, one row per trace point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    rows: Vec<TraceRow>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    /// Appends a row. Steps must be strictly increasing.
    pub fn push(&mut self, row: TraceRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "trace steps must increase");
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// The same trace with every `wall_ms` zeroed, for determinism checks.
    pub fn without_timing(&self) -> Trace {
        Trace {
            rows: self
                .rows
                .iter()
                .map(|r| TraceRow { wall_ms: 0, ..r.clone() })
                .collect(),
        }
    }

    /// First step at which `auc` strictly exceeds `threshold`.
    pub fn first_step_auc_above(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.auc.is_some_and(|a| a > threshold))
            .map(|r| r.step)
    }
}

pub fn write_trace_csv(trace: &Trace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(TRACE_HEADER).map_err(wrap)?;
    for row in trace.rows() {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r
        .headers()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected trace header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut trace = Trace::new();
    for (n, rec) in r.deserialize::<TraceRow>().enumerate() {
        let row = rec.map_err(|e| Error::Parse {
            line: n + 2,
            message: e.to_string(),
        })?;
        if trace.last().is_some_and(|l| l.step >= row.step) {
            return Err(Error::Parse {
                line: n + 2,
                message: "steps are not increasing".into(),
            });
        }
        trace.push(row);
    }
    Ok(trace)
}

#[inline]
fn z_ijk(x: &FactorMatrix, t: &TripleSample) -> f64 {
    let (xi, xj, xk) = (x.row(t.i), x.row(t.j), x.row(t.k));
    (0..x.rank()).map(|a| xi[a] * (xj[a] - xk[a])).sum()
}

fn check_triples(x: &FactorMatrix, omega: &[TripleSample]) -> Result<()> {
    if omega.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = x.rows();
    for t in omega {
        let m = t.i.max(t.j).max(t.k);
        if m >= d {
            return Err(Error::IndexOutOfRange { index: m, dim: d });
        }
    }
    Ok(())
}

/// Scores a triple with the literal tie rule: `z > 0` counts for `Y = 1`,
/// `z <= 0` counts for `Y = 0`.
#[inline]
pub fn auc_hit(z: f64, y: bool) -> bool {
    if y {
        z > 0.0
    } else {
        z <= 0.0
    }
}

/// Fraction of triples whose label is reproduced by `z_ijk = x_i^T (x_j - x_k)`.
///
/// Ties (`z = 0`) are credited to `Y = 0`, so `X = 0` scores the fraction of
/// negative labels rather than 0.5.
pub fn auc(x: &FactorMatrix, omega: &[TripleSample]) -> Result<f64> {
    check_triples(x, omega)?;
    let hits = omega.iter().filter(|t| auc_hit(z_ijk(x, t), t.y)).count();
    Ok(hits as f64 / omega.len() as f64)
}

/// Mean logistic loss `-Y log sigma(z) - (1 - Y) log(1 - sigma(z))`.
pub fn bpr_eval(x: &FactorMatrix, omega: &[TripleSample]) -> Result<f64> {
    check_triples(x, omega)?;
    let s: f64 = omega
        .iter()
        .map(|t| {
            let z = z_ijk(x, t);
            softplus(z) - t.label() * z
        })
        .sum();
    Ok(s / omega.len() as f64)
}

/// Mean per-sample training loss of `x` over the dataset.
pub fn dataset_loss(x: &FactorMatrix, dataset: &Dataset) -> Result<f64> {
    if dataset.d() != x.rows() {
        return Err(Error::DimensionMismatch("dataset and factor sizes differ".into()));
    }
    match dataset.samples() {
        SampleSet::Triples(v) => bpr_eval(x, v),
        SampleSet::Elements(v) => {
            let mut s = 0.0;
            for e in v {
                s += loss::sample_loss(x, dataset.kind(), &loss::Sample::Element(*e))?;
            }
            Ok(s / v.len() as f64)
        }
    }
}

/// Step size and budget of the NP-Maximum fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NpConfig {
    pub alpha: f64,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for NpConfig {
    fn default() -> Self {
        NpConfig {
            alpha: 0.01,
            epochs: 20,
            seed: 0,
        }
    }
}

/// Fits one score per item by `np_step` sweeps over `omega`, starting from
/// all ones. Each epoch is `|omega|` uniform draws with replacement.
pub fn np_fit(omega: &[TripleSample], config: &NpConfig) -> Result<Vec<f64>> {
    if omega.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = omega.iter().map(|t| t.i.max(t.j).max(t.k)).max().unwrap_or(0) + 1;
    let mut x = vec![1.0; d];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        for _ in 0..omega.len() {
            let t = &omega[rng.random_range(0..omega.len())];
            loss::np_step(&mut x, t, config.alpha);
        }
    }
    Ok(x)
}

/// AUC of a global item scoring, with `z = x_j - x_k`.
pub fn np_auc(x: &[f64], omega: &[TripleSample]) -> Result<f64> {
    if omega.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = omega
        .iter()
        .filter(|t| auc_hit(x[t.j] - x[t.k], t.y))
        .count();
    Ok(hits as f64 / omega.len() as f64)
}

/// The NP-Maximum baseline: a non-personalized ranking fit directly on the
/// test triples and scored on them.
pub fn np_maximum(omega_test: &[TripleSample], alpha: f64, epochs: u32, seed: u64) -> Result<f64> {
    let x = np_fit(omega_test, &NpConfig { alpha, epochs, seed })?;
    np_auc(&x, omega_test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gaussian_matrix;

    fn random_triples(d: usize, n: usize, seed: u64) -> Vec<TripleSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let j = rng.random_range(0..d);
                let k = (j + rng.random_range(1..d)) % d;
                TripleSample { i: rng.random_range(0..d), j, k, y: rng.random() }
            })
            .collect()
    }

    #[test]
    fn auc_of_zero_is_negative_fraction() {
        let omega = random_triples(6, 40, 1);
        let neg = omega.iter().filter(|t| !t.y).count() as f64 / 40.0;
        assert_eq!(auc(&FactorMatrix::zeros(6, 2), &omega).unwrap(), neg);
        assert!(matches!(auc(&FactorMatrix::zeros(6, 2), &[]), Err(Error::EmptySet)));
    }

    #[test]
    fn auc_of_consistent_labels_is_one() {
        let x = gaussian_matrix(8, 2, 1.0, 2);
        let omega: Vec<_> = random_triples(8, 50, 3)
            .into_iter()
            .map(|t| TripleSample { y: z_ijk(&x, &t) > 0.0, ..t })
            .collect();
        assert_eq!(auc(&x, &omega).unwrap(), 1.0);
    }

    #[test]
    fn bpr_eval_examples() {
        let omega = random_triples(5, 20, 4);
        let v = bpr_eval(&FactorMatrix::zeros(5, 2), &omega).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let x = FactorMatrix::from_rows(&[vec![10.0], vec![10.0], vec![0.0]]).unwrap();
        let t = [TripleSample { i: 0, j: 1, k: 2, y: true }];
        let v = bpr_eval(&x, &t).unwrap();
        assert!(v.is_finite() && v <= 1e-40);
        // moderate z against the naive formula
        let x = gaussian_matrix(5, 2, 0.7, 5);
        let naive: f64 = omega
            .iter()
            .map(|t| {
                let s = loss::sigmoid(z_ijk(&x, t));
                -(t.label() * s.ln() + (1.0 - t.label()) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / omega.len() as f64;
        assert!((bpr_eval(&x, &omega).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn np_maximum_separable_and_deterministic() {
        // labels explained by the global order j < k
        let omega: Vec<_> = random_triples(10, 400, 6)
            .into_iter()
            .map(|t| TripleSample { y: t.j < t.k, ..t })
            .collect();
        let a = np_maximum(&omega, 0.05, 50, 7).unwrap();
        assert!(a > 0.95, "np auc {a}");
        assert_eq!(a, np_maximum(&omega, 0.05, 50, 7).unwrap());
    }

    #[test]
    fn trace_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace_csv(&Trace::new(), &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,epoch_frac,train_loss,auc,g_max,wall_ms\n"
        );
        assert_eq!(read_trace_csv(&path).unwrap(), Trace::new());
        let mut t = Trace::new();
        t.push(TraceRow {
            step: 3,
            epoch_frac: 1.0 / 3.0,
            train_loss: 1.234_567_890_123_456_7e-17,
            auc: None,
            g_max: Some(0.1 + 0.2),
            wall_ms: 12,
        });
        write_trace_csv(&t, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        assert_eq!(read_trace_csv(&path).unwrap(), t);
    }

    #[test]
    fn missing_trace_file_reports_path() {
        let err = read_trace_csv(Path::new("/nonexistent/trace.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }
}
