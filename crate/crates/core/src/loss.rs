//! Per-sample update rules for the four losses and the non-personalized
//! ranking baseline.
//!
//! Every rule reads the touched rows once, computes all new rows from those
//! pre-step values, writes them, and then (in scaled mode) moves `P` to the
//! inverse of the new Gram matrix: first one `smw_add` per new row, then one
//! `smw_sub` per old row. A row whose update is exactly zero is skipped.
//!
//! The rules are generic over [`RowStore`] so that the same code drives both
//! the single-threaded model and the shared atomic matrix in
//! [`crate::parallel`].

use crate::error::{Error, Result};
use crate::kernel::{self, SmallSymMatrix, MAX_RANK};
use crate::matrix::{dot, FactorMatrix};
use crate::model::FactorModel;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// An observed matrix entry: `M_ij`, `D_ij` or `y_ij` depending on the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementSample {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// A ranking comparison: `y` is true when item `i` is more similar to `j`
/// than to `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleSample {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub y: bool,
}

impl TripleSample {
    #[inline]
    pub fn label(&self) -> f64 {
        if self.y {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sample {
    Element(ElementSample),
    Triple(TripleSample),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Rmse,
    Xent,
    Edm,
    Bpr,
}

impl LossKind {
    pub fn uses_triples(self) -> bool {
        matches!(self, LossKind::Bpr)
    }
}

/// SGD (`scaled = false`) or ScaledSGD (`scaled = true`) with step size `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMode {
    pub scaled: bool,
    pub alpha: f64,
}

impl StepMode {
    pub fn plain(alpha: f64) -> Self {
        StepMode {
            scaled: false,
            alpha,
        }
    }

    pub fn scaled(alpha: f64) -> Self {
        StepMode {
            scaled: true,
            alpha,
        }
    }
}

/// Row-level access to a `d x r` factor.
pub trait RowStore {
    fn rows(&self) -> usize;
    fn rank(&self) -> usize;
    fn read_row(&self, i: usize, out: &mut [f64]);
    fn write_row(&mut self, i: usize, values: &[f64]);

    /// A point-in-time copy of every row.
    fn snapshot(&self) -> FactorMatrix {
        let mut x = FactorMatrix::zeros(self.rows(), self.rank());
        for i in 0..self.rows() {
            self.read_row(i, x.row_mut(i));
        }
        x
    }
}

impl RowStore for FactorMatrix {
    fn rows(&self) -> usize {
        FactorMatrix::rows(self)
    }

    fn rank(&self) -> usize {
        FactorMatrix::rank(self)
    }

    fn read_row(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(i));
    }

    fn write_row(&mut self, i: usize, values: &[f64]) {
        self.row_mut(i).copy_from_slice(values);
    }

    fn snapshot(&self) -> FactorMatrix {
        self.clone()
    }
}

/// Rows touched by a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Touched {
    idx: [usize; 3],
    n: usize,
}

impl Touched {
    pub fn as_slice(&self) -> &[usize] {
        &self.idx[..self.n]
    }
}

/// Result of one step on a row store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepInfo {
    pub touched: Touched,
    pub smw_calls: u64,
}

struct Scratch {
    r: usize,
    touched: Touched,
    old: [[f64; MAX_RANK]; 3],
    delta: [[f64; MAX_RANK]; 3],
}

impl Scratch {
    fn new(r: usize) -> Self {
        Scratch {
            r,
            touched: Touched::default(),
            old: [[0.0; MAX_RANK]; 3],
            delta: [[0.0; MAX_RANK]; 3],
        }
    }

    fn slot<S: RowStore + ?Sized>(&mut self, x: &S, i: usize) -> usize {
        if let Some(s) = self.touched.as_slice().iter().position(|&t| t == i) {
            return s;
        }
        let s = self.touched.n;
        self.touched.idx[s] = i;
        self.touched.n += 1;
        x.read_row(i, &mut self.old[s][..self.r]);
        s
    }

    fn old(&self, s: usize) -> &[f64] {
        &self.old[s][..self.r]
    }

    /// `delta[s] += coeff * (P dir)`, or `coeff * dir` when `p` is `None`.
    fn push(&mut self, s: usize, coeff: f64, dir: &[f64], p: Option<&SmallSymMatrix>) {
        let r = self.r;
        if coeff == 0.0 {
            return;
        }
        match p {
            Some(p) => {
                let mut pd = [0.0; MAX_RANK];
                p.mul_vec_into(dir, &mut pd[..r]);
                for (d, v) in self.delta[s][..r].iter_mut().zip(&pd[..r]) {
                    *d += coeff * v;
                }
            }
            None => {
                for (d, v) in self.delta[s][..r].iter_mut().zip(dir) {
                    *d += coeff * v;
                }
            }
        }
    }
}

fn check_index(i: usize, d: usize) -> Result<()> {
    if i >= d {
        Err(Error::IndexOutOfRange { index: i, dim: d })
    } else {
        Ok(())
    }
}

/// Applies one step of `kind` on `sample` to the rows of `x`.
///
/// With `p = Some(..)` the step is preconditioned and `p` is kept equal to
/// `(X^T X)^{-1}` through Sherman-Morrison calls. A
/// [`Error::SingularDowndate`] leaves the rows written but `p` stale; the
/// caller must recompute it.
pub fn apply_step<S: RowStore + ?Sized>(
    x: &mut S,
    mut p: Option<&mut SmallSymMatrix>,
    kind: LossKind,
    sample: &Sample,
    alpha: f64,
) -> Result<StepInfo> {
    let r = x.rank();
    let d = x.rows();
    let mut sc = Scratch::new(r);
    let pref = p.as_deref();
    match (kind, sample) {
        (LossKind::Rmse | LossKind::Xent, Sample::Element(s)) => {
            check_index(s.i, d)?;
            check_index(s.j, d)?;
            let si = sc.slot(x, s.i);
            let sj = sc.slot(x, s.j);
            let z = dot(sc.old(si), sc.old(sj));
            let res = if kind == LossKind::Rmse {
                z - s.value
            } else {
                sigmoid(z) - s.value
            };
            let xi = sc.old[si];
            let xj = sc.old[sj];
            sc.push(si, -alpha * res, &xj[..r], pref);
            sc.push(sj, -alpha * res, &xi[..r], pref);
        }
        (LossKind::Edm, Sample::Element(s)) => {
            check_index(s.i, d)?;
            check_index(s.j, d)?;
            if s.i == s.j {
                return Err(Error::DegenerateSample(format!(
                    "EDM sample with i = j = {}",
                    s.i
                )));
            }
            let si = sc.slot(x, s.i);
            let sj = sc.slot(x, s.j);
            let mut u = [0.0; MAX_RANK];
            for a in 0..r {
                u[a] = sc.old[si][a] - sc.old[sj][a];
            }
            let res = dot(&u[..r], &u[..r]) - s.value;
            sc.push(si, -alpha * res, &u[..r], pref);
            sc.push(sj, alpha * res, &u[..r], pref);
        }
        (LossKind::Bpr, Sample::Triple(t)) => {
            check_index(t.i, d)?;
            check_index(t.j, d)?;
            check_index(t.k, d)?;
            if t.j == t.k {
                return Err(Error::DegenerateSample(format!(
                    "triple with j = k = {}",
                    t.j
                )));
            }
            let si = sc.slot(x, t.i);
            let sj = sc.slot(x, t.j);
            let sk = sc.slot(x, t.k);
            let mut w = [0.0; MAX_RANK];
            for a in 0..r {
                w[a] = sc.old[sj][a] - sc.old[sk][a];
            }
            let xi = sc.old[si];
            let res = sigmoid(dot(&xi[..r], &w[..r])) - t.label();
            sc.push(si, -alpha * res, &w[..r], pref);
            sc.push(sj, -alpha * res, &xi[..r], pref);
            sc.push(sk, alpha * res, &xi[..r], pref);
        }
        (kind, _) => {
            return Err(Error::InvalidConfig(format!(
                "sample type does not match loss {kind:?}"
            )))
        }
    }

    // New rows from pre-step values.
    let n = sc.touched.n;
    let mut new = [[0.0; MAX_RANK]; 3];
    let mut changed = [false; 3];
    for s in 0..n {
        for a in 0..r {
            new[s][a] = sc.old[s][a] + sc.delta[s][a];
        }
        changed[s] = new[s][..r] != sc.old[s][..r];
        if changed[s] {
            x.write_row(sc.touched.idx[s], &new[s][..r]);
        }
    }

    let mut calls = 0;
    if let Some(p) = p.as_deref_mut() {
        for s in (0..n).filter(|&s| changed[s]) {
            kernel::smw_add_in_place(p, &new[s][..r]);
            calls += 1;
        }
        for s in (0..n).filter(|&s| changed[s]) {
            let tol = kernel::default_downdate_tol(p);
            kernel::smw_sub_in_place(p, &sc.old[s][..r], tol)?;
            calls += 1;
        }
    }
    Ok(StepInfo {
        touched: sc.touched,
        smw_calls: calls,
    })
}

/// One step on a [`FactorModel`]. A singular downdate is resolved by an
/// exact refresh of `P` from the updated `X`.
pub fn step(model: &mut FactorModel, kind: LossKind, sample: &Sample, mode: StepMode) -> Result<StepInfo> {
    let (x, p) = model.parts_mut();
    let p = if mode.scaled { Some(p) } else { None };
    match apply_step(x, p, kind, sample, mode.alpha) {
        Ok(info) => {
            model.record_smw_calls(info.smw_calls)?;
            Ok(info)
        }
        Err(Error::SingularDowndate { .. }) => {
            model.refresh_preconditioner()?;
            // The failed sequence still touched these rows; report them so
            // callers can check finiteness.
            let mut info = StepInfo::default();
            info.touched = touched_rows(sample);
            Ok(info)
        }
        Err(e) => Err(e),
    }
}

fn touched_rows(sample: &Sample) -> Touched {
    let mut t = Touched::default();
    let idx: &[usize] = match sample {
        Sample::Element(s) => &[s.i, s.j],
        Sample::Triple(s) => &[s.i, s.j, s.k],
    };
    for &i in idx {
        if !t.as_slice().contains(&i) {
            t.idx[t.n] = i;
            t.n += 1;
        }
    }
    t
}

pub fn rmse_step(model: &mut FactorModel, s: &ElementSample, mode: StepMode) -> Result<()> {
    step(model, LossKind::Rmse, &Sample::Element(*s), mode).map(|_| ())
}

pub fn xent_step(model: &mut FactorModel, s: &ElementSample, mode: StepMode) -> Result<()> {
    step(model, LossKind::Xent, &Sample::Element(*s), mode).map(|_| ())
}

pub fn edm_step(model: &mut FactorModel, s: &ElementSample, mode: StepMode) -> Result<()> {
    step(model, LossKind::Edm, &Sample::Element(*s), mode).map(|_| ())
}

pub fn bpr_step(model: &mut FactorModel, t: &TripleSample, mode: StepMode) -> Result<()> {
    step(model, LossKind::Bpr, &Sample::Triple(*t), mode).map(|_| ())
}

/// Non-personalized ranking update on a score vector:
/// `x_j -= alpha res x_j`, `x_k += alpha res x_k` with
/// `res = sigmoid(x_j - x_k) - Y`. Only `j` and `k` change; `i` is ignored.
pub fn np_step(x: &mut [f64], t: &TripleSample, alpha: f64) {
    if t.j == t.k {
        return;
    }
    let (xj, xk) = (x[t.j], x[t.k]);
    let res = sigmoid(xj - xk) - t.label();
    x[t.j] = xj - alpha * res * xj;
    x[t.k] = xk + alpha * res * xk;
}

/// The per-sample training loss whose gradient the step rule follows:
/// `res^2 / 2` (RMSE), cross-entropy (XENT), `res^2 / 4` (EDM) and the
/// logistic loss `softplus(z) - Y z` (BPR).
pub fn sample_loss<S: RowStore + ?Sized>(x: &S, kind: LossKind, sample: &Sample) -> Result<f64> {
    let r = x.rank();
    let mut a = [0.0; MAX_RANK];
    let mut b = [0.0; MAX_RANK];
    let mut c = [0.0; MAX_RANK];
    match (kind, sample) {
        (LossKind::Rmse | LossKind::Xent | LossKind::Edm, Sample::Element(s)) => {
            check_index(s.i, x.rows())?;
            check_index(s.j, x.rows())?;
            x.read_row(s.i, &mut a[..r]);
            x.read_row(s.j, &mut b[..r]);
            Ok(match kind {
                LossKind::Rmse => 0.5 * (dot(&a[..r], &b[..r]) - s.value).powi(2),
                LossKind::Xent => {
                    let z = dot(&a[..r], &b[..r]);
                    softplus(z) - s.value * z
                }
                _ => {
                    let dist: f64 = (0..r).map(|t| (a[t] - b[t]).powi(2)).sum();
                    0.25 * (dist - s.value).powi(2)
                }
            })
        }
        (LossKind::Bpr, Sample::Triple(t)) => {
            for &i in &[t.i, t.j, t.k] {
                check_index(i, x.rows())?;
            }
            x.read_row(t.i, &mut a[..r]);
            x.read_row(t.j, &mut b[..r]);
            x.read_row(t.k, &mut c[..r]);
            let z: f64 = (0..r).map(|q| a[q] * (b[q] - c[q])).sum();
            Ok(softplus(z) - t.label() * z)
        }
        (kind, _) => Err(Error::InvalidConfig(format!(
            "sample type does not match loss {kind:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gaussian_matrix;

    fn model(rows: &[Vec<f64>]) -> FactorModel {
        FactorModel::new(FactorMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        for z in [-30.0, -2.5, 0.3, 7.0, 700.0, -700.0] {
            assert!((sigmoid(z) - (1.0 - sigmoid(-z))).abs() < 1e-15);
        }
        assert!((1.0 - sigmoid(100.0)).abs() <= 1e-15);
        assert!(sigmoid(-745.0) >= 0.0 && sigmoid(745.0) <= 1.0);
    }

    #[test]
    fn rmse_zero_residual_is_noop() {
        let mut m = FactorModel::new(gaussian_matrix(5, 2, 1.0, 1)).unwrap();
        let v = dot(m.x().row(1), m.x().row(3));
        let (x0, p0) = (m.x().clone(), m.p().clone());
        rmse_step(&mut m, &ElementSample { i: 1, j: 3, value: v }, StepMode::scaled(0.3)).unwrap();
        assert_eq!(m.x(), &x0);
        assert_eq!(m.p(), &p0);
    }

    #[test]
    fn rmse_plain_hand_example() {
        let mut m = model(&[vec![1.0], vec![1.0]]);
        rmse_step(&mut m, &ElementSample { i: 0, j: 1, value: 0.0 }, StepMode::plain(0.1)).unwrap();
        assert_eq!(m.x().to_rows(), vec![vec![0.9], vec![0.9]]);
    }

    #[test]
    fn xent_zero_residual_is_noop() {
        let mut m = model(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let x0 = m.x().clone();
        xent_step(&mut m, &ElementSample { i: 0, j: 1, value: 0.5 }, StepMode::scaled(1.0)).unwrap();
        assert_eq!(m.x(), &x0);
    }

    #[test]
    fn edm_hand_example_and_degenerate() {
        let mut m = model(&[vec![1.0], vec![0.0]]);
        // X^T X = 1 keeps P valid, but the plain step does not use it.
        edm_step(&mut m, &ElementSample { i: 0, j: 1, value: 0.0 }, StepMode::plain(0.1)).unwrap();
        let rows = m.x().to_rows();
        assert!((rows[0][0] - 0.9).abs() < 1e-15 && (rows[1][0] - 0.1).abs() < 1e-15);
        let err = edm_step(&mut m, &ElementSample { i: 1, j: 1, value: 0.0 }, StepMode::plain(0.1));
        assert!(matches!(err, Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn bpr_hand_example() {
        let mut m = model(&[vec![1.0], vec![1.0], vec![1.0]]);
        let t = TripleSample { i: 0, j: 1, k: 2, y: true };
        bpr_step(&mut m, &t, StepMode::plain(0.2)).unwrap();
        let rows = m.x().to_rows();
        assert_eq!(rows[0][0], 1.0);
        assert!((rows[1][0] - 1.1).abs() < 1e-15);
        assert!((rows[2][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn bpr_saturated_is_tiny() {
        let mut m = model(&[vec![10.0], vec![5.0], vec![-5.0]]);
        let x0 = m.x().clone();
        bpr_step(&mut m, &TripleSample { i: 0, j: 1, k: 2, y: true }, StepMode::plain(0.5)).unwrap();
        assert!(m.x().add_scaled(&x0, -1.0).frobenius() <= 1e-12);
    }

    #[test]
    fn bpr_rejects_equal_j_k() {
        let mut m = model(&[vec![1.0], vec![1.0]]);
        let t = TripleSample { i: 0, j: 1, k: 1, y: true };
        assert!(matches!(
            bpr_step(&mut m, &t, StepMode::plain(0.1)),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn np_step_hand_example() {
        let mut x = vec![7.0, 1.0, 1.0];
        np_step(&mut x, &TripleSample { i: 0, j: 1, k: 2, y: true }, 0.1);
        assert_eq!(x[0], 7.0);
        assert!((x[1] - 1.05).abs() < 1e-15 && (x[2] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn scaled_step_keeps_exact_preconditioner() {
        let mut m = FactorModel::new(gaussian_matrix(8, 3, 1.0, 2)).unwrap();
        rmse_step(&mut m, &ElementSample { i: 2, j: 5, value: 0.7 }, StepMode::scaled(0.2)).unwrap();
        assert!(m.preconditioner_error().unwrap() < 1e-10);
        rmse_step(&mut m, &ElementSample { i: 4, j: 4, value: -0.3 }, StepMode::scaled(0.2)).unwrap();
        assert!(m.preconditioner_error().unwrap() < 1e-10);
        bpr_step(&mut m, &TripleSample { i: 1, j: 1, k: 6, y: false }, StepMode::scaled(0.5)).unwrap();
        assert!(m.preconditioner_error().unwrap() < 1e-10);
    }
}
