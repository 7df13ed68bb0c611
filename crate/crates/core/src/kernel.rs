//! Small dense linear algebra on `r x r` symmetric matrices.
//!
//! The preconditioner `P = (X^T X)^{-1}` is kept current with rank-1
//! Sherman-Morrison updates, so a step that rewrites two rows of `X` costs
//! `O(r^2)` instead of an `O(d r^2)` Gram rebuild:
//!
//! ```text
//! (P^-1 + u u^T)^-1 = P - P u u^T P / (1 + u^T P u)
//! (P^-1 - u u^T)^-1 = P + P u u^T P / (1 - u^T P u)
//! ```
//!
//! The rank is small (3 to 5 in every experiment), so everything here is
//! plain dense loops over row-major storage. Ranks above [`MAX_RANK`] are
//! rejected.

use crate::error::{Error, Result};
use crate::matrix::FactorMatrix;

/// Largest supported factor rank.
pub const MAX_RANK: usize = 64;

/// Symmetric `r x r` matrix, row-major with both triangles stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallSymMatrix {
    order: usize,
    data: Vec<f64>,
}

impl SmallSymMatrix {
    pub fn zeros(order: usize) -> Self {
        assert!(order <= MAX_RANK, "rank {order} exceeds MAX_RANK");
        SmallSymMatrix {
            order,
            data: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = SmallSymMatrix::zeros(order);
        for a in 0..order {
            m.data[a * order + a] = 1.0;
        }
        m
    }

    pub fn scaled_identity(order: usize, s: f64) -> Self {
        let mut m = SmallSymMatrix::identity(order);
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = SmallSymMatrix::zeros(values.len());
        for (a, v) in values.iter().enumerate() {
            m.data[a * values.len() + a] = *v;
        }
        m
    }

    /// Builds from row-major data, symmetrizing as `(A + A^T) / 2`.
    pub fn from_row_major(order: usize, data: &[f64]) -> Result<Self> {
        if data.len() != order * order {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {order}x{order} matrix",
                data.len()
            )));
        }
        if order > MAX_RANK {
            return Err(Error::DimensionMismatch(format!(
                "rank {order} exceeds {MAX_RANK}"
            )));
        }
        let mut m = SmallSymMatrix {
            order,
            data: data.to_vec(),
        };
        m.symmetrize();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let order = rows.len();
        if rows.iter().any(|r| r.len() != order) {
            return Err(Error::DimensionMismatch("matrix is not square".into()));
        }
        SmallSymMatrix::from_row_major(order, &rows.concat())
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.order + b]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.order.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.order).map(|a| self.get(a, a)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out = self * u`.
    #[inline]
    pub fn mul_vec_into(&self, u: &[f64], out: &mut [f64]) {
        let r = self.order;
        for (a, o) in out.iter_mut().enumerate().take(r) {
            let row = &self.data[a * r..(a + 1) * r];
            *o = row.iter().zip(u).map(|(p, x)| p * x).sum();
        }
    }

    pub fn mul_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.order];
        self.mul_vec_into(u, &mut out);
        out
    }

    /// `u^T self v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let r = self.order;
        let mut acc = 0.0;
        for a in 0..r {
            let row = &self.data[a * r..(a + 1) * r];
            acc += u[a] * row.iter().zip(v).map(|(p, x)| p * x).sum::<f64>();
        }
        acc
    }

    pub fn matmul(&self, other: &SmallSymMatrix) -> Vec<f64> {
        let r = self.order;
        let mut out = vec![0.0; r * r];
        for a in 0..r {
            for b in 0..r {
                out[a * r + b] = (0..r).map(|c| self.get(a, c) * other.get(c, b)).sum();
            }
        }
        out
    }

    pub fn sub(&self, other: &SmallSymMatrix) -> SmallSymMatrix {
        SmallSymMatrix {
            order: self.order,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Replaces the matrix by `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        let r = self.order;
        for a in 0..r {
            for b in (a + 1)..r {
                let m = 0.5 * (self.data[a * r + b] + self.data[b * r + a]);
                self.data[a * r + b] = m;
                self.data[b * r + a] = m;
            }
        }
    }

    /// Adds `s * v v^T` in place.
    fn add_outer(&mut self, v: &[f64], s: f64) {
        let r = self.order;
        for a in 0..r {
            let va = s * v[a];
            for b in 0..r {
                self.data[a * r + b] += va * v[b];
            }
        }
    }
}

/// Default downdate guard: `1e-12 * trace(P)`.
pub fn default_downdate_tol(p: &SmallSymMatrix) -> f64 {
    1e-12 * p.trace()
}

/// In-place Sherman-Morrison update: `P <- (P^-1 + u u^T)^-1`.
pub fn smw_add_in_place(p: &mut SmallSymMatrix, u: &[f64]) {
    let r = p.order;
    debug_assert_eq!(u.len(), r);
    let mut pu = [0.0; MAX_RANK];
    p.mul_vec_into(u, &mut pu[..r]);
    let denom = 1.0 + u.iter().zip(&pu[..r]).map(|(a, b)| a * b).sum::<f64>();
    p.add_outer(&pu[..r], -1.0 / denom);
    p.symmetrize();
}

/// In-place Sherman-Morrison downdate: `P <- (P^-1 - u u^T)^-1`.
///
/// On [`Error::SingularDowndate`] the matrix is left untouched.
pub fn smw_sub_in_place(p: &mut SmallSymMatrix, u: &[f64], tol: f64) -> Result<()> {
    let r = p.order;
    debug_assert_eq!(u.len(), r);
    let mut pu = [0.0; MAX_RANK];
    p.mul_vec_into(u, &mut pu[..r]);
    let denom = 1.0 - u.iter().zip(&pu[..r]).map(|(a, b)| a * b).sum::<f64>();
    if denom <= tol || !denom.is_finite() {
        return Err(Error::SingularDowndate {
            denominator: denom,
            tol,
        });
    }
    p.add_outer(&pu[..r], 1.0 / denom);
    p.symmetrize();
    Ok(())
}

/// Returns `(P^-1 + u u^T)^-1`.
pub fn smw_add(p: &SmallSymMatrix, u: &[f64]) -> SmallSymMatrix {
    let mut out = p.clone();
    smw_add_in_place(&mut out, u);
    out
}

/// Returns `(P^-1 - u u^T)^-1`, or [`Error::SingularDowndate`] when
/// `1 - u^T P u <= tol`.
pub fn smw_sub(p: &SmallSymMatrix, u: &[f64], tol: f64) -> Result<SmallSymMatrix> {
    let mut out = p.clone();
    smw_sub_in_place(&mut out, u, tol)?;
    Ok(out)
}

/// Lower Cholesky factor `L` with `G = L L^T`, row-major.
pub fn cholesky(g: &SmallSymMatrix) -> Result<Vec<f64>> {
    let r = g.order;
    let mut l = vec![0.0; r * r];
    for j in 0..r {
        let mut diag = g.get(j, j);
        for k in 0..j {
            diag -= l[j * r + k] * l[j * r + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[j * r + j] = ljj;
        for i in (j + 1)..r {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l[i * r + k] * l[j * r + k];
            }
            l[i * r + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factorization.
pub fn sym_inverse(g: &SmallSymMatrix) -> Result<SmallSymMatrix> {
    let r = g.order;
    let l = cholesky(g)?;
    // L^{-1} by forward substitution, column by column.
    let mut linv = vec![0.0; r * r];
    for c in 0..r {
        for i in c..r {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * r + k] * linv[k * r + c];
            }
            linv[i * r + c] = s / l[i * r + i];
        }
    }
    // G^{-1} = L^{-T} L^{-1}
    let mut data = vec![0.0; r * r];
    for a in 0..r {
        for b in a..r {
            let v: f64 = (b..r).map(|k| linv[k * r + a] * linv[k * r + b]).sum();
            data[a * r + b] = v;
            data[b * r + a] = v;
        }
    }
    Ok(SmallSymMatrix { order: r, data })
}

/// `X^T X` for a `d x r` factor.
pub fn gram(x: &FactorMatrix) -> SmallSymMatrix {
    let r = x.rank();
    let mut g = SmallSymMatrix::zeros(r);
    for i in 0..x.rows() {
        let row = x.row(i);
        for a in 0..r {
            for b in a..r {
                g.data[a * r + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in (a + 1)..r {
            g.data[b * r + a] = g.data[a * r + b];
        }
    }
    g
}

/// Eigenvalues of a small symmetric matrix, descending.
pub fn sym_eigenvalues(g: &SmallSymMatrix) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(g.order, g.order, &g.data);
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Symmetric matrix power `G^t` for SPD `G` (used for `(X^T X)^{+-1/2}`).
pub fn sym_power(g: &SmallSymMatrix, t: f64) -> Result<SmallSymMatrix> {
    let r = g.order;
    let m = nalgebra::DMatrix::from_row_slice(r, r, &g.data);
    let eig = m.symmetric_eigen();
    if let Some((idx, &lam)) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .find(|(_, &l)| !(l > 0.0))
    {
        return Err(Error::NotPositiveDefinite {
            pivot: idx,
            value: lam,
        });
    }
    let mut data = vec![0.0; r * r];
    for k in 0..r {
        let w = eig.eigenvalues[k].powf(t);
        for a in 0..r {
            for b in 0..r {
                data[a * r + b] += w * eig.eigenvectors[(a, k)] * eig.eigenvectors[(b, k)];
            }
        }
    }
    SmallSymMatrix::from_row_major(r, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(r: usize, rng: &mut ChaCha8Rng) -> SmallSymMatrix {
        let x = FactorMatrix::from_fn(r + 4, r, |_, _| rng.random_range(-1.0..1.0));
        let mut g = gram(&x);
        for a in 0..r {
            g.data[a * r + a] += 0.1;
        }
        g
    }

    fn rel_err(a: &SmallSymMatrix, b: &SmallSymMatrix) -> f64 {
        a.sub(b).frobenius() / b.frobenius()
    }

    #[test]
    fn smw_add_scalar() {
        let p = SmallSymMatrix::identity(1);
        assert_eq!(smw_add(&p, &[1.0]).get(0, 0), 0.5);
    }

    #[test]
    fn smw_sub_scalar_inverts_add() {
        let p = SmallSymMatrix::diag(&[0.5]);
        let tol = default_downdate_tol(&p);
        assert_eq!(smw_sub(&p, &[1.0], tol).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn zero_vector_leaves_p_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_spd(3, &mut rng);
        assert_eq!(smw_add(&p, &[0.0; 3]), p);
        assert_eq!(smw_sub(&p, &[0.0; 3], 1e-12).unwrap(), p);
    }

    #[test]
    fn smw_add_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let g = random_spd(3, &mut rng);
            let p = sym_inverse(&g).unwrap();
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g2 = g.clone();
            g2.add_outer(&u, 1.0);
            let direct = sym_inverse(&g2).unwrap();
            assert!(rel_err(&smw_add(&p, &u), &direct) <= 1e-12);
        }
    }

    #[test]
    fn smw_sub_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = random_spd(3, &mut rng);
            let p = sym_inverse(&g).unwrap();
            let mut u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = (0.9 / p.bilinear(&u, &u)).sqrt();
            u.iter_mut().for_each(|v| *v *= s);
            let mut g2 = g.clone();
            g2.add_outer(&u, -1.0);
            let direct = sym_inverse(&g2).unwrap();
            let down = smw_sub(&p, &u, default_downdate_tol(&p)).unwrap();
            assert!(rel_err(&down, &direct) <= 1e-10);
        }
    }

    #[test]
    fn singular_downdate_is_reported() {
        let p = SmallSymMatrix::identity(2);
        let err = smw_sub(&p, &[1.0, 0.0], default_downdate_tol(&p)).unwrap_err();
        assert!(matches!(err, Error::SingularDowndate { .. }));
    }

    #[test]
    fn sym_inverse_examples() {
        assert_eq!(
            sym_inverse(&SmallSymMatrix::identity(3)).unwrap(),
            SmallSymMatrix::identity(3)
        );
        let inv = sym_inverse(&SmallSymMatrix::diag(&[2.0, 4.0])).unwrap();
        assert!(rel_err(&inv, &SmallSymMatrix::diag(&[0.5, 0.25])) < 1e-15);
    }

    #[test]
    fn sym_inverse_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_spd(3, &mut rng);
        let prod = g.matmul(&sym_inverse(&g).unwrap());
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((prod[a * 3 + b] - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn sym_inverse_rejects_indefinite() {
        let g = SmallSymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            sym_inverse(&g),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn gram_examples() {
        let x = FactorMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(gram(&x), SmallSymMatrix::identity(2));
        let x = FactorMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(
            gram(&x).to_rows(),
            vec![vec![1.0, 2.0], vec![2.0, 4.0]]
        );
    }

    #[test]
    fn gram_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = FactorMatrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let g = gram(&x);
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for i in 0..30 {
                    s += x.get(i, a) * x.get(i, b);
                }
                assert!((g.get(a, b) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sym_power_half_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_spd(3, &mut rng);
        let h = sym_power(&g, 0.5).unwrap();
        let back = SmallSymMatrix::from_row_major(3, &h.matmul(&h)).unwrap();
        assert!(rel_err(&back, &g) < 1e-12);
    }
}
