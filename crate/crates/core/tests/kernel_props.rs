use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scaledsgd::kernel::{self, SmallSymMatrix};
use scaledsgd::loss::{self, ElementSample, LossKind, Sample, StepMode};
use scaledsgd::matrix::FactorMatrix;
use scaledsgd::model::{gaussian_matrix, FactorModel};

// Plain Gauss-Jordan with partial pivoting, independent of the crate's solver.
fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        for v in m[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            num += (x - y).powi(2);
            den += y * y;
        }
    }
    (num / den).sqrt()
}

// A = B^T B + shift I, well conditioned.
fn spd(r: usize, seed: u64) -> Vec<Vec<f64>> {
    let b = gaussian_matrix(r + 3, r, 1.0, seed);
    (0..r)
        .map(|i| {
            (0..r)
                .map(|j| {
                    let s: f64 = (0..r + 3).map(|k| b.get(k, i) * b.get(k, j)).sum();
                    s + if i == j { 0.5 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

fn to_sym(a: &[Vec<f64>]) -> SmallSymMatrix {
    SmallSymMatrix::from_rows(a).unwrap()
}

fn plus_outer(a: &[Vec<f64>], u: &[f64], s: f64) -> Vec<Vec<f64>> {
    a.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, v)| v + s * u[i] * u[j]).collect())
        .collect()
}

fn vec_strategy(r: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, r)
}

proptest! {
    #[test]
    fn smw_add_matches_inverse((r, seed, u) in (1usize..=6, any::<u64>())
        .prop_flat_map(|(r, s)| (Just(r), Just(s), vec_strategy(r))))
    {
        let a = spd(r, seed);
        let p = to_sym(&gauss_jordan_inverse(&a));
        let got = kernel::smw_add(&p, &u).to_rows();
        let want = gauss_jordan_inverse(&plus_outer(&a, &u, 1.0));
        prop_assert!(rel_diff(&got, &want) < 1e-9);
    }

    #[test]
    fn smw_add_then_sub_round_trips((r, seed, u) in (1usize..=6, any::<u64>())
        .prop_flat_map(|(r, s)| (Just(r), Just(s), vec_strategy(r))))
    {
        let a = spd(r, seed);
        let p = to_sym(&gauss_jordan_inverse(&a));
        let up = kernel::smw_add(&p, &u);
        let back = kernel::smw_sub(&up, &u, kernel::default_downdate_tol(&up)).unwrap();
        prop_assert!(rel_diff(&back.to_rows(), &p.to_rows()) < 1e-9);
    }

    #[test]
    fn smw_sub_matches_inverse_when_definite((r, seed, u) in (1usize..=6, any::<u64>())
        .prop_flat_map(|(r, s)| (Just(r), Just(s), vec_strategy(r))))
    {
        let a = spd(r, seed);
        // shrink u until A - u u^T keeps a comfortable margin
        let p = to_sym(&gauss_jordan_inverse(&a));
        let q = p.bilinear(&u, &u);
        let u: Vec<f64> = if q > 0.5 { u.iter().map(|v| v * (0.5 / q).sqrt()).collect() } else { u };
        let got = kernel::smw_sub(&p, &u, kernel::default_downdate_tol(&p)).unwrap().to_rows();
        let want = gauss_jordan_inverse(&plus_outer(&a, &u, -1.0));
        prop_assert!(rel_diff(&got, &want) < 1e-9);
    }

    #[test]
    fn smw_results_stay_symmetric((r, seed, u) in (2usize..=6, any::<u64>())
        .prop_flat_map(|(r, s)| (Just(r), Just(s), vec_strategy(r))))
    {
        let p = to_sym(&gauss_jordan_inverse(&spd(r, seed)));
        let rows = kernel::smw_add(&p, &u).to_rows();
        for i in 0..r {
            for j in 0..r {
                prop_assert_eq!(rows[i][j].to_bits(), rows[j][i].to_bits());
            }
        }
    }

    #[test]
    fn sym_inverse_matches_gauss_jordan(r in 1usize..=8, seed in any::<u64>()) {
        let a = spd(r, seed);
        let got = kernel::sym_inverse(&to_sym(&a)).unwrap().to_rows();
        prop_assert!(rel_diff(&got, &gauss_jordan_inverse(&a)) < 1e-10);
    }

    #[test]
    fn gram_eigenvalues_descending_nonnegative(d in 3usize..20, r in 1usize..=3, seed in any::<u64>()) {
        let x = gaussian_matrix(d, r, 1.0, seed);
        let ev = kernel::sym_eigenvalues(&kernel::gram(&x));
        prop_assert_eq!(ev.len(), r);
        for w in ev.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(ev[r - 1] > -1e-12);
    }
}

fn precond_rel_error(model: &FactorModel) -> f64 {
    let exact = gauss_jordan_inverse(&kernel::gram(model.x()).to_rows());
    rel_diff(&model.p().to_rows(), &exact)
}

#[test]
fn smw_chain_of_one_thousand_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 40;
    let m = FactorMatrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0)).outer_gram();
    let mut model = FactorModel::init_gaussian(d, 3, 1.0, 9).unwrap();
    model.set_refresh_period(u64::MAX);
    let mut calls = 0;
    while calls < 1000 {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
        let s = Sample::Element(ElementSample { i, j, value: m.get(i, j) });
        calls += loss::step(&mut model, LossKind::Rmse, &s, StepMode::scaled(0.05)).unwrap().smw_calls;
    }
    assert!(model.smw_calls_since_refresh() >= 1000);
    let drift = precond_rel_error(&model);
    assert!(drift <= 1e-6, "drift {drift:e}");
    model.refresh_preconditioner().unwrap();
    assert!(precond_rel_error(&model) <= 1e-10);
}

#[test]
fn ten_thousand_steps_then_refresh_multiplies_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 25;
    let m = FactorMatrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0)).outer_gram();
    let mut model = FactorModel::init_gaussian(d, 3, 1.0, 2).unwrap();
    for _ in 0..10_000 {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
        let s = Sample::Element(ElementSample { i, j, value: m.get(i, j) });
        loss::step(&mut model, LossKind::Rmse, &s, StepMode::scaled(0.02)).unwrap();
    }
    model.refresh_preconditioner().unwrap();
    let prod = model.p().matmul(&kernel::gram(model.x()));
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((prod[i * 3 + j] - want).abs() < 1e-10);
        }
    }
    let before = model.p().clone();
    model.refresh_preconditioner().unwrap();
    assert_eq!(model.p(), &before);
}
