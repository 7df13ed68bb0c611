//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scaledsgd::audit::{self, AuditConfig};
use scaledsgd::datagen::Spectrum;
use scaledsgd::engine::{self, Dataset, RunConfig};
use scaledsgd::eval;
use scaledsgd::experiments::{self, CfSpec, EdmSpec, SynthSpec};
use scaledsgd::loss::{self, ElementSample, LossKind, Sample, StepMode, TripleSample};
use scaledsgd::matrix::{DenseMatrix, FactorMatrix};
use scaledsgd::model::{self, gaussian_matrix, FactorModel};
use scaledsgd::parallel::{self, ParallelConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const WELL: [f64; 3] = [2.0, 2.0, 2.0];
const ILL: [f64; 3] = [10.0, 1e-1, 1e-3];

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        self.details.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn spectrum(v: &[f64]) -> Spectrum {
    Spectrum::new(v.to_vec()).unwrap()
}

fn synth(values: &[f64], loss: LossKind, alpha: f64, seed: u64) -> experiments::SynthOutcome {
    let mut spec = SynthSpec::new(30, spectrum(values), alpha, 100.0, seed);
    spec.loss = loss;
    experiments::run_synth(&spec).unwrap()
}

fn within(budget: Duration, start: Instant, out: &mut Outcome) {
    let t = start.elapsed();
    out.check(t < budget, format!("runtime {:.2?} < {budget:?}", t));
}

fn c1() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    for seed in SEEDS {
        let s = synth(&WELL, LossKind::Rmse, 0.3, seed);
        for r in &s.runs {
            let rel = r.relative_loss();
            o.check(rel <= 1e-8, format!("seed {seed} {}: relative loss {rel:.3e} <= 1e-8", r.label()));
        }
    }
    within(Duration::from_secs(10), start, &mut o);
    o
}

fn c2() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    for seed in SEEDS {
        let s = synth(&ILL, LossKind::Rmse, 0.3, seed);
        let sc = s.run(true).unwrap().relative_loss();
        let pl = s.run(false).unwrap().relative_loss();
        o.check(sc <= 1e-8, format!("seed {seed} scaled: relative loss {sc:.3e} <= 1e-8"));
        o.check(pl >= 1e-3, format!("seed {seed} plain: relative loss {pl:.3e} >= 1e-3"));
    }
    within(Duration::from_secs(10), start, &mut o);
    o
}

fn c3() -> Outcome {
    let mut o = Outcome::new();
    for seed in SEEDS {
        let e = experiments::run_edm(&EdmSpec { seed, ..EdmSpec::default() }).unwrap();
        let sc = e.run(true).unwrap().final_loss();
        let pl = e.run(false).unwrap().final_loss();
        o.check(
            sc * 100.0 <= pl,
            format!("seed {seed}: scaled {sc:.3e} at least 100x below plain {pl:.3e} (kappa {:.2})", e.kappa),
        );
    }
    o
}

fn c4() -> Outcome {
    let mut o = Outcome::new();
    for seed in SEEDS {
        let s = synth(&WELL, LossKind::Xent, 1.0, seed);
        for r in &s.runs {
            let rel = r.relative_loss();
            o.check(rel <= 1e-6, format!("seed {seed} kappa 1 {}: relative loss {rel:.3e} <= 1e-6", r.label()));
        }
        let s = synth(&ILL, LossKind::Xent, 1.0, seed);
        let sc = s.run(true).unwrap().relative_loss();
        let pl = s.run(false).unwrap().relative_loss();
        o.check(sc <= 1e-6, format!("seed {seed} kappa 1e4 scaled: relative loss {sc:.3e} <= 1e-6"));
        o.check(pl >= 1e-2, format!("seed {seed} kappa 1e4 plain: relative loss {pl:.3e} >= 1e-2"));
    }
    o
}

fn c5() -> Outcome {
    let mut o = Outcome::new();
    for seed in SEEDS {
        for (name, values) in [("well", [10.0, 10.0, 10.0]), ("ill", ILL)] {
            let mut spec = SynthSpec::new(30, spectrum(&values), 0.15, 200.0, seed);
            spec.r = 5;
            spec.snr_db = Some(15.0);
            spec.alpha_plain = Some(0.01);
            let s = experiments::run_synth(&spec).unwrap();
            let floor = s.noise_floor.unwrap();
            let best = |scaled: bool| {
                s.run(scaled).unwrap().output.trace.rows().iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min)
            };
            let sc = best(true);
            o.check(
                sc <= 2.0 * floor,
                format!("seed {seed} {name} scaled: best {sc:.4e} within 2x of floor {floor:.4e} ({:.3}x)", sc / floor),
            );
            if name == "ill" {
                let pl = best(false);
                o.check(
                    pl > 2.0 * floor,
                    format!("seed {seed} {name} plain: best {pl:.4e} stays above 2x floor ({:.3}x)", pl / floor),
                );
            }
        }
    }
    o
}

fn c6() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    for seed in SEEDS {
        let spec = CfSpec::synthetic(500, spectrum(&ILL), seed);
        let cf = experiments::run_cf(&spec).unwrap();
        let sc = cf.samples_to_beat_np(true);
        let pl = cf.samples_to_beat_np(false);
        o.check(
            matches!((sc, pl), (Some(a), Some(b)) if a < b),
            format!("seed {seed}: NP-Maximum {:.4}, scaled beats it after {sc:?} samples, plain after {pl:?}", cf.np_maximum),
        );
    }
    within(Duration::from_secs(120), start, &mut o);
    o
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

// 3x3 inverse by cofactors.
fn inverse3(m: &[f64]) -> Vec<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0 * 3 + c0] * m[r1 * 3 + c1] - m[r0 * 3 + c1] * m[r1 * 3 + c0];
    let cof = [
        c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1),
        -c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1),
        c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1),
    ];
    let det = m[0] * cof[0] + m[1] * cof[1] + m[2] * cof[2];
    // inverse is the transposed cofactor matrix over det
    (0..9).map(|k| cof[(k % 3) * 3 + k / 3] / det).collect()
}

fn gram3(x: &FactorMatrix) -> Vec<f64> {
    let mut g = vec![0.0; 9];
    for i in 0..x.rows() {
        for a in 0..3 {
            for b in 0..3 {
                g[a * 3 + b] += x.get(i, a) * x.get(i, b);
            }
        }
    }
    g
}

fn c7() -> Outcome {
    let mut o = Outcome::new();

    // (a) SMW chain
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 50;
    let m = FactorMatrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0)).outer_gram();
    let mut model = FactorModel::init_gaussian(d, 3, 1.0, 2).unwrap();
    model.set_refresh_period(u64::MAX);
    while model.smw_calls_since_refresh() < 1000 {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
        let s = Sample::Element(ElementSample { i, j, value: m.get(i, j) });
        loss::step(&mut model, LossKind::Rmse, &s, StepMode::scaled(0.05)).unwrap();
    }
    let drift = rel_err(model.p().as_slice(), &inverse3(&gram3(model.x())));
    o.check(drift <= 1e-6, format!("(a) after {} SMW calls: {drift:.2e} <= 1e-6", model.smw_calls_since_refresh()));
    model.refresh_preconditioner().unwrap();
    let fresh = rel_err(model.p().as_slice(), &inverse3(&gram3(model.x())));
    o.check(fresh <= 1e-10, format!("(a) after refresh: {fresh:.2e} <= 1e-10"));

    // (b) exhaustive average of SG
    let mut worst: f64 = 0.0;
    for d in 2..=8 {
        let x = gaussian_matrix(d, 2, 1.0, d as u64);
        let a = gaussian_matrix(d, d, 1.0, 50 + d as u64);
        let m = DenseMatrix::from_fn(d, |i, j| a.get(i, j) + a.get(j, i));
        let mut avg = vec![0.0; d * 2];
        let mut grad = vec![0.0; d * 2];
        for i in 0..d {
            for j in 0..d {
                let e: f64 = (0..2).map(|c| x.get(i, c) * x.get(j, c)).sum::<f64>() - m.get(i, j);
                for c in 0..2 {
                    avg[i * 2 + c] += 2.0 * e * x.get(j, c);
                    avg[j * 2 + c] += 2.0 * e * x.get(i, c);
                    grad[i * 2 + c] += 4.0 * e * x.get(j, c);
                }
            }
        }
        let mut acc = FactorMatrix::zeros(d, 2);
        for i in 0..d {
            for j in 0..d {
                acc = acc.add_scaled(&model::sg(&x, &m, i, j).unwrap(), 1.0 / (d * d) as f64);
            }
        }
        worst = worst.max(rel_err(acc.as_slice(), &grad)).max(rel_err(&avg, &grad));
        worst = worst.max(rel_err(model::full_grad(&x, &m).unwrap().as_slice(), &grad));
    }
    o.check(worst <= 1e-12, format!("(b) E[SG] vs grad f for d in 2..=8: {worst:.2e} <= 1e-12"));

    // (c) AUC against a brute-force loop
    let x = gaussian_matrix(40, 3, 1.0, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let triples: Vec<TripleSample> = (0..1000)
        .map(|_| {
            let (i, j) = (rng.random_range(0..40), rng.random_range(0..40));
            let k = (j + rng.random_range(1..40)) % 40;
            TripleSample { i, j, k, y: rng.random() }
        })
        .collect();
    let mut hits = 0;
    for t in &triples {
        let z: f64 = (0..3).map(|c| x.get(t.i, c) * (x.get(t.j, c) - x.get(t.k, c))).sum();
        hits += usize::from(if t.y { z > 0.0 } else { z <= 0.0 });
    }
    let got = eval::auc(&x, &triples).unwrap();
    o.check(got == hits as f64 / 1000.0, format!("(c) AUC {got} equals brute force {}", hits as f64 / 1000.0));

    // (d) finite differences
    let h = 1e-5;
    let x = gaussian_matrix(8, 3, 0.8, 9);
    let a = gaussian_matrix(8, 8, 1.0, 10);
    let m = DenseMatrix::from_fn(8, |i, j| a.get(i, j) + a.get(j, i));
    let fd = |f: &dyn Fn(&FactorMatrix) -> f64| {
        FactorMatrix::from_fn(8, 3, |i, c| {
            let mut p = x.clone();
            p.set(i, c, x.get(i, c) + h);
            let mut q = x.clone();
            q.set(i, c, x.get(i, c) - h);
            (f(&p) - f(&q)) / (2.0 * h)
        })
    };
    let mut worst: f64 = 0.0;
    let grad_f = fd(&|y| model::full_loss(y, &m).unwrap());
    worst = worst.max(rel_err(model::full_grad(&x, &m).unwrap().as_slice(), grad_f.as_slice()));
    for k in [0, 5] {
        let g = fd(&|y| model::coherence_g(y, k).unwrap());
        worst = worst.max(rel_err(model::grad_g(&x, k).unwrap().as_slice(), g.as_slice()));
    }
    let samples = [
        (LossKind::Rmse, Sample::Element(ElementSample { i: 1, j: 6, value: 0.2 })),
        (LossKind::Xent, Sample::Element(ElementSample { i: 2, j: 2, value: 0.7 })),
        (LossKind::Edm, Sample::Element(ElementSample { i: 0, j: 4, value: 1.5 })),
        (LossKind::Bpr, Sample::Triple(TripleSample { i: 3, j: 5, k: 7, y: false })),
    ];
    for (kind, s) in samples {
        let g = fd(&|y| loss::sample_loss(y, kind, &s).unwrap());
        let alpha = 1e-3;
        let mut y = x.clone();
        loss::apply_step(&mut y, None, kind, &s, alpha).unwrap();
        let step = y.add_scaled(&x, -1.0).scaled(-1.0 / alpha);
        worst = worst.max(rel_err(step.as_slice(), g.as_slice()));
    }
    o.check(worst <= 1e-5, format!("(d) analytic vs finite-difference gradients: {worst:.2e} <= 1e-5"));
    o
}

fn c8() -> Outcome {
    let mut o = Outcome::new();
    let start = Instant::now();
    let report = audit::run_audit(&AuditConfig::default()).unwrap();
    for k in &report.per_kappa {
        for (name, t) in k.tallies() {
            o.check(
                t.violations == 0,
                format!("kappa {:e} {name}: {} violations / {} checks", k.kappa, t.violations, t.checked),
            );
        }
        o.details.push(format!(
            "     kappa {:e}: observed |grad f|^2 / f in [{:.3}, {:.3}]; inner bound x8: {} violations",
            k.kappa, k.min_ratio, k.max_ratio, k.inner_bound_x8.violations
        ));
    }
    within(Duration::from_secs(30), start, &mut o);
    o
}

fn c9() -> Outcome {
    let mut o = Outcome::new();
    for seed in SEEDS {
        let (_, _, m) = scaledsgd::datagen::gen_low_rank(30, &spectrum(&ILL), seed).unwrap();
        let ds = Dataset::fully_observed(LossKind::Rmse, &m).unwrap();
        let model = FactorModel::init_gaussian(30, 3, 0.5, seed + 1000).unwrap();
        let mut cfg = RunConfig::new(0.3, 100.0, true, seed + 3000);
        cfg.reference = Some(m);
        let seq = engine::run(model.clone(), &ds, &cfg).unwrap();
        let four = parallel::run_parallel(model.clone(), &ds, &cfg, &ParallelConfig::with_workers(4)).unwrap();
        let a = seq.trace.last().unwrap().train_loss;
        let b = four.output.trace.last().unwrap().train_loss;
        let ratio = (a / b).max(b / a);
        o.check(
            four.stats.steps == cfg.total_steps(ds.len()) && ratio <= 10.0,
            format!("seed {seed}: 4 workers {b:.3e} vs sequential {a:.3e} (ratio {ratio:.2}) over {} steps", four.stats.steps),
        );
        let one = parallel::run_parallel(model, &ds, &cfg, &ParallelConfig::with_workers(1)).unwrap();
        let same_trace = one.output.trace.without_timing() == seq.trace.without_timing();
        let same_x = one
            .output
            .model
            .x()
            .as_slice()
            .iter()
            .zip(seq.model.x().as_slice())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        o.check(same_trace && same_x, format!("seed {seed}: 1 worker bitwise equal to sequential"));
    }
    o
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("RMSE well-conditioned, both converge", c1),
        ("RMSE ill-conditioned, scaled converges and plain stagnates", c2),
        ("EDM with outliers, scaled 100x lower", c3),
        ("1-bit completion, same pattern as RMSE", c4),
        ("noisy completion reaches 2x noise floor", c5),
        ("collaborative filtering beats NP-Maximum sooner", c6),
        ("oracle equivalences", c7),
        ("descent inequality audit", c8),
        ("parallel equivalence band", c9),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = f();
        println!(
            "criterion {} {}: {name} ({:.2?})",
            n + 1,
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed()
        );
        for d in &out.details {
            println!("    {d}");
        }
        failed += usize::from(!out.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
