//! Randomized audit of the local descent inequalities.
//!
//! Each trial draws a ground truth `Z` with a geometric spectrum of the
//! requested condition number, then an `X` inside the ball
//! `||X X^T - Z Z^T||_F <= rho lambda_min(Z^T Z)` found by bisection along a
//! random direction. Every inequality is evaluated at its literal constant;
//! the report also carries the observed extremes so a failing constant can
//! be compared with what the instances actually reach.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::{self, Spectrum};
use crate::error::{Error, Result};
use crate::kernel;
use crate::matrix::FactorMatrix;
use crate::model::{self, TheoryRegion};

#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub d: usize,
    pub r: usize,
    pub trials: usize,
    pub kappas: Vec<f64>,
    pub rho: f64,
    /// Radius multiplier for `||V||_X <= C sqrt(f)`.
    pub c: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            d: 20,
            r: 3,
            trials: 200,
            kappas: vec![1.0, 1e4, 1e6],
            rho: 0.1,
            c: 1.0,
            seed: 0,
        }
    }
}

/// Checks and violations of one inequality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub checked: u64,
    pub violations: u64,
}

impl Tally {
    fn record(&mut self, holds: bool) {
        self.checked += 1;
        self.violations += u64::from(!holds);
    }
}

/// Audit results for one condition number.
#[derive(Clone, Debug, PartialEq)]
pub struct KappaAudit {
    pub kappa: f64,
    /// `13 f <= (||grad f||_X^*)^2`.
    pub grad_lower: Tally,
    /// `(||grad f||_X^*)^2 <= 16 f`.
    pub grad_upper: Tally,
    /// Second-order bound on `f(X + V)` with `L_X`.
    pub local_descent: Tally,
    /// Second-order bound on `g_k(X + V)`, random `V`.
    pub region_taylor: Tally,
    /// The same bound along `V = -alpha SG(X) (X^T X)^{-1}`.
    pub step_taylor: Tally,
    /// Lower bound on `<grad g_k, grad f (X^T X)^{-1}>`.
    pub inner_bound: Tally,
    /// `||SG(X)||_X^* <= 8 d^2 sqrt(g_max) ||X X^T - Z Z^T||_F`.
    pub sg_norm: Tally,
    /// Exhaustive average of `SG` equals `grad f` to `1e-10` relative.
    pub sg_mean: Tally,
    /// Not counted as violations: the inner-product bound with the right
    /// side scaled by 8.
    pub inner_bound_x8: Tally,
    /// Instances with `max g_k > g_max`, skipped by the `SG` norm check.
    pub sg_out_of_region: u64,
    /// Extremes of `(||grad f||_X^*)^2 / f`.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl KappaAudit {
    fn new(kappa: f64) -> Self {
        KappaAudit {
            kappa,
            grad_lower: Tally::default(),
            grad_upper: Tally::default(),
            local_descent: Tally::default(),
            region_taylor: Tally::default(),
            step_taylor: Tally::default(),
            inner_bound: Tally::default(),
            sg_norm: Tally::default(),
            sg_mean: Tally::default(),
            inner_bound_x8: Tally::default(),
            sg_out_of_region: 0,
            min_ratio: f64::INFINITY,
            max_ratio: 0.0,
        }
    }

    /// Audited inequalities, by name.
    pub fn tallies(&self) -> [(&'static str, Tally); 8] {
        [
            ("gradient lower 13f <= |grad f|^2", self.grad_lower),
            ("gradient upper |grad f|^2 <= 16f", self.grad_upper),
            ("local descent bound", self.local_descent),
            ("taylor bound in region", self.region_taylor),
            ("taylor bound along step", self.step_taylor),
            ("inner product bound", self.inner_bound),
            ("sg dual norm bound", self.sg_norm),
            ("sg mean equals gradient", self.sg_mean),
        ]
    }

    pub fn violations(&self) -> u64 {
        self.tallies().iter().map(|(_, t)| t.violations).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub per_kappa: Vec<KappaAudit>,
}

impl AuditReport {
    pub fn violations(&self) -> u64 {
        self.per_kappa.iter().map(KappaAudit::violations).sum()
    }

    /// Human-readable summary, one line per inequality and condition number.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in &self.per_kappa {
            out.push(format!("kappa = {:e}", k.kappa));
            for (name, t) in k.tallies() {
                out.push(format!("  {name:<32} {:>6} violations / {} checks", t.violations, t.checked));
            }
            if k.min_ratio.is_finite() {
                out.push(format!(
                    "  observed |grad f|^2 / f in [{:.4}, {:.4}]",
                    k.min_ratio, k.max_ratio
                ));
            }
            out.push(format!(
                "  inner product bound scaled by 8: {} violations / {} checks",
                k.inner_bound_x8.violations, k.inner_bound_x8.checked
            ));
            if k.sg_out_of_region > 0 {
                out.push(format!("  sg norm skipped (g above g_max): {}", k.sg_out_of_region));
            }
        }
        out
    }
}

fn gaussian(d: usize, r: usize, rng: &mut ChaCha8Rng) -> FactorMatrix {
    FactorMatrix::from_fn(d, r, |_, _| rng.sample(StandardNormal))
}

/// `r` values from 1 down to `1 / kappa`, evenly spaced in log scale.
pub fn geometric_spectrum(r: usize, kappa: f64) -> Result<Spectrum> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidConfig(format!("kappa must be >= 1, got {kappa}")));
    }
    let values = (0..r)
        .map(|a| if r == 1 { 1.0 } else { kappa.powf(-(a as f64) / (r - 1) as f64) })
        .collect();
    Spectrum::new(values)
}

/// `X = Z + c D` with `||X X^T - Z Z^T||_F` just below `radius`.
pub fn perturb_into_ball(z: &FactorMatrix, dir: &FactorMatrix, radius: f64) -> Result<FactorMatrix> {
    let m = z.outer_gram();
    let err = |c: f64| -> Result<f64> { Ok(model::full_loss(&z.add_scaled(dir, c), &m)?.sqrt()) };
    let (mut lo, mut hi) = (0.0, 1.0);
    while err(hi)? < radius {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidConfig("perturbation direction does not leave the ball".into()));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if err(mid)? < radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(z.add_scaled(dir, lo))
}

/// `V` rescaled so that its local norm equals `target`.
fn with_local_norm(v: FactorMatrix, x: &FactorMatrix, target: f64) -> Result<FactorMatrix> {
    let n = model::local_norm(&v, x)?;
    Ok(if n > 0.0 { v.scaled(target / n) } else { v })
}

fn with_dual_norm(v: FactorMatrix, x: &FactorMatrix, target: f64) -> Result<FactorMatrix> {
    let n = model::local_dual_norm(&v, x)?;
    Ok(if n > 0.0 { v.scaled(target / n) } else { v })
}

/// Runs every check on `trials` instances per condition number.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport> {
    let AuditConfig { d, r, trials, rho, c, .. } = *config;
    if r == 0 || r > d {
        return Err(Error::InvalidConfig(format!("need 1 <= r <= d, got r = {r}, d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut per_kappa = Vec::new();
    for &kappa in &config.kappas {
        let spectrum = geometric_spectrum(r, kappa)?;
        let mut audit = KappaAudit::new(kappa);
        for trial in 0..trials {
            let z = datagen::gen_low_rank_factors(d, &spectrum, rng.random())?.z;
            let region = TheoryRegion::new(rho, &z, c)?;
            let t: f64 = rng.random_range(0.05..1.0);
            let x = perturb_into_ball(&z, &gaussian(d, r, &mut rng), t * rho * region.lambda_min)?;
            let m = z.outer_gram();
            let f = model::full_loss(&x, &m)?;

            let v = gaussian(d, r, &mut rng);
            let v = with_local_norm(v, &x, rng.random_range(0.0..1.0) * c * f.sqrt())?;
            let rep = model::check_function_descent(&x, &z, &v, &region)?;
            audit.grad_lower.record(rep.lower_holds);
            audit.grad_upper.record(rep.upper_holds);
            audit.local_descent.record(rep.taylor_holds);
            if rep.ratio.is_finite() {
                audit.min_ratio = audit.min_ratio.min(rep.ratio);
                audit.max_ratio = audit.max_ratio.max(rep.ratio);
            }

            let w = gaussian(d, r, &mut rng);
            let w = with_dual_norm(w, &x, rng.random_range(0.0..0.49))?;
            // a scaled SG direction at a random pair
            let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
            let p = kernel::sym_inverse(&kernel::gram(&x))?;
            let step = model::sg(&x, &m, i, j)?.right_mul(p.as_slice()).scaled(-1.0);
            let step = with_dual_norm(step, &x, rng.random_range(0.0..0.1))?;
            for k in 0..d {
                let rep = model::check_coherence_descent(&x, &z, k, &w, &region)?;
                audit.region_taylor.record(rep.taylor_holds);
                audit.inner_bound.record(rep.bound_holds);
                audit.inner_bound_x8.record(rep.scaled_bound_holds);
                let rep = model::check_coherence_descent(&x, &z, k, &step, &region)?;
                audit.step_taylor.record(rep.taylor_holds);
            }

            let g = model::max_coherence_g(&x)?.max(model::max_coherence_g(&z)?);
            if g > region.g_max {
                audit.sg_out_of_region += 1;
            } else {
                let bound = 8.0 * (d * d) as f64 * region.g_max.sqrt() * f.sqrt();
                for i in 0..d {
                    for j in 0..d {
                        let n = model::sg_dual_norm(&x, &m, i, j)?;
                        audit.sg_norm.record(n <= bound * (1.0 + 1e-9));
                    }
                }
            }

            if trial == 0 {
                audit.sg_mean.record(sg_mean_matches(&x, &m, 1e-10)?);
            }
        }
        per_kappa.push(audit);
    }
    Ok(AuditReport { config: config.clone(), per_kappa })
}

/// `(1 / d^2) sum_{i,j} SG_ij(X)` against `grad f(X)`, relative to `||grad f||`.
pub fn sg_mean_matches(x: &FactorMatrix, m: &crate::matrix::DenseMatrix, tol: f64) -> Result<bool> {
    let d = x.rows();
    let mut acc = FactorMatrix::zeros(d, x.rank());
    for i in 0..d {
        for j in 0..d {
            acc = acc.add_scaled(&model::sg(x, m, i, j)?, 1.0);
        }
    }
    let mean = acc.scaled(1.0 / (d * d) as f64);
    let grad = model::full_grad(x, m)?;
    let diff = mean.add_scaled(&grad, -1.0).frobenius();
    Ok(diff <= tol * grad.frobenius().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_spectrum_endpoints() {
        let s = geometric_spectrum(3, 1e4).unwrap();
        assert_eq!(s.values()[0], 1.0);
        assert!((s.values()[2] - 1e-4).abs() < 1e-18);
        assert!((s.condition_number() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn ball_instance_inside() {
        let spectrum = geometric_spectrum(3, 10.0).unwrap();
        let z = datagen::gen_low_rank_factors(12, &spectrum, 1).unwrap().z;
        let region = TheoryRegion::new(0.1, &z, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = perturb_into_ball(&z, &gaussian(12, 3, &mut rng), 0.5 * 0.1 * region.lambda_min).unwrap();
        assert!(region.contains(&x, &z).unwrap());
        let e = model::full_loss(&x, &z.outer_gram()).unwrap().sqrt();
        assert!((e / (0.05 * region.lambda_min) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let cfg = AuditConfig { trials: 0, ..AuditConfig::default() };
        let rep = run_audit(&cfg).unwrap();
        assert_eq!(rep.violations(), 0);
        assert!(rep.per_kappa.iter().all(|k| k.grad_lower.checked == 0));
    }
}
