//! End-to-end experiment setups: synthetic RMSE / 1-bit completion (with
//! optional noise), EDM completion and item-item collaborative filtering.
//!
//! Seeds are split per role so that both algorithms of a comparison share
//! the same ground truth, initial point and sampling stream.

use std::path::PathBuf;

use crate::datagen::{self, Spectrum};
use crate::engine::{self, Dataset, RunConfig, RunOutput};
use crate::error::{Error, Result};
use crate::eval::{self, NpConfig};
use crate::ingest;
use crate::loss::{ElementSample, LossKind, TripleSample};
use crate::matrix::{DenseMatrix, FactorMatrix};
use crate::model::{FactorModel, PrecondInit};
use crate::parallel::{self, ParallelConfig};

const TRUTH_SEED: u64 = 0;
const INIT_SEED: u64 = 1_000;
const NOISE_SEED: u64 = 2_000;
const SAMPLE_SEED: u64 = 3_000;
const SPLIT_SEED: u64 = 4_000;

/// Which algorithms to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Algo {
    Scaled,
    Plain,
    #[default]
    Both,
}

impl Algo {
    pub fn modes(self) -> &'static [bool] {
        match self {
            Algo::Scaled => &[true],
            Algo::Plain => &[false],
            Algo::Both => &[true, false],
        }
    }
}

/// One algorithm's run within an experiment.
#[derive(Clone, Debug)]
pub struct AlgoRun {
    pub scaled: bool,
    pub alpha: f64,
    pub output: RunOutput,
}

impl AlgoRun {
    pub fn label(&self) -> &'static str {
        if self.scaled {
            "scaled"
        } else {
            "plain"
        }
    }

    pub fn initial_loss(&self) -> f64 {
        self.output.trace.first().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.output.trace.last().map_or(f64::NAN, |r| r.train_loss)
    }

    /// Final over initial trace loss.
    pub fn relative_loss(&self) -> f64 {
        self.final_loss() / self.initial_loss()
    }
}

fn execute(
    model: FactorModel,
    dataset: &Dataset,
    config: &RunConfig,
    workers: usize,
) -> Result<RunOutput> {
    if workers <= 1 {
        engine::run(model, dataset, config)
    } else {
        let p = ParallelConfig::with_workers(workers);
        Ok(parallel::run_parallel(model, dataset, config, &p)?.output)
    }
}

/// Synthetic completion of `M = U S U^T` from every entry.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub d: usize,
    /// Search rank.
    pub r: usize,
    pub spectrum: Spectrum,
    pub loss: LossKind,
    pub alpha: f64,
    /// Overrides `alpha` for the plain run when set.
    pub alpha_plain: Option<f64>,
    pub epochs: f64,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub init_sigma: f64,
    pub precond_init: PrecondInit,
    pub algo: Algo,
    pub workers: usize,
}

impl SynthSpec {
    pub fn new(d: usize, spectrum: Spectrum, alpha: f64, epochs: f64, seed: u64) -> Self {
        SynthSpec {
            d,
            r: spectrum.rank(),
            spectrum,
            loss: LossKind::Rmse,
            alpha,
            alpha_plain: None,
            epochs,
            snr_db: None,
            seed,
            init_sigma: 0.5,
            precond_init: PrecondInit::Exact,
            algo: Algo::Both,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutcome {
    /// The noiseless ground truth.
    pub truth: DenseMatrix,
    /// The matrix whose entries are observed (noisy when an SNR is set).
    pub observed: DenseMatrix,
    /// Noise floor of the observed matrix at the search rank, when noisy.
    pub noise_floor: Option<f64>,
    pub runs: Vec<AlgoRun>,
}

impl SynthOutcome {
    pub fn run(&self, scaled: bool) -> Option<&AlgoRun> {
        self.runs.iter().find(|r| r.scaled == scaled)
    }
}

/// Noiseless runs trace `f(X) = ||X X^T - M||_F^2`; noisy runs trace the
/// training RMSE `(1 / 2|Omega|) sum res^2`, comparable with the noise floor.
pub fn run_synth(spec: &SynthSpec) -> Result<SynthOutcome> {
    if !matches!(spec.loss, LossKind::Rmse | LossKind::Xent) {
        return Err(Error::InvalidConfig("synth supports the rmse and xent losses".into()));
    }
    let (_, _, truth) = datagen::gen_low_rank(spec.d, &spec.spectrum, spec.seed.wrapping_add(TRUTH_SEED))?;
    let observed = match spec.snr_db {
        Some(snr) => datagen::add_noise(&truth, snr, spec.seed.wrapping_add(NOISE_SEED))?,
        None => truth.clone(),
    };
    let (dataset, floor) = match spec.loss {
        LossKind::Rmse => {
            let ds = Dataset::fully_observed(LossKind::Rmse, &observed)?;
            let floor = match (spec.snr_db, ds.samples()) {
                (Some(_), engine::SampleSet::Elements(v)) => Some(datagen::noise_floor(&observed, spec.r, v)?),
                _ => None,
            };
            (ds, floor)
        }
        _ => (Dataset::fully_observed(LossKind::Xent, &datagen::one_bit_targets(&observed))?, None),
    };
    let model = FactorModel::init_gaussian_with(
        spec.d,
        spec.r,
        spec.init_sigma,
        spec.seed.wrapping_add(INIT_SEED),
        spec.precond_init,
    )?;
    let mut runs = Vec::new();
    for &scaled in spec.algo.modes() {
        let alpha = if scaled { spec.alpha } else { spec.alpha_plain.unwrap_or(spec.alpha) };
        let mut cfg = RunConfig::new(alpha, spec.epochs, scaled, spec.seed.wrapping_add(SAMPLE_SEED));
        if spec.snr_db.is_none() {
            cfg.reference = Some(truth.clone());
        }
        let output = execute(model.clone(), &dataset, &cfg, spec.workers)?;
        runs.push(AlgoRun { scaled, alpha, output });
    }
    Ok(SynthOutcome { truth, observed, noise_floor: floor, runs })
}

/// Completion of a squared-distance matrix of a 3-D point cloud.
#[derive(Clone, Debug)]
pub struct EdmSpec {
    pub n: usize,
    pub side: f64,
    pub outliers: usize,
    pub shift: f64,
    pub alpha_scaled: f64,
    pub alpha_plain: f64,
    pub epochs: f64,
    pub seed: u64,
    pub init_sigma: f64,
    pub algo: Algo,
    pub workers: usize,
}

impl Default for EdmSpec {
    fn default() -> Self {
        EdmSpec {
            n: 30,
            side: 2.0,
            outliers: 5,
            shift: 10.0,
            alpha_scaled: 0.2,
            alpha_plain: 0.002,
            epochs: 100.0,
            seed: 0,
            init_sigma: 1.0,
            algo: Algo::Both,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdmOutcome {
    pub instance: datagen::EdmInstance,
    /// Condition number of the centered point matrix.
    pub kappa: f64,
    pub runs: Vec<AlgoRun>,
}

impl EdmOutcome {
    pub fn run(&self, scaled: bool) -> Option<&AlgoRun> {
        self.runs.iter().find(|r| r.scaled == scaled)
    }
}

/// Traces the mean of `(||x_i - x_j||^2 - D_ij)^2 / 4` over all `i != j`.
pub fn run_edm(spec: &EdmSpec) -> Result<EdmOutcome> {
    let instance = datagen::gen_edm(spec.n, spec.side, spec.outliers, spec.shift, spec.seed.wrapping_add(TRUTH_SEED))?;
    let kappa = datagen::point_condition_number(&instance.points)?;
    let dataset = Dataset::fully_observed(LossKind::Edm, &instance.distances)?;
    let model = FactorModel::init_gaussian(spec.n, 3, spec.init_sigma, spec.seed.wrapping_add(INIT_SEED))?;
    let mut runs = Vec::new();
    for &scaled in spec.algo.modes() {
        let alpha = if scaled { spec.alpha_scaled } else { spec.alpha_plain };
        let cfg = RunConfig::new(alpha, spec.epochs, scaled, spec.seed.wrapping_add(SAMPLE_SEED));
        let output = execute(model.clone(), &dataset, &cfg, spec.workers)?;
        runs.push(AlgoRun { scaled, alpha, output });
    }
    Ok(EdmOutcome { instance, kappa, runs })
}

/// Where the ranking triples come from.
#[derive(Clone, Debug)]
pub enum CfSource {
    /// Item-item matrix `U S U^T` of size `d`.
    Synthetic { d: usize, spectrum: Spectrum },
    /// A MovieLens-style ratings file; similarities are cosine.
    Ratings(PathBuf),
    /// A triple file in the `i j k y` format, split into train and test.
    Triples(PathBuf),
}

#[derive(Clone, Debug)]
pub struct CfSpec {
    pub source: CfSource,
    pub n_train: usize,
    pub n_test: usize,
    pub r: usize,
    pub alpha_scaled: f64,
    pub alpha_plain: f64,
    pub epochs: f64,
    pub seed: u64,
    pub init_sigma: f64,
    /// Steps between trace rows (AUC is evaluated on each).
    pub trace_every: u64,
    pub np: NpConfig,
    pub algo: Algo,
    pub workers: usize,
}

impl CfSpec {
    pub fn synthetic(d: usize, spectrum: Spectrum, seed: u64) -> Self {
        CfSpec {
            source: CfSource::Synthetic { d, spectrum },
            n_train: 100_000,
            n_test: 10_000,
            r: 3,
            alpha_scaled: 50.0,
            alpha_plain: 0.05,
            epochs: 5.0,
            seed,
            init_sigma: 1.0,
            trace_every: 500,
            np: NpConfig::default(),
            algo: Algo::Both,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CfOutcome {
    pub d: usize,
    pub train: Vec<TripleSample>,
    pub test: Vec<TripleSample>,
    pub np_maximum: f64,
    pub runs: Vec<AlgoRun>,
}

impl CfOutcome {
    pub fn run(&self, scaled: bool) -> Option<&AlgoRun> {
        self.runs.iter().find(|r| r.scaled == scaled)
    }

    /// Training samples consumed before the test AUC first exceeds
    /// NP-Maximum.
    pub fn samples_to_beat_np(&self, scaled: bool) -> Option<u64> {
        self.run(scaled)?.output.trace.first_step_auc_above(self.np_maximum)
    }
}

/// Triples, split, NP-Maximum baseline, then BPR training with test AUC on
/// every trace row.
pub fn run_cf(spec: &CfSpec) -> Result<CfOutcome> {
    let total = spec.n_train + spec.n_test;
    let (d, omega) = match &spec.source {
        CfSource::Synthetic { d, spectrum } => {
            let (_, _, m) = datagen::gen_low_rank(*d, spectrum, spec.seed.wrapping_add(TRUTH_SEED))?;
            (*d, ingest::build_triples(&m, total, spec.seed.wrapping_add(SAMPLE_SEED))?)
        }
        CfSource::Ratings(path) => {
            let g = ingest::load_ratings_csv(path)?;
            (g.n_items(), ingest::build_triples(&g, total, spec.seed.wrapping_add(SAMPLE_SEED))?)
        }
        CfSource::Triples(path) => {
            let t = ingest::read_triples(path)?;
            let d = t.iter().map(|t| t.i.max(t.j).max(t.k)).max().map_or(0, |m| m + 1);
            (d, t)
        }
    };
    let (train, test) = ingest::split(&omega, spec.n_train, spec.n_test, spec.seed.wrapping_add(SPLIT_SEED))?;
    if test.is_empty() {
        return Err(Error::InvalidConfig("the test set must not be empty".into()));
    }
    let np_maximum = eval::np_maximum(&test, spec.np.alpha, spec.np.epochs, spec.np.seed)?;
    let dataset = Dataset::triples(d, train.clone())?;
    let model = FactorModel::init_gaussian(d, spec.r, spec.init_sigma, spec.seed.wrapping_add(INIT_SEED))?;
    let mut runs = Vec::new();
    for &scaled in spec.algo.modes() {
        let alpha = if scaled { spec.alpha_scaled } else { spec.alpha_plain };
        let mut cfg = RunConfig::new(alpha, spec.epochs, scaled, spec.seed.wrapping_add(SAMPLE_SEED));
        cfg.trace_every = Some(spec.trace_every);
        cfg.eval_set = Some(test.clone());
        cfg.track_g_max = false;
        let output = execute(model.clone(), &dataset, &cfg, spec.workers)?;
        runs.push(AlgoRun { scaled, alpha, output });
    }
    Ok(CfOutcome { d, train, test, np_maximum, runs })
}

/// Observed entries of a symmetric matrix as element samples.
pub fn all_entries(m: &DenseMatrix) -> Vec<ElementSample> {
    let d = m.n();
    (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| ElementSample { i, j, value: m.get(i, j) })
        .collect()
}

/// Rows of a point cloud as `x y z` text.
pub fn points_text(points: &FactorMatrix) -> String {
    let mut s = String::new();
    for i in 0..points.rows() {
        let row: Vec<String> = points.row(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}
