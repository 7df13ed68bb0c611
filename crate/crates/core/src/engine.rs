//! Sampling and the epoch loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{self, Trace, TraceRow};
use crate::kernel::{self, SmallSymMatrix};
use crate::loss::{self, ElementSample, LossKind, RowStore, Sample, TripleSample};
use crate::matrix::{DenseMatrix, FactorMatrix};
use crate::model::{self, FactorModel};

/// Observed samples of one kind.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSet {
    Elements(Vec<ElementSample>),
    Triples(Vec<TripleSample>),
}

/// A loss together with its observation set `Omega`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    kind: LossKind,
    d: usize,
    samples: SampleSet,
}

impl Dataset {
    pub fn new(kind: LossKind, d: usize, samples: SampleSet) -> Result<Self> {
        let n = match &samples {
            SampleSet::Elements(v) => {
                if kind.uses_triples() {
                    return Err(Error::InvalidConfig(format!("{kind:?} needs triples")));
                }
                for s in v {
                    bound(s.i.max(s.j), d)?;
                    if kind == LossKind::Edm && s.i == s.j {
                        return Err(Error::DegenerateSample(format!(
                            "EDM sample with i = j = {}",
                            s.i
                        )));
                    }
                }
                v.len()
            }
            SampleSet::Triples(v) => {
                if !kind.uses_triples() {
                    return Err(Error::InvalidConfig(format!("{kind:?} needs element samples")));
                }
                for t in v {
                    bound(t.i.max(t.j).max(t.k), d)?;
                    if t.j == t.k {
                        return Err(Error::DegenerateSample(format!("triple with j = k = {}", t.j)));
                    }
                }
                v.len()
            }
        };
        if n == 0 {
            return Err(Error::EmptySet);
        }
        Ok(Dataset { kind, d, samples })
    }

    pub fn elements(kind: LossKind, d: usize, samples: Vec<ElementSample>) -> Result<Self> {
        Dataset::new(kind, d, SampleSet::Elements(samples))
    }

    pub fn triples(d: usize, samples: Vec<TripleSample>) -> Result<Self> {
        Dataset::new(LossKind::Bpr, d, SampleSet::Triples(samples))
    }

    /// Every ordered pair `(i, j)` of a symmetric `d x d` matrix. Pairs with
    /// `i = j` are left out for EDM.
    pub fn fully_observed(kind: LossKind, m: &DenseMatrix) -> Result<Self> {
        let d = m.n();
        let mut v = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                if kind == LossKind::Edm && i == j {
                    continue;
                }
                v.push(ElementSample { i, j, value: m.get(i, j) });
            }
        }
        Dataset::elements(kind, d, v)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            SampleSet::Elements(v) => v.len(),
            SampleSet::Triples(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, idx: usize) -> Sample {
        match &self.samples {
            SampleSet::Elements(v) => Sample::Element(v[idx]),
            SampleSet::Triples(v) => Sample::Triple(v[idx]),
        }
    }
}

fn bound(i: usize, d: usize) -> Result<()> {
    if i >= d {
        Err(Error::IndexOutOfRange { index: i, dim: d })
    } else {
        Ok(())
    }
}

/// One uniform draw from `Omega`, with replacement.
pub fn sample_uniform<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Sample {
    dataset.get(rng.random_range(0..dataset.len()))
}

/// Parameters of a single run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub alpha: f64,
    /// Epochs of `|Omega|` steps each; fractional values are allowed.
    pub epochs: f64,
    pub scaled: bool,
    pub seed: u64,
    /// Steps between trace rows. `None` means once per epoch.
    pub trace_every: Option<u64>,
    /// Scaled steps between exact refreshes of `P`. `None` means once per
    /// epoch; `Some(u64::MAX)` disables refreshes.
    pub refresh_period: Option<u64>,
    /// Held-out triples scored by AUC on every trace row.
    pub eval_set: Option<Vec<TripleSample>>,
    /// When present, trace rows report `f(X) = ||X X^T - M||_F^2` instead of
    /// the mean training loss over `Omega`.
    pub reference: Option<DenseMatrix>,
    /// Record `max_k g_k(X)` on trace rows.
    pub track_g_max: bool,
}

impl RunConfig {
    pub fn new(alpha: f64, epochs: f64, scaled: bool, seed: u64) -> Self {
        RunConfig {
            alpha,
            epochs,
            scaled,
            seed,
            trace_every: None,
            refresh_period: None,
            eval_set: None,
            reference: None,
            track_g_max: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epochs > 0.0) || !self.epochs.is_finite() {
            return Err(Error::InvalidConfig(format!("epochs must be > 0, got {}", self.epochs)));
        }
        if self.trace_every == Some(0) {
            return Err(Error::InvalidConfig("trace_every must be >= 1".into()));
        }
        if self.refresh_period == Some(0) {
            return Err(Error::InvalidConfig("refresh_period must be >= 1".into()));
        }
        if let Some(e) = &self.eval_set {
            if e.is_empty() {
                return Err(Error::EmptySet);
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * n as f64).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// An entry of `X` became non-finite at this step.
    Diverged { step: u64 },
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: FactorModel,
    pub trace: Trace,
    pub status: RunStatus,
}

impl RunOutput {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Turns a divergence into [`Error::NonFinite`].
    pub fn into_result(self) -> Result<(FactorModel, Trace)> {
        match self.status {
            RunStatus::Completed => Ok((self.model, self.trace)),
            RunStatus::Diverged { step } => Err(Error::NonFinite { step }),
        }
    }
}

/// Runs `epochs * |Omega|` uniformly sampled steps.
pub fn run(model: FactorModel, dataset: &Dataset, config: &RunConfig) -> Result<RunOutput> {
    check_run(&model, dataset, config)?;
    let period = model.refresh_period();
    let (mut x, mut p) = split_model(model);
    let (trace, status) = drive(&mut x, &mut p, dataset, config)?;
    let model = FactorModel::from_parts(x, p, period);
    Ok(RunOutput { model, trace, status })
}

pub(crate) fn check_run(model: &FactorModel, dataset: &Dataset, config: &RunConfig) -> Result<()> {
    config.validate()?;
    if model.d() != dataset.d() {
        return Err(Error::DimensionMismatch(format!(
            "model has d = {} but dataset has d = {}",
            model.d(),
            dataset.d()
        )));
    }
    if let Some(m) = &config.reference {
        if m.n() != model.d() {
            return Err(Error::DimensionMismatch("reference matrix size".into()));
        }
    }
    Ok(())
}

pub(crate) fn split_model(model: FactorModel) -> (FactorMatrix, SmallSymMatrix) {
    let p = model.p().clone();
    (model.into_x(), p)
}

/// Loss reported on trace rows.
pub fn trace_loss(x: &FactorMatrix, dataset: &Dataset, config: &RunConfig) -> Result<f64> {
    match &config.reference {
        Some(m) => model::full_loss(x, m),
        None => eval::dataset_loss(x, dataset),
    }
}

pub(crate) fn trace_row(
    x: &FactorMatrix,
    dataset: &Dataset,
    config: &RunConfig,
    step: u64,
    start: Instant,
) -> Result<TraceRow> {
    let train_loss = trace_loss(x, dataset, config)?;
    let auc = match &config.eval_set {
        Some(e) => Some(eval::auc(x, e)?),
        None => None,
    };
    let g_max = if config.track_g_max && x.is_finite() {
        model::max_coherence_g(x).ok()
    } else {
        None
    };
    Ok(TraceRow {
        step,
        epoch_frac: step as f64 / dataset.len() as f64,
        train_loss,
        auc,
        g_max,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// The single-threaded step loop over any row store.
pub(crate) fn drive<S: RowStore + ?Sized>(
    store: &mut S,
    p: &mut SmallSymMatrix,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<(Trace, RunStatus)> {
    let start = Instant::now();
    let n = dataset.len();
    let total = config.total_steps(n);
    let refresh = config.refresh_period.unwrap_or(n as u64);
    let every = config.trace_every.unwrap_or(n as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Trace::default();
    let mut since_refresh = 0u64;
    let mut row = vec![0.0; store.rank()];

    trace.push(trace_row(&store.snapshot(), dataset, config, 0, start)?);
    for step in 1..=total {
        let sample = sample_uniform(dataset, &mut rng);
        let pm = if config.scaled { Some(&mut *p) } else { None };
        let info = match loss::apply_step(store, pm, dataset.kind(), &sample, config.alpha) {
            Ok(info) => info,
            Err(Error::SingularDowndate { .. }) => {
                *p = refresh_or_diverge(store, step)?;
                since_refresh = 0;
                Default::default()
            }
            Err(e) => return Err(e),
        };
        let finite = info.touched.as_slice().iter().all(|&i| {
            store.read_row(i, &mut row);
            row.iter().all(|v| v.is_finite())
        });
        if !finite || (config.scaled && !p.is_finite()) {
            trace.push(trace_row(&store.snapshot(), dataset, config, step, start)?);
            return Ok((trace, RunStatus::Diverged { step }));
        }
        if config.scaled && info.smw_calls > 0 {
            since_refresh += 1;
            if since_refresh >= refresh {
                *p = refresh_or_diverge(store, step)?;
                since_refresh = 0;
            }
        }
        if step % every == 0 || step == total {
            trace.push(trace_row(&store.snapshot(), dataset, config, step, start)?);
        }
    }
    Ok((trace, RunStatus::Completed))
}

fn refresh_or_diverge<S: RowStore + ?Sized>(store: &S, step: u64) -> Result<SmallSymMatrix> {
    let x = store.snapshot();
    if !x.is_finite() {
        return Err(Error::NonFinite { step });
    }
    kernel::sym_inverse(&kernel::gram(&x))
}
