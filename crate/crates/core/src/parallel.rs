//! Lock-free multi-worker execution over a shared factor matrix.
//!
//! Entries of `X` live in `AtomicU64` cells holding `f64` bits, so every
//! scalar read or write is atomic while rows may interleave across workers.
//! Each worker keeps a private `P`, updated by its own Sherman-Morrison calls
//! and periodically recomputed from a point-in-time read of `X`. A
//! coordinator thread records the trace at a wall-clock cadence and publishes
//! a reference `P` that workers compare against to trigger early resyncs.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{self, Dataset, RunConfig, RunOutput, RunStatus};
use crate::error::{Error, Result};
use crate::eval::Trace;
use crate::kernel::{self, SmallSymMatrix};
use crate::loss::{self, RowStore, Sample};
use crate::matrix::FactorMatrix;
use crate::model::FactorModel;

/// A `d x r` matrix shared between threads without locks.
#[derive(Clone, Debug)]
pub struct AtomicStore {
    rows: usize,
    rank: usize,
    data: Arc<[AtomicU64]>,
}

impl AtomicStore {
    pub fn from_matrix(x: &FactorMatrix) -> Self {
        AtomicStore {
            rows: x.rows(),
            rank: x.rank(),
            data: x.as_slice().iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        }
    }
}

impl RowStore for AtomicStore {
    fn rows(&self) -> usize {
        self.rows
    }

    fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    fn read_row(&self, i: usize, out: &mut [f64]) {
        let base = i * self.rank;
        for (a, o) in out.iter_mut().enumerate() {
            *o = f64::from_bits(self.data[base + a].load(Ordering::Relaxed));
        }
    }

    #[inline]
    fn write_row(&mut self, i: usize, values: &[f64]) {
        let base = i * self.rank;
        for (a, v) in values.iter().enumerate() {
            self.data[base + a].store(v.to_bits(), Ordering::Relaxed);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelConfig {
    pub workers: usize,
    /// Steps between unconditional resyncs of a worker's `P`.
    pub resync_interval: u64,
    /// Relative distance to the reference `P` that forces an early resync.
    pub divergence_threshold: f64,
    /// Steps between a worker's comparisons against the reference `P`.
    pub check_every: u64,
    /// Wall-clock interval between coordinator trace rows.
    pub trace_interval: Duration,
    /// Count steps whose rows were already in flight in another worker.
    pub audit_collisions: bool,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            workers: 1,
            resync_interval: 256,
            divergence_threshold: 0.1,
            check_every: 32,
            trace_interval: Duration::from_millis(20),
            audit_collisions: false,
        }
    }
}

impl ParallelConfig {
    pub fn with_workers(workers: usize) -> Self {
        ParallelConfig {
            workers,
            ..ParallelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.resync_interval == 0 || self.check_every == 0 {
            return Err(Error::InvalidConfig("resync and check intervals must be >= 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidConfig("divergence threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// `||P_local - P_reference||_F / ||P_reference||_F`.
pub fn precond_divergence(local: &SmallSymMatrix, reference: &SmallSymMatrix) -> f64 {
    local.sub(reference).frobenius() / reference.frobenius()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelStats {
    pub steps: u64,
    /// Scheduled resyncs plus singular-downdate recoveries.
    pub resyncs: u64,
    /// Resyncs triggered by the divergence threshold.
    pub early_resyncs: u64,
    /// Steps that found one of their rows in flight elsewhere (audit only).
    pub collisions: u64,
}

impl ParallelStats {
    pub fn collision_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.collisions as f64 / self.steps as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParallelOutput {
    pub output: RunOutput,
    pub stats: ParallelStats,
}

/// Runs the same total step budget as [`engine::run`] across
/// `pconfig.workers` threads.
///
/// With one worker the step loop of [`engine::run`] is executed on the
/// atomic store, so the trace matches the single-threaded one apart from
/// `wall_ms`.
pub fn run_parallel(
    model: FactorModel,
    dataset: &Dataset,
    config: &RunConfig,
    pconfig: &ParallelConfig,
) -> Result<ParallelOutput> {
    engine::check_run(&model, dataset, config)?;
    pconfig.validate()?;
    let period = model.refresh_period();
    let (x, mut p) = engine::split_model(model);
    let mut store = AtomicStore::from_matrix(&x);

    if pconfig.workers == 1 {
        let (trace, status) = engine::drive(&mut store, &mut p, dataset, config)?;
        let steps = match status {
            RunStatus::Completed => config.total_steps(dataset.len()),
            RunStatus::Diverged { step } => step,
        };
        let model = FactorModel::from_parts(store.snapshot(), p, period);
        return Ok(ParallelOutput {
            output: RunOutput { model, trace, status },
            stats: ParallelStats { steps, ..Default::default() },
        });
    }

    let shared = Shared {
        store: store.clone(),
        reference: RwLock::new((0, p.clone())),
        done_steps: AtomicU64::new(0),
        abort: AtomicBool::new(false),
        diverged_at: AtomicU64::new(u64::MAX),
        in_flight: if pconfig.audit_collisions {
            (0..x.rows()).map(|_| AtomicU32::new(0)).collect()
        } else {
            Vec::new()
        },
    };
    let total = config.total_steps(dataset.len());
    let w = pconfig.workers as u64;
    let start = Instant::now();
    let mut trace = Trace::new();
    trace.push(engine::trace_row(&x, dataset, config, 0, start)?);

    let results: Vec<Result<WorkerStats>> = thread::scope(|s| {
        let handles: Vec<_> = (0..w)
            .map(|id| {
                let budget = total / w + u64::from(id < total % w);
                let shared = &shared;
                let p0 = p.clone();
                s.spawn(move || worker(id, budget, p0, shared, dataset, config, pconfig))
            })
            .collect();
        coordinate(&shared, &handles, dataset, config, pconfig, start, &mut trace);
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidConfig("worker panicked".into()))))
            .collect()
    });

    let mut stats = ParallelStats::default();
    for r in results {
        let ws = r?;
        stats.steps += ws.steps;
        stats.resyncs += ws.resyncs;
        stats.early_resyncs += ws.early_resyncs;
        stats.collisions += ws.collisions;
    }

    // Quiesced: every worker has joined.
    let final_x = store.snapshot();
    let status = match shared.diverged_at.load(Ordering::Relaxed) {
        u64::MAX => RunStatus::Completed,
        step => RunStatus::Diverged { step },
    };
    let final_step = match status {
        RunStatus::Completed => total,
        RunStatus::Diverged { step } => step,
    }
    .max(trace.last().map_or(0, |r| r.step + 1));
    trace.push(engine::trace_row(&final_x, dataset, config, final_step, start)?);
    let p = if final_x.is_finite() {
        kernel::sym_inverse(&kernel::gram(&final_x)).unwrap_or(p)
    } else {
        p
    };
    Ok(ParallelOutput {
        output: RunOutput {
            model: FactorModel::from_parts(final_x, p, period),
            trace,
            status,
        },
        stats,
    })
}

struct Shared {
    store: AtomicStore,
    /// Version counter and the latest exact `P` computed by the coordinator.
    reference: RwLock<(u64, SmallSymMatrix)>,
    done_steps: AtomicU64,
    abort: AtomicBool,
    diverged_at: AtomicU64,
    in_flight: Vec<AtomicU32>,
}

#[derive(Default)]
struct WorkerStats {
    steps: u64,
    resyncs: u64,
    early_resyncs: u64,
    collisions: u64,
}

fn sample_rows(sample: &Sample) -> ([usize; 3], usize) {
    match sample {
        Sample::Element(s) if s.i == s.j => ([s.i, 0, 0], 1),
        Sample::Element(s) => ([s.i, s.j, 0], 2),
        Sample::Triple(t) => {
            let mut rows = [t.i, t.j, t.k];
            let mut n = 1;
            for a in 1..3 {
                if !rows[..n].contains(&rows[a]) {
                    rows[n] = rows[a];
                    n += 1;
                }
            }
            (rows, n)
        }
    }
}

fn worker(
    id: u64,
    budget: u64,
    mut p: SmallSymMatrix,
    shared: &Shared,
    dataset: &Dataset,
    config: &RunConfig,
    pconfig: &ParallelConfig,
) -> Result<WorkerStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id + 1);
    let mut store = shared.store.clone();
    let mut stats = WorkerStats::default();
    let mut since_resync = 0u64;
    let mut seen_version = 0u64;
    let mut pending = 0u64;
    let mut row = vec![0.0; store.rank()];
    let kind = dataset.kind();
    let oversubscribed = thread::available_parallelism().map_or(true, |n| pconfig.workers > n.get());

    let resync = |store: &AtomicStore| -> Result<Option<SmallSymMatrix>> {
        let x = store.snapshot();
        if !x.is_finite() {
            return Ok(None);
        }
        Ok(kernel::sym_inverse(&kernel::gram(&x)).ok())
    };

    for _ in 0..budget {
        if shared.abort.load(Ordering::Relaxed) {
            break;
        }
        let sample = engine::sample_uniform(dataset, &mut rng);
        let (rows, n) = sample_rows(&sample);
        if pconfig.audit_collisions {
            let mut hit = false;
            for &r in &rows[..n] {
                hit |= shared.in_flight[r].fetch_add(1, Ordering::Relaxed) > 0;
            }
            stats.collisions += u64::from(hit);
        }
        let pm = if config.scaled { Some(&mut p) } else { None };
        let result = loss::apply_step(&mut store, pm, kind, &sample, config.alpha);
        if pconfig.audit_collisions {
            for &r in &rows[..n] {
                shared.in_flight[r].fetch_sub(1, Ordering::Relaxed);
            }
        }
        stats.steps += 1;
        pending += 1;
        match result {
            Ok(_) => {}
            Err(Error::SingularDowndate { .. }) => {
                if let Some(fresh) = resync(&store)? {
                    p = fresh;
                }
                stats.resyncs += 1;
                since_resync = 0;
            }
            Err(e) => {
                shared.abort.store(true, Ordering::Relaxed);
                return Err(e);
            }
        }
        let finite = rows[..n].iter().all(|&i| {
            store.read_row(i, &mut row);
            row.iter().all(|v| v.is_finite())
        });
        if !finite || (config.scaled && !p.is_finite()) {
            let step = shared.done_steps.fetch_add(pending, Ordering::Relaxed) + pending;
            shared.diverged_at.fetch_min(step, Ordering::Relaxed);
            shared.abort.store(true, Ordering::Relaxed);
            return Ok(stats);
        }
        if pending >= 64 {
            shared.done_steps.fetch_add(pending, Ordering::Relaxed);
            pending = 0;
            if oversubscribed {
                // Hand the core over between steps rather than being
                // preempted halfway through a row update.
                thread::yield_now();
            }
        }
        if config.scaled {
            since_resync += 1;
            if since_resync >= pconfig.resync_interval {
                if let Some(fresh) = resync(&store)? {
                    p = fresh;
                }
                stats.resyncs += 1;
                since_resync = 0;
            } else if since_resync % pconfig.check_every == 0 {
                let guard = shared.reference.read().expect("reference lock poisoned");
                if guard.0 != seen_version {
                    seen_version = guard.0;
                    if precond_divergence(&p, &guard.1) > pconfig.divergence_threshold {
                        p = guard.1.clone();
                        stats.early_resyncs += 1;
                        since_resync = 0;
                    }
                }
            }
        }
    }
    shared.done_steps.fetch_add(pending, Ordering::Relaxed);
    Ok(stats)
}

fn coordinate<T>(
    shared: &Shared,
    handles: &[thread::ScopedJoinHandle<'_, T>],
    dataset: &Dataset,
    config: &RunConfig,
    pconfig: &ParallelConfig,
    start: Instant,
    trace: &mut Trace,
) {
    let mut version = 0u64;
    let mut last_step = 0u64;
    while !handles.iter().all(|h| h.is_finished()) {
        thread::sleep(pconfig.trace_interval);
        let x = shared.store.snapshot();
        if !x.is_finite() {
            continue;
        }
        if config.scaled {
            if let Ok(p) = kernel::sym_inverse(&kernel::gram(&x)) {
                version += 1;
                *shared.reference.write().expect("reference lock poisoned") = (version, p);
            }
        }
        let step = shared.done_steps.load(Ordering::Relaxed);
        if step > last_step && !handles.iter().all(|h| h.is_finished()) {
            if let Ok(row) = engine::trace_row(&x, dataset, config, step, start) {
                trace.push(row);
                last_step = step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_examples() {
        let p = SmallSymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(precond_divergence(&p, &p), 0.0);
        let two = SmallSymMatrix::from_row_major(2, &[4.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(precond_divergence(&two, &p), 1.0);
        // off-diagonal perturbation of 0.1 has Frobenius norm sqrt(0.02)
        let q = SmallSymMatrix::from_row_major(2, &[2.0, 0.6, 0.6, 1.0]).unwrap();
        let want = 0.02f64.sqrt() / (4.0f64 + 0.25 + 0.25 + 1.0).sqrt();
        assert!((precond_divergence(&q, &p) - want).abs() < 1e-15);
    }

    #[test]
    fn atomic_store_roundtrip() {
        let x = FactorMatrix::from_fn(5, 3, |i, a| (i as f64) - 0.25 * a as f64);
        let mut s = AtomicStore::from_matrix(&x);
        assert_eq!(s.snapshot(), x);
        s.write_row(2, &[9.0, 8.0, 7.0]);
        let mut row = [0.0; 3];
        s.clone().read_row(2, &mut row);
        assert_eq!(row, [9.0, 8.0, 7.0]);
    }
}
