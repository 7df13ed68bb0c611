//! Command-line front end.
//!
//! Every option can come from a flag or from a TOML file passed with
//! `--config`; flags win over the file and the file wins over built-in
//! defaults. The file has one optional table per subcommand:
//!
//! ```toml
//! [synth]
//! d = 30
//! spectrum = [10.0, 0.1, 0.001]
//! algo = "both"
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::audit::{self, AuditConfig};
use crate::datagen::Spectrum;
use crate::engine::RunStatus;
use crate::error::{Error, Result};
use crate::eval::{self, NpConfig};
use crate::experiments::{self, Algo, AlgoRun, CfSource, CfSpec, EdmSpec, SynthSpec};
use crate::loss::LossKind;

#[derive(Parser, Debug)]
#[command(name = "scaledsgd", version, about = "Preconditioned SGD for low-rank matrix completion")]
pub struct Cli {
    /// TOML file with `[synth]`, `[edm]`, `[cf]` or `[verify]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic RMSE or 1-bit completion of a low-rank matrix.
    Synth(SynthArgs),
    /// Euclidean distance matrix completion of a 3-D point cloud.
    Edm(EdmArgs),
    /// Item-item collaborative filtering with the BPR loss.
    Cf(CfArgs),
    /// Randomized audit of the local descent inequalities.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoArg {
    Scaled,
    Plain,
    Both,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Algo {
        match a {
            AlgoArg::Scaled => Algo::Scaled,
            AlgoArg::Plain => Algo::Plain,
            AlgoArg::Both => Algo::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Rmse,
    Xent,
}

/// Options shared by the training subcommands.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lock-free worker threads; 1 runs the sequential engine.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory for trace CSVs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit nonzero when a run diverges.
    #[arg(long)]
    #[serde(default)]
    pub strict: bool,
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: Option<usize>,
    /// Search rank; defaults to the length of the spectrum.
    #[arg(long)]
    pub r: Option<usize>,
    /// Eigenvalues of the ground truth, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub spectrum: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Step size of the plain run when it should differ from `--alpha`.
    #[arg(long)]
    pub alpha_plain: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Standard deviation of the Gaussian initial point.
    #[arg(long)]
    pub init_sigma: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub side: Option<f64>,
    #[arg(long)]
    pub outliers: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub alpha_scaled: Option<f64>,
    #[arg(long)]
    pub alpha_plain: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfArgs {
    /// Ratings CSV (`userId,movieId,rating[,...]` with a header row).
    #[arg(long, conflicts_with = "triples")]
    pub ratings: Option<PathBuf>,
    /// Prebuilt triples, one `i j k y` record per line.
    #[arg(long)]
    pub triples: Option<PathBuf>,
    /// Item count of the synthetic similarity matrix used without a file.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub spectrum: Option<Vec<f64>>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub alpha_scaled: Option<f64>,
    #[arg(long)]
    pub alpha_plain: Option<f64>,
    /// Training steps between AUC evaluations.
    #[arg(long)]
    pub trace_every: Option<u64>,
    #[arg(long)]
    pub np_alpha: Option<f64>,
    #[arg(long)]
    pub np_epochs: Option<u32>,
    #[command(flatten)]
    #[serde(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Condition numbers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub kappas: Option<Vec<f64>>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub synth: SynthArgs,
    #[serde(default)]
    pub edm: EdmArgs,
    #[serde(default)]
    pub cf: CfArgs,
    #[serde(default)]
    pub verify: VerifyArgs,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConfigFile::parse(&text)
    }
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

/// Run options after merging flags, file and defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub epochs: f64,
    pub algo: Algo,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub strict: bool,
}

fn merge_run(flag: &RunArgs, file: &RunArgs, epochs: f64) -> RunOptions {
    RunOptions {
        epochs: pick(&flag.epochs, &file.epochs, epochs),
        algo: pick(&flag.algo, &file.algo, AlgoArg::Both).into(),
        seed: pick(&flag.seed, &file.seed, 0),
        workers: pick(&flag.workers, &file.workers, 1),
        out: pick(&flag.out, &file.out, PathBuf::from("results")),
        strict: flag.strict || file.strict,
    }
}

pub fn synth_spec(flag: &SynthArgs, file: &SynthArgs) -> Result<(SynthSpec, RunOptions)> {
    let run = merge_run(&flag.run, &file.run, 100.0);
    let spectrum = Spectrum::new(pick(&flag.spectrum, &file.spectrum, vec![10.0, 0.1, 1e-3]))?;
    let mut spec = SynthSpec::new(
        pick(&flag.d, &file.d, 30),
        spectrum,
        pick(&flag.alpha, &file.alpha, 0.3),
        run.epochs,
        run.seed,
    );
    spec.r = pick(&flag.r, &file.r, spec.r);
    spec.alpha_plain = flag.alpha_plain.or(file.alpha_plain);
    spec.snr_db = flag.snr_db.or(file.snr_db);
    spec.loss = match pick(&flag.loss, &file.loss, LossArg::Rmse) {
        LossArg::Rmse => LossKind::Rmse,
        LossArg::Xent => LossKind::Xent,
    };
    spec.init_sigma = pick(&flag.init_sigma, &file.init_sigma, spec.init_sigma);
    spec.algo = run.algo;
    spec.workers = run.workers;
    Ok((spec, run))
}

pub fn edm_spec(flag: &EdmArgs, file: &EdmArgs) -> (EdmSpec, RunOptions) {
    let base = EdmSpec::default();
    let run = merge_run(&flag.run, &file.run, base.epochs);
    let spec = EdmSpec {
        n: pick(&flag.n, &file.n, base.n),
        side: pick(&flag.side, &file.side, base.side),
        outliers: pick(&flag.outliers, &file.outliers, base.outliers),
        shift: pick(&flag.shift, &file.shift, base.shift),
        alpha_scaled: pick(&flag.alpha_scaled, &file.alpha_scaled, base.alpha_scaled),
        alpha_plain: pick(&flag.alpha_plain, &file.alpha_plain, base.alpha_plain),
        epochs: run.epochs,
        seed: run.seed,
        init_sigma: base.init_sigma,
        algo: run.algo,
        workers: run.workers,
    };
    (spec, run)
}

pub fn cf_spec(flag: &CfArgs, file: &CfArgs) -> Result<(CfSpec, RunOptions)> {
    let spectrum = Spectrum::new(pick(&flag.spectrum, &file.spectrum, vec![10.0, 0.1, 1e-3]))?;
    let d = pick(&flag.d, &file.d, 500);
    let base = CfSpec::synthetic(d, spectrum, 0);
    let run = merge_run(&flag.run, &file.run, base.epochs);
    // a file on the command line replaces any source named in the config
    let (ratings, triples) = if flag.ratings.is_some() || flag.triples.is_some() {
        (flag.ratings.clone(), flag.triples.clone())
    } else {
        (file.ratings.clone(), file.triples.clone())
    };
    let source = match (ratings, triples) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig("give either ratings or triples, not both".into()))
        }
        (Some(p), None) => CfSource::Ratings(p),
        (None, Some(p)) => CfSource::Triples(p),
        (None, None) => base.source.clone(),
    };
    let np = NpConfig {
        alpha: pick(&flag.np_alpha, &file.np_alpha, base.np.alpha),
        epochs: pick(&flag.np_epochs, &file.np_epochs, base.np.epochs),
        seed: base.np.seed,
    };
    let spec = CfSpec {
        source,
        n_train: pick(&flag.n_train, &file.n_train, base.n_train),
        n_test: pick(&flag.n_test, &file.n_test, base.n_test),
        r: pick(&flag.r, &file.r, base.r),
        alpha_scaled: pick(&flag.alpha_scaled, &file.alpha_scaled, base.alpha_scaled),
        alpha_plain: pick(&flag.alpha_plain, &file.alpha_plain, base.alpha_plain),
        epochs: run.epochs,
        seed: run.seed,
        init_sigma: base.init_sigma,
        trace_every: pick(&flag.trace_every, &file.trace_every, base.trace_every),
        np,
        algo: run.algo,
        workers: run.workers,
    };
    Ok((spec, run))
}

pub fn verify_config(flag: &VerifyArgs, file: &VerifyArgs) -> AuditConfig {
    let base = AuditConfig::default();
    AuditConfig {
        d: pick(&flag.d, &file.d, base.d),
        r: pick(&flag.r, &file.r, base.r),
        trials: pick(&flag.trials, &file.trials, base.trials),
        kappas: pick(&flag.kappas, &file.kappas, base.kappas),
        rho: pick(&flag.rho, &file.rho, base.rho),
        c: pick(&flag.c, &file.c, base.c),
        seed: pick(&flag.seed, &file.seed, base.seed),
    }
}

fn write_traces(out: &Path, prefix: &str, runs: &[AlgoRun]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for run in runs {
        let path = out.join(format!("{prefix}_{}.csv", run.label()));
        eval::write_trace_csv(&run.output.trace, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn summarize(runs: &[AlgoRun]) -> bool {
    let mut diverged = false;
    for run in runs {
        let status = match run.output.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::Diverged { step } => {
                diverged = true;
                format!("diverged at step {step}")
            }
        };
        println!(
            "{:<6} alpha {:<8} loss {:.4e} -> {:.4e} (x{:.3e}), {status}",
            run.label(),
            run.alpha,
            run.initial_loss(),
            run.final_loss(),
            run.relative_loss()
        );
    }
    diverged
}

fn finish(diverged: bool, strict: bool) -> ExitCode {
    if diverged && strict {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_synth(flag: &SynthArgs, file: &SynthArgs) -> Result<ExitCode> {
    let (spec, run) = synth_spec(flag, file)?;
    let out = experiments::run_synth(&spec)?;
    if let Some(floor) = out.noise_floor {
        println!("noise floor {floor:.4e}");
    }
    let diverged = summarize(&out.runs);
    write_traces(&run.out, "synth", &out.runs)?;
    Ok(finish(diverged, run.strict))
}

fn cmd_edm(flag: &EdmArgs, file: &EdmArgs) -> Result<ExitCode> {
    let (spec, run) = edm_spec(flag, file);
    let out = experiments::run_edm(&spec)?;
    println!("point cloud condition number {:.4}", out.kappa);
    let diverged = summarize(&out.runs);
    write_traces(&run.out, "edm", &out.runs)?;
    let path = run.out.join("edm_points.txt");
    fs::write(&path, experiments::points_text(&out.instance.points)).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(finish(diverged, run.strict))
}

fn cmd_cf(flag: &CfArgs, file: &CfArgs) -> Result<ExitCode> {
    let (spec, run) = cf_spec(flag, file)?;
    let out = experiments::run_cf(&spec)?;
    println!(
        "{} items, {} train / {} test triples",
        out.d,
        out.train.len(),
        out.test.len()
    );
    println!("NP-Maximum AUC {:.4}", out.np_maximum);
    let diverged = summarize(&out.runs);
    for r in &out.runs {
        let auc = r.output.trace.last().and_then(|row| row.auc).unwrap_or(f64::NAN);
        match out.samples_to_beat_np(r.scaled) {
            Some(n) => println!("{:<6} final AUC {auc:.4}, above NP-Maximum after {n} samples", r.label()),
            None => println!("{:<6} final AUC {auc:.4}, never above NP-Maximum", r.label()),
        }
    }
    write_traces(&run.out, "cf", &out.runs)?;
    Ok(finish(diverged, run.strict))
}

fn cmd_verify(flag: &VerifyArgs, file: &VerifyArgs) -> Result<ExitCode> {
    let cfg = verify_config(flag, file);
    let report = audit::run_audit(&cfg)?;
    println!("{} trials per kappa, d = {}, r = {}, rho = {}", cfg.trials, cfg.d, cfg.r, cfg.rho);
    for line in report.lines() {
        println!("{line}");
    }
    let v = report.violations();
    println!("total violations: {v}");
    Ok(if v == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &file.synth),
        Command::Edm(a) => cmd_edm(a, &file.edm),
        Command::Cf(a) => cmd_cf(a, &file.cf),
        Command::Verify(a) => cmd_verify(a, &file.verify),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
