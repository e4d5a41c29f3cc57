//! `streamtest`: error-rate experiments, budget sweeps, calibration and
//! oracle checks for the memory-constrained testers.
//!
//! Exit codes: 0 success, 1 other failure, 2 parameters outside the valid
//! regime, 3 ledger breach, 4 calibration file missing.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use streamtest::calibration::{calibrate_constants, CalibrationRecord, CalibrationSpec};
use streamtest::compression::{contraction_probability_oracle, OracleMode};
use streamtest::harness::{
    exact_unseen_moments, max_variance_ratio, planned_samples, run_experiment, sweep_tradeoff, write_reports_csv,
    write_sweep_csv, Algo, ExperimentContext, ExperimentSpec, Family, SweepSpec,
};
use streamtest::model::{make_uniform, ProblemParams};
use streamtest::Error;

#[derive(Parser)]
#[command(name = "streamtest", version, about = "Memory-constrained uniformity and closeness testing")]
struct Cli {
    /// Worker threads for Monte Carlo trials (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the acceptance rate of a uniformity tester on one family.
    TestUniformity(UniformityArgs),
    /// Estimate the acceptance rate of the compressed closeness tester.
    TestCloseness(ClosenessArgs),
    /// Run null and far families over a grid of (m, n) budgets.
    Sweep(SweepArgs),
    /// Recompute the calibration record.
    Calibrate(CalibrateArgs),
    /// Exact reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Stream length; defaults to the calibrated rate for the budget.
    #[arg(long)]
    n: Option<u64>,
    /// Memory budget in bits.
    #[arg(long = "mem-bits")]
    mem_bits: Option<u64>,
    /// uniform, paninski[:eps], subset:size, pointmass[:symbol] or pmf-file:path.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration record (TOML); the shipped record is used when absent.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Fill the mean_runtime_ms column.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct UniformityArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// batch or compress.
    #[arg(long)]
    algo: Option<String>,
}

#[derive(Args)]
struct ClosenessArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Family of the first stream; the second comes from --family.
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Comma-separated budgets; crossed with --n.
    #[arg(long = "mem-bits", value_delimiter = ',')]
    mem_bits: Vec<u64>,
    /// Comma-separated stream lengths; crossed with --mem-bits.
    #[arg(long, value_delimiter = ',')]
    n: Vec<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Where to write the record.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Small sample sizes, for smoke runs.
    #[arg(long)]
    quick: bool,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Exact mean and variance of the unseen-element statistic.
    Moments {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        s: u64,
    },
    /// Largest ratio of the exact variance to 2 s^2 / k^3 over 1 <= s <= k <= max-k.
    VarianceGrid {
        #[arg(long = "max-k", default_value_t = 512)]
        max_k: usize,
    },
    /// Probability that a random balanced partition keeps c1 sqrt(k'/k) of the distance.
    Contraction {
        #[arg(long)]
        k: usize,
        #[arg(long = "k-prime")]
        k_prime: usize,
        /// Compared against uniform.
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 0.3)]
        c1: f64,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Enumerate every balanced partition.
        #[arg(long)]
        exhaustive: bool,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::RegimeTooSmall { .. } | Error::RegimeTooLarge { .. } => 2,
            Error::BudgetExceeded { .. } => 3,
            Error::CalibrationMissing(_) => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn load_context(path: Option<&Path>) -> CliResult<ExperimentContext> {
    let record = match path {
        Some(p) => CalibrationRecord::load(p)?,
        None => CalibrationRecord::builtin(),
    };
    Ok(ExperimentContext::new(record))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_family(s: &str) -> CliResult<Family> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn parse_algo(s: &str) -> CliResult<Algo> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

/// Merges the config file and flags into a spec; `n` is planned when absent.
fn build_spec(common: &CommonArgs, algo: Option<Algo>, ctx: &ExperimentContext) -> CliResult<ExperimentSpec> {
    let base: Option<ExperimentSpec> = common.config.as_deref().map(read_json).transpose()?;
    let algo = algo.or(base.as_ref().map(|b| b.algo)).unwrap_or(Algo::Batch);
    let pick = |flag: Option<f64>, from: Option<f64>, name: &str| {
        flag.or(from).ok_or_else(|| usage(format!("--{name} is required")))
    };
    let bp = base.as_ref().map(|b| b.params);
    let k = common.k.or(bp.map(|p| p.k)).ok_or_else(|| usage("--k is required"))?;
    let eps = pick(common.eps, bp.map(|p| p.eps), "eps")?;
    let m = common.mem_bits.or(bp.map(|p| p.m)).ok_or_else(|| usage("--mem-bits is required"))?;
    let n = match common.n.or(bp.map(|p| p.n)) {
        Some(n) => n,
        None => planned_samples(algo, k, eps, m, &ctx.record)?,
    };
    let family = match &common.family {
        Some(f) => parse_family(f)?,
        None => base.as_ref().map(|b| b.family.clone()).unwrap_or(Family::Uniform),
    };
    Ok(ExperimentSpec {
        algo,
        params: ProblemParams::new(k, eps, n, m),
        family,
        reference: base.as_ref().and_then(|b| b.reference.clone()),
        trials: common.trials.or(base.as_ref().map(|b| b.trials)).unwrap_or(100),
        master_seed: common.seed.or(base.as_ref().map(|b| b.master_seed)).unwrap_or(0),
        output: common.out.clone().or(base.as_ref().and_then(|b| b.output.clone())),
        timing: common.timing || base.as_ref().is_some_and(|b| b.timing),
    })
}

fn emit(spec: &ExperimentSpec, ctx: &ExperimentContext) -> CliResult<()> {
    let report = run_experiment(spec, ctx)?;
    if spec.output.is_none() {
        write_reports_csv(std::slice::from_ref(&report), io::stdout().lock())?;
    }
    if report.failed() {
        return Err(Failure {
            code: 3,
            message: format!(
                "ledger breach in {} of {} trials (peak {} bits, budget {})",
                report.breaches, report.trials, report.peak_bits, report.params.m
            ),
        });
    }
    Ok(())
}

fn test_uniformity(args: &UniformityArgs) -> CliResult<()> {
    let ctx = load_context(args.common.calibration.as_deref())?;
    let algo = args.algo.as_deref().map(parse_algo).transpose()?;
    if algo == Some(Algo::Closeness) {
        return Err(usage("use test-closeness for the closeness tester"));
    }
    let spec = build_spec(&args.common, algo, &ctx)?;
    if spec.algo == Algo::Closeness {
        return Err(usage("use test-closeness for the closeness tester"));
    }
    emit(&spec, &ctx)
}

fn test_closeness(args: &ClosenessArgs) -> CliResult<()> {
    let ctx = load_context(args.common.calibration.as_deref())?;
    let mut spec = build_spec(&args.common, Some(Algo::Closeness), &ctx)?;
    if let Some(r) = &args.reference {
        spec.reference = Some(parse_family(r)?);
    }
    emit(&spec, &ctx)
}

fn sweep(args: &SweepArgs) -> CliResult<()> {
    let ctx = load_context(args.calibration.as_deref())?;
    let base: Option<SweepSpec> = args.config.as_deref().map(read_json).transpose()?;
    let algo = match &args.algo {
        Some(a) => parse_algo(a)?,
        None => base.as_ref().map(|b| b.algo).unwrap_or(Algo::Batch),
    };
    let points = if args.mem_bits.is_empty() && args.n.is_empty() {
        base.as_ref().map(|b| b.points.clone()).unwrap_or_default()
    } else {
        if args.mem_bits.is_empty() || args.n.is_empty() {
            return Err(usage("--mem-bits and --n must be given together"));
        }
        args.mem_bits.iter().flat_map(|&m| args.n.iter().map(move |&n| (m, n))).collect()
    };
    if points.is_empty() {
        return Err(usage("the sweep grid is empty"));
    }
    let spec = SweepSpec {
        algo,
        k: args.k.or(base.as_ref().map(|b| b.k)).ok_or_else(|| usage("--k is required"))?,
        eps: args.eps.or(base.as_ref().map(|b| b.eps)).ok_or_else(|| usage("--eps is required"))?,
        points,
        trials: args.trials.or(base.as_ref().map(|b| b.trials)).unwrap_or(100),
        master_seed: args.seed.or(base.as_ref().map(|b| b.master_seed)).unwrap_or(0),
    };
    let summary = sweep_tradeoff(&spec, &ctx)?;
    match &args.out {
        Some(path) => write_sweep_csv(&summary.rows, File::create(path)?)?,
        None => write_sweep_csv(&summary.rows, io::stdout().lock())?,
    }
    let mut err = io::stderr().lock();
    for (m, n) in &summary.frontier {
        match n {
            Some(n) => writeln!(err, "m={m}: smallest passing n={n}")?,
            None => writeln!(err, "m={m}: no passing n")?,
        }
    }
    writeln!(err, "monotone: {}", summary.monotone)?;
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> CliResult<()> {
    let mut spec = CalibrationSpec::default();
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    if args.quick {
        spec.oracle_trials = 500;
        spec.null_replicates = 5_000;
        spec.power_trials = 200;
    }
    let record = calibrate_constants(&spec)?;
    record.save(&args.out)?;
    println!(
        "c1={} c2={} delta={} c4_identity={} c4_closeness={} large_s.mid={} large_s.high={}",
        record.c1,
        record.c2,
        record.delta,
        record.c4_identity,
        record.c4_closeness,
        record.large_s.mid,
        record.large_s.high
    );
    Ok(())
}

fn oracle(cmd: &OracleCommand) -> CliResult<()> {
    match cmd {
        OracleCommand::Moments { k, s } => {
            let (mean, var) = exact_unseen_moments(*k, *s)?;
            let bound = 2.0 * (*s as f64).powi(2) / (*k as f64).powi(3);
            println!("k={k} s={s} mean={mean} variance={var} bound={bound}");
        }
        OracleCommand::VarianceGrid { max_k } => {
            let (ratio, k, s) = max_variance_ratio(*max_k);
            println!("max variance / (2 s^2 / k^3) = {ratio} at k={k} s={s}");
            if ratio > 1.0 {
                return Err(usage("variance bound violated"));
            }
        }
        OracleCommand::Contraction { k, k_prime, family, c1, trials, seed, exhaustive } => {
            let p = parse_family(family)?.build(*k, 0.5, Algo::Compress)?;
            let u = make_uniform(*k)?;
            let mode = if *exhaustive { OracleMode::Exhaustive } else { OracleMode::Auto };
            let r = contraction_probability_oracle(&p, &u, *k_prime, *c1, *trials, *seed, mode)?;
            println!(
                "probability={} partitions={} exhaustive={} min_ratio={}",
                r.probability, r.partitions, r.exhaustive, r.min_ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Exit code 2 is reserved for regime violations.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::TestUniformity(a) => test_uniformity(a),
        Command::TestCloseness(a) => test_closeness(a),
        Command::Sweep(a) => sweep(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Oracle(c) => oracle(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
