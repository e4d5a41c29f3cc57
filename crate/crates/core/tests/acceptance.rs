//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtest::base::identity_chi2_test;
use streamtest::batch::{empirical_tv_statistic, plan_batches, unseen_statistic, BatchRegime, BatchTester};
use streamtest::compressed::{
    amplification_repetitions, amplification_threshold, amplify_counts, CompressedUniformity,
};
use streamtest::compression::{contraction_probability_oracle, OracleMode};
use streamtest::harness::{
    exact_unseen_moments, max_variance_ratio, planned_samples, run_experiment, write_reports_csv, Algo,
    ErrorRateReport, ExperimentContext, ExperimentSpec, Family,
};
use streamtest::model::{histogram, make_paninski_far, make_point_mass, make_uniform};
use streamtest::{BitLedger, Counts, ProblemParams, SampleStream, Verdict};

/// Target success probability of every tester.
const TARGET: f64 = 2.0 / 3.0;
/// Allowed shortfall below `TARGET`, in binomial standard deviations.
const SIGMAS: f64 = 3.0;
/// Allowed Monte Carlo deviation of the unseen mean, in standard errors.
const MEAN_SE: f64 = 4.0;
/// Slack on floating-point constants that are exact in decimal.
const FLOAT_SLACK: f64 = 1e-12;

const MASTER_SEED: u64 = 0x5eed_2024;

type Criterion = (&'static str, fn() -> Check);

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check { pass, detail: detail.into() }
}

fn success_floor(trials: u64) -> f64 {
    TARGET - SIGMAS * (TARGET * (1.0 - TARGET) / trials as f64).sqrt()
}

fn ctx() -> &'static ExperimentContext {
    static CTX: OnceLock<ExperimentContext> = OnceLock::new();
    CTX.get_or_init(ExperimentContext::builtin)
}

fn experiment(
    algo: Algo,
    params: ProblemParams,
    family: Family,
    reference: Option<Family>,
    trials: u64,
) -> ExperimentSpec {
    ExperimentSpec { algo, params, family, reference, trials, master_seed: MASTER_SEED, output: None, timing: false }
}

/// Runs a null and an alternative experiment and checks both error rates.
fn null_and_alternative(null: &ExperimentSpec, alt: &ExperimentSpec) -> (Check, Vec<ErrorRateReport>) {
    let run = |spec| run_experiment(spec, ctx());
    let (null_report, alt_report) = match (run(null), run(alt)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (check(false, format!("experiment failed: {e}")), Vec::new()),
    };
    let accept_floor = success_floor(null.trials);
    let reject_floor = success_floor(alt.trials);
    let pass = null_report.accept_rate >= accept_floor && alt_report.reject_rate() >= reject_floor;
    let detail = format!(
        "n={} {} accept {:.3} (floor {:.3}), {} reject {:.3} (floor {:.3})",
        null.params.n,
        null_report.family,
        null_report.accept_rate,
        accept_floor,
        alt_report.family,
        alt_report.reject_rate(),
        reject_floor
    );
    (check(pass, detail), vec![null_report, alt_report])
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vectors = 10_000;
    for i in 0..vectors {
        let k = rng.random_range(2..=512usize);
        let total = rng.random_range(1..=k as u64);
        // Half the vectors concentrate on a small support to cover collisions.
        let support = if i % 2 == 0 { k } else { rng.random_range(1..=k) };
        let mut counts = Counts::zeros(k);
        for _ in 0..total {
            counts.add(rng.random_range(0..support));
        }
        let unseen = unseen_statistic(&counts, k).expect("total <= k");
        let tv = empirical_tv_statistic(&counts, total, k).expect("total >= 1");
        if unseen != tv {
            return check(false, format!("k={k}, s={total}: {unseen:?} != {tv:?}"));
        }
    }
    check(true, format!("{vectors} vectors identical as exact rationals"))
}

fn criterion_2() -> Check {
    let (k, s, batches) = (100usize, 50u64, 100_000u64);
    let (mean, var) = exact_unseen_moments(k, s).expect("s <= k");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = vec![false; k];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..batches {
        seen.fill(false);
        for _ in 0..s {
            seen[rng.random_range(0..k)] = true;
        }
        let z = seen.iter().filter(|&&b| !b).count() as f64 / k as f64;
        sum += z;
        sum_sq += z * z;
    }
    let mc_mean = sum / batches as f64;
    let mc_var = sum_sq / batches as f64 - mc_mean * mc_mean;
    let se = (mc_var / batches as f64).sqrt();
    let mean_ok = (mc_mean - mean).abs() <= MEAN_SE * se;
    let (ratio, rk, rs) = max_variance_ratio(512);
    check(
        mean_ok && ratio <= 1.0,
        format!(
            "mean exact {mean:.6} mc {mc_mean:.6} ({:.2} se); var exact {var:.3e} mc {mc_var:.3e}; \
             max var/(2s^2/k^3) = {ratio:.4} at k={rk}, s={rs}",
            (mc_mean - mean).abs() / se
        ),
    )
}

fn criterion_3() -> &'static (Check, Vec<ErrorRateReport>) {
    static RESULT: OnceLock<(Check, Vec<ErrorRateReport>)> = OnceLock::new();
    RESULT.get_or_init(|| {
        let (k, eps, m, trials) = (500, 0.5, 530, 200);
        let n = match planned_samples(Algo::Batch, k, eps, m, &ctx().record) {
            Ok(n) => n,
            Err(e) => return (check(false, format!("planning failed: {e}")), Vec::new()),
        };
        let params = ProblemParams::new(k, eps, n, m);
        let plan = plan_batches(&params).expect("valid batch plan");
        let layout_ok = plan.s == 55 && plan.batches == 30_016 && plan.regime == BatchRegime::SmallS;
        let null = experiment(Algo::Batch, params, Family::Uniform, None, trials);
        let alt = experiment(Algo::Batch, params, Family::Paninski(None), None, trials);
        let (c, reports) = null_and_alternative(&null, &alt);
        let detail = format!("s={} T={} {}", plan.s, plan.batches, c.detail);
        (check(layout_ok && c.pass, detail), reports)
    })
}

fn criterion_4() -> Check {
    let mut reports: Vec<&ErrorRateReport> = Vec::new();
    for (_, r) in [criterion_3(), criterion_6(), criterion_7()] {
        reports.extend(r);
    }
    if reports.len() != 6 {
        return check(false, format!("only {} of 6 reports available", reports.len()));
    }
    let over: Vec<String> = reports
        .iter()
        .filter(|r| r.breaches > 0 || r.peak_bits > r.params.m)
        .map(|r| format!("{} {} peak {} > m {}", r.algo, r.family, r.peak_bits, r.params.m))
        .collect();
    let peaks: Vec<String> = reports.iter().map(|r| format!("{}:{}/{}", r.algo, r.peak_bits, r.params.m)).collect();
    if over.is_empty() {
        check(true, format!("no breaches; peak/m {}", peaks.join(" ")))
    } else {
        check(false, over.join("; "))
    }
}

fn criterion_5() -> Check {
    let c1 = 0.3;
    let contraction_floor = 0.05;
    let point = make_point_mass(6, 0).expect("pmf");
    let uniform6 = make_uniform(6).expect("pmf");
    let exact = contraction_probability_oracle(&point, &uniform6, 2, c1, 0, 5, OracleMode::Exhaustive);
    let far = make_paninski_far(8, 0.5).expect("pmf");
    let uniform8 = make_uniform(8).expect("pmf");
    let sampled = contraction_probability_oracle(&far, &uniform8, 4, c1, 10_000, 5, OracleMode::Sampled);
    match (exact, sampled) {
        (Ok(a), Ok(b)) => check(
            a.exhaustive && a.partitions == 10 && a.probability == 1.0 && b.probability >= contraction_floor,
            format!(
                "point mass: {}/{} partitions contract (prob {}); paninski k=8 k'=4: prob {:.4} over {} (floor {contraction_floor})",
                (a.probability * a.partitions as f64).round(),
                a.partitions,
                a.probability,
                b.probability,
                b.partitions
            ),
        ),
        (Err(e), _) | (_, Err(e)) => check(false, format!("oracle failed: {e}")),
    }
}

fn criterion_6() -> &'static (Check, Vec<ErrorRateReport>) {
    static RESULT: OnceLock<(Check, Vec<ErrorRateReport>)> = OnceLock::new();
    RESULT.get_or_init(|| compressed_pair(Algo::Compress, Family::Uniform, None, Family::Paninski(None), None))
}

fn criterion_7() -> &'static (Check, Vec<ErrorRateReport>) {
    static RESULT: OnceLock<(Check, Vec<ErrorRateReport>)> = OnceLock::new();
    RESULT.get_or_init(|| {
        compressed_pair(
            Algo::Closeness,
            Family::Uniform,
            Some(Family::Uniform),
            Family::Paninski(None),
            Some(Family::Uniform),
        )
    })
}

fn compressed_pair(
    algo: Algo,
    null_family: Family,
    null_reference: Option<Family>,
    alt_family: Family,
    alt_reference: Option<Family>,
) -> (Check, Vec<ErrorRateReport>) {
    let (k, eps, m, trials) = (10_000, 0.5, 1400, 100);
    let n = match planned_samples(algo, k, eps, m, &ctx().record) {
        Ok(n) => n,
        Err(e) => return (check(false, format!("planning failed: {e}")), Vec::new()),
    };
    let params = ProblemParams::new(k, eps, n, m);
    let null = experiment(algo, params, null_family, null_reference, trials);
    let alt = experiment(algo, params, alt_family, alt_reference, trials);
    null_and_alternative(&null, &alt)
}

fn criterion_8() -> Check {
    let replicates = 10_000u32;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    for &delta in &[0.01, 0.05, 0.1, 0.2, 0.3] {
        for &c2 in &[0.05, 0.2, 0.5, 0.8, 1.0] {
            if delta >= c2 / (1.0 + c2) {
                continue;
            }
            cases += 1;
            let threshold = amplification_threshold(delta, c2).expect("valid pair");
            // Per-repetition accept probabilities: uniform input, and far input in the worst case.
            let accept_uniform = 1.0 - delta;
            let accept_far = 1.0 - (1.0 - delta) * c2;
            let rate = |rng: &mut ChaCha8Rng, p: f64| {
                (0..replicates).filter(|_| rng.random_bool(p)).count() as f64 / f64::from(replicates)
            };
            let (ru, rf) = (rate(&mut rng, accept_uniform), rate(&mut rng, accept_far));
            if !(rf < threshold && threshold < ru) {
                return check(false, format!("delta={delta} c2={c2}: threshold {threshold} not in ({rf}, {ru})"));
            }
            let reps = amplification_repetitions(delta, c2).expect("valid pair");
            let mut errors = [0u32; 2];
            for _ in 0..replicates {
                for (case, p) in [accept_uniform, accept_far].into_iter().enumerate() {
                    let accepts = (0..reps).filter(|_| rng.random_bool(p)).count() as u64;
                    let verdict = amplify_counts(accepts, reps, delta, c2).expect("valid counts");
                    let wrong = if case == 0 { verdict == Verdict::Reject } else { verdict == Verdict::Accept };
                    errors[case] += u32::from(wrong);
                }
            }
            let worst = errors.iter().copied().max().unwrap_or(0) as f64 / f64::from(replicates);
            if worst > 1.0 / 3.0 {
                return check(false, format!("delta={delta} c2={c2}: amplified error {worst} with R={reps}"));
            }
        }
    }
    let t = amplification_threshold(0.1, 0.5).expect("valid pair");
    check(
        (t - 0.725).abs() <= FLOAT_SLACK,
        format!("{cases} (delta, c2) pairs separated, amplified error <= 1/3; threshold(0.1, 0.5) = {t}"),
    )
}

fn criterion_9() -> Check {
    // Unconstrained memory: raw counts fit, so no compression happens.
    let (k, eps, n) = (100usize, 0.5, 2000u64);
    let m = k as u64 * streamtest::bits_for_counter(n);
    let params = ProblemParams::new(k, eps, n, m);
    let constants = ctx().record.compression_constants();
    let tester = match CompressedUniformity::new(params, constants, &ctx().cache) {
        Ok(t) => t,
        Err(e) => return check(false, format!("tester setup failed: {e}")),
    };
    let uncompressed = !tester.plan().compressed && tester.plan().k_prime == k;
    let far = make_paninski_far(k, eps).expect("pmf");
    let uniform = make_uniform(k).expect("pmf");
    let mut agree = 0;
    let mut rejects = 0;
    let seeds = 100u64;
    for seed in 0..seeds {
        let p = if seed % 2 == 0 { &uniform } else { &far };
        let mut ledger = BitLedger::new(m);
        let compressed = tester.run(&mut SampleStream::new(p, n, seed), &mut ledger, seed).map(|o| o.verdict);
        let counts = histogram(SampleStream::new(p, n, seed), k).expect("in range");
        let base = identity_chi2_test(&counts, tester.reference(), tester.config());
        if let (Ok(a), Ok(b)) = (compressed, base) {
            agree += u64::from(a == b);
            rejects += u64::from(b == Verdict::Reject);
        }
    }
    let identical = uncompressed && agree == seeds;

    // Unconstrained memory for the batch tester: the whole stream is one batch.
    let (k, n) = (1usize << 18, 250_000u64);
    let m = n * streamtest::model::ceil_log2(k as u64);
    let params = ProblemParams::new(k, eps, n, m);
    let batch = plan_batches(&params).and_then(|plan| {
        let tester = BatchTester::with_plan(params, plan, &ctx().record.large_s);
        let far = make_paninski_far(k, eps)?;
        let uniform = make_uniform(k)?;
        let mut correct = [0u64; 2];
        let trials = 20u64;
        for seed in 0..trials {
            for (i, p) in [&uniform, &far].into_iter().enumerate() {
                let mut ledger = BitLedger::new(m);
                let v = tester.run(&mut SampleStream::new(p, n, 1000 + seed), &mut ledger)?.verdict;
                correct[i] += u64::from((v == Verdict::Accept) == (i == 0));
            }
        }
        Ok((plan, correct, trials))
    });
    match batch {
        Ok((plan, correct, trials)) => {
            let floor = success_floor(trials);
            let rates = correct.map(|c| c as f64 / trials as f64);
            let batch_ok = plan.batches <= 2 && rates.iter().all(|&r| r >= floor);
            check(
                identical && batch_ok,
                format!(
                    "raw counts: {agree}/{seeds} verdicts identical ({rejects} rejects, compressed={}); \
                     k=2^18 n={n}: s={} T={}, uniform accept {:.2}, paninski reject {:.2} (floor {floor:.3})",
                    tester.plan().compressed,
                    plan.s,
                    plan.batches,
                    rates[0],
                    rates[1]
                ),
            )
        }
        Err(e) => check(false, format!("batch degeneration failed: {e}")),
    }
}

fn criterion_10() -> Check {
    let specs = [
        experiment(Algo::Batch, ProblemParams::new(64, 0.5, 400_000, 100), Family::Paninski(None), None, 40),
        experiment(Algo::Compress, ProblemParams::new(1000, 0.5, 200_000, 400), Family::Uniform, None, 10),
        experiment(
            Algo::Closeness,
            ProblemParams::new(1000, 0.5, 200_000, 400),
            Family::Paninski(None),
            Some(Family::Uniform),
            10,
        ),
    ];
    let render = |threads: usize| -> streamtest::Result<Vec<u8>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| streamtest::Error::InvalidParameter(e.to_string()))?;
        let reports = pool.install(|| specs.iter().map(|s| run_experiment(s, ctx())).collect::<Result<Vec<_>, _>>())?;
        let mut out = Vec::new();
        write_reports_csv(&reports, &mut out)?;
        Ok(out)
    };
    match (render(1), render(1), render(4)) {
        (Ok(a), Ok(b), Ok(c)) => {
            check(a == b && a == c, format!("{} CSV bytes identical across reruns and thread counts 1 and 4", a.len()))
        }
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => check(false, format!("experiment failed: {e}")),
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("statistic identity", criterion_1),
        ("unseen moments", criterion_2),
        ("batch tester end to end", || {
            let (c, _) = criterion_3();
            check(c.pass, c.detail.clone())
        }),
        ("memory enforcement", criterion_4),
        ("contraction oracle", criterion_5),
        ("compressed uniformity end to end", || {
            let (c, _) = criterion_6();
            check(c.pass, c.detail.clone())
        }),
        ("compressed closeness end to end", || {
            let (c, _) = criterion_7();
            check(c.pass, c.detail.clone())
        }),
        ("amplification gap", criterion_8),
        ("degeneration", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = run();
        let status = if result.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!result.pass);
        println!("criterion {:>2} {status} {name} [{:.1}s]: {}", i + 1, started.elapsed().as_secs_f64(), result.detail);
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
