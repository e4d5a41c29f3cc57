//! Testing through domain compression.
//!
//! The budget fixes a compressed domain size `k'`. Each repetition draws a
//! fresh balanced partition, maps a disjoint segment of the stream into `k'`
//! cells, keeps only the cell counts and runs a base tester against the
//! image of the uniform distribution. The repetition verdicts are combined by
//! thresholding their acceptance rate.
//!
//! Memory layout per run: one partition key, two repetition counters (index
//! and accepts, only when there is more than one repetition) and `k'` count
//! registers of `bits_for_counter(n)` bits per stream. When all `k` raw
//! counts fit, the plan skips compression and amplification altogether.

use serde::{Deserialize, Serialize};

use crate::base::{closeness_test, identity_chi2_test, TesterConfig};
use crate::calibration::{Statistic, ThresholdCache};
use crate::compression::{partition_key_bits, sample_partition, Partition};
use crate::error::{Error, Result};
use crate::ledger::{bits_for_counter, BitLedger};
use crate::model::{make_uniform, Counts, Pmf, ProblemParams, SampleStream, Verdict};
use crate::rng::derive_seed;

/// Per-repetition failure probability used when the plan does not compress.
pub const UNCOMPRESSED_DELTA: f64 = 1.0 / 3.0;

/// Upper bound on planner iterations for the sample requirement.
const MAX_FIXED_POINT_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConstants {
    /// Distance retained by a good partition, as a multiple of `sqrt(k'/k) eps`.
    pub c1: f64,
    /// Lower bound on the probability that a random partition is good.
    pub c2: f64,
    /// Per-repetition failure probability of the base tester.
    pub delta: f64,
}

/// Accept iff the acceptance rate is at least `1 - (delta + (1 - delta) c2) / 2`.
pub fn amplification_threshold(delta: f64, c2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) || !(c2 > 0.0 && c2 <= 1.0) || delta >= c2 / (1.0 + c2) {
        return Err(Error::NoAmplificationGap { delta, c2 });
    }
    Ok(1.0 - (delta + (1.0 - delta) * c2) / 2.0)
}

/// Smallest `R` for which Hoeffding's bound puts either error below 1/3.
///
/// The two acceptance rates are at least `1 - delta` and at most
/// `1 - (1 - delta) c2`; the threshold sits halfway.
pub fn amplification_repetitions(delta: f64, c2: f64) -> Result<u64> {
    amplification_threshold(delta, c2)?;
    let half_gap = ((1.0 - delta) * c2 - delta) / 2.0;
    Ok(((3.0f64).ln() / (2.0 * half_gap * half_gap)).ceil().max(1.0) as u64)
}

pub fn amplify_counts(accepts: u64, repetitions: u64, delta: f64, c2: f64) -> Result<Verdict> {
    let threshold = amplification_threshold(delta, c2)?;
    if repetitions == 0 || accepts > repetitions {
        return Err(Error::InvalidParameter(format!("{accepts} accepts out of {repetitions} repetitions")));
    }
    let rate = accepts as f64 / repetitions as f64;
    Ok(if rate >= threshold { Verdict::Accept } else { Verdict::Reject })
}

pub fn amplify(verdicts: &[Verdict], delta: f64, c2: f64) -> Result<Verdict> {
    let accepts = verdicts.iter().filter(|v| v.is_accept()).count() as u64;
    amplify_counts(accepts, verdicts.len() as u64, delta, c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionPlan {
    pub k_prime: usize,
    pub eps_prime: f64,
    pub repetitions: u64,
    pub delta: f64,
    /// False when every raw count fits and no partition is used.
    pub compressed: bool,
    pub key_bits: u64,
    /// Repetition index and accept counter together.
    pub counter_bits: u64,
    /// Width of one count register.
    pub count_bits: u64,
    /// Number of count vectors held at once.
    pub streams: u64,
}

impl CompressionPlan {
    pub fn segment_len(&self, n: u64) -> u64 {
        n / self.repetitions
    }

    pub fn count_vector_bits(&self) -> u64 {
        self.k_prime as u64 * self.count_bits
    }

    pub fn peak_bits(&self) -> u64 {
        self.key_bits + self.counter_bits + self.streams * self.count_vector_bits()
    }
}

/// Layout arithmetic shared by the planners; no regime check.
fn plan_layout(
    k: usize,
    eps: f64,
    n: u64,
    m: u64,
    constants: &CompressionConstants,
    streams: u64,
) -> Result<CompressionPlan> {
    let count_bits = bits_for_counter(n);
    if (k as u64).saturating_mul(count_bits).saturating_mul(streams) <= m {
        return Ok(CompressionPlan {
            k_prime: k,
            eps_prime: eps,
            repetitions: 1,
            delta: UNCOMPRESSED_DELTA,
            compressed: false,
            key_bits: 0,
            counter_bits: 0,
            count_bits,
            streams,
        });
    }
    let repetitions = amplification_repetitions(constants.delta, constants.c2)?;
    let counter_bits = if repetitions > 1 { 2 * bits_for_counter(repetitions) } else { 0 };
    let key_bits = partition_key_bits(k);
    let room = m.saturating_sub(key_bits + counter_bits);
    let k_prime = ((room / (streams * count_bits)) as usize).min(k);
    if k_prime < 2 {
        return Err(Error::InvalidParameter(format!(
            "budget m={m} leaves room for {k_prime} cells; at least 2 are needed"
        )));
    }
    Ok(CompressionPlan {
        k_prime,
        eps_prime: constants.c1 * (k_prime as f64 / k as f64).sqrt() * eps,
        repetitions,
        delta: constants.delta,
        compressed: true,
        key_bits,
        counter_bits,
        count_bits,
        streams,
    })
}

pub fn plan_compression(params: &ProblemParams, constants: &CompressionConstants) -> Result<CompressionPlan> {
    let p = params.validate()?;
    plan_layout(p.k, p.eps, p.n, p.m, constants, 1)
}

/// Plan with room for two count vectors, one per stream.
pub fn plan_compression_closeness(params: &ProblemParams, constants: &CompressionConstants) -> Result<CompressionPlan> {
    let p = params.validate()?;
    plan_layout(p.k, p.eps, p.n, p.m, constants, 2)
}

/// Per-repetition sample size `ceil(c4 sqrt(k') / eps'^2)` of the identity tester.
pub fn identity_segment_len(k_prime: usize, eps_prime: f64, c4: f64) -> u64 {
    (c4 * (k_prime as f64).sqrt() / (eps_prime * eps_prime)).ceil().max(1.0) as u64
}

/// Per-repetition sample size `ceil(c4 (sqrt(k')/eps'^2 + k'^(2/3)/eps'^(4/3)))`
/// of the closeness tester.
pub fn closeness_segment_len(k_prime: usize, eps_prime: f64, c4: f64) -> u64 {
    let kp = k_prime as f64;
    let rate = kp.sqrt() / (eps_prime * eps_prime) + kp.powf(2.0 / 3.0) / eps_prime.powf(4.0 / 3.0);
    (c4 * rate).ceil().max(1.0) as u64
}

fn fixed_point_samples(
    k: usize,
    eps: f64,
    m: u64,
    constants: &CompressionConstants,
    streams: u64,
    segment: impl Fn(&CompressionPlan) -> u64,
) -> Result<u64> {
    // Start from the rate with all counts in memory.
    let full = plan_layout(k, eps, 1, u64::MAX, constants, streams)?;
    let mut n = segment(&full);
    let mut previous = None;
    for _ in 0..MAX_FIXED_POINT_STEPS {
        let plan = plan_layout(k, eps, n, m, constants, streams)?;
        let next = plan.repetitions * segment(&plan);
        if next == n || Some(next) == previous {
            return Ok(n.max(next));
        }
        previous = Some(n);
        n = next;
    }
    Ok(n)
}

/// Stream length at which the compressed uniformity tester runs at its
/// calibrated rate. The count width depends on `n`, so the planner iterates
/// to a fixed point.
pub fn required_samples_uniformity(
    k: usize,
    eps: f64,
    m: u64,
    constants: &CompressionConstants,
    c4: f64,
) -> Result<u64> {
    fixed_point_samples(k, eps, m, constants, 1, |p| identity_segment_len(p.k_prime, p.eps_prime, c4))
}

pub fn required_samples_closeness(
    k: usize,
    eps: f64,
    m: u64,
    constants: &CompressionConstants,
    c4: f64,
) -> Result<u64> {
    fixed_point_samples(k, eps, m, constants, 2, |p| closeness_segment_len(p.k_prime, p.eps_prime, c4))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressedOutcome {
    pub verdict: Verdict,
    pub accepts: u64,
    pub repetitions: u64,
}

/// Shared plan, reference and threshold of a compressed run.
#[derive(Debug, Clone)]
struct Setup {
    params: ProblemParams,
    constants: CompressionConstants,
    plan: CompressionPlan,
    reference: Pmf,
    config: TesterConfig,
}

impl Setup {
    fn new(
        params: ProblemParams,
        constants: CompressionConstants,
        plan: CompressionPlan,
        threshold: f64,
    ) -> Result<Self> {
        let reference = reference_for(&plan, params.k)?;
        let config = TesterConfig::new(plan.k_prime, plan.eps_prime, plan.delta, threshold)?;
        Ok(Self { params, constants, plan, reference, config })
    }

    fn partition(&self, seed: u64, repetition: u64) -> Result<Partition> {
        if self.plan.compressed {
            sample_partition(self.params.k, self.plan.k_prime, derive_seed(seed, repetition))
        } else {
            Ok(Partition::identity(self.params.k))
        }
    }

    fn verdict(&self, accepts: u64) -> Result<Verdict> {
        if self.plan.compressed {
            amplify_counts(accepts, self.plan.repetitions, self.plan.delta, self.constants.c2)
        } else {
            Ok(if accepts == 1 { Verdict::Accept } else { Verdict::Reject })
        }
    }

    fn charge_counters(&self, ledger: &mut BitLedger) -> Result<()> {
        if self.plan.counter_bits > 0 {
            ledger.charge("repetition_counter", self.plan.counter_bits / 2)?;
            ledger.charge("accept_counter", self.plan.counter_bits / 2)?;
        }
        Ok(())
    }

    fn release_counters(&self, ledger: &mut BitLedger) -> Result<()> {
        if self.plan.counter_bits > 0 {
            ledger.release("accept_counter")?;
            ledger.release("repetition_counter")?;
        }
        Ok(())
    }

    fn charge_key(&self, ledger: &mut BitLedger, pi: &Partition) -> Result<()> {
        if pi.key_bits() > 0 {
            ledger.charge("partition_key", pi.key_bits())?;
        }
        Ok(())
    }

    fn release_key(&self, ledger: &mut BitLedger, pi: &Partition) -> Result<()> {
        if pi.key_bits() > 0 {
            ledger.release("partition_key")?;
        }
        Ok(())
    }
}

/// The image of the uniform distribution under any partition the plan uses.
fn reference_for(plan: &CompressionPlan, k: usize) -> Result<Pmf> {
    if plan.compressed {
        Ok(sample_partition(k, plan.k_prime, 0)?.induced_uniform())
    } else {
        make_uniform(k)
    }
}

fn fill_counts(stream: &mut SampleStream<'_>, pi: &Partition, len: u64, counts: &mut Counts) {
    counts.clear();
    for x in stream.take(len as usize) {
        counts.add(pi.cell_of(x));
    }
}

/// Uniformity testing with `k'` cell counts in memory.
#[derive(Debug, Clone)]
pub struct CompressedUniformity {
    setup: Setup,
}

impl CompressedUniformity {
    /// Plans the run and looks up the null threshold for the segment length.
    pub fn new(params: ProblemParams, constants: CompressionConstants, cache: &ThresholdCache) -> Result<Self> {
        let plan = plan_compression(&params, &constants)?;
        let reference = reference_for(&plan, params.k)?;
        let threshold =
            cache.threshold(Statistic::IdentityChi2, params.k, &reference, plan.segment_len(params.n), plan.delta)?;
        Self::with_threshold(params, constants, plan, threshold)
    }

    pub fn with_threshold(
        params: ProblemParams,
        constants: CompressionConstants,
        plan: CompressionPlan,
        threshold: f64,
    ) -> Result<Self> {
        Ok(Self { setup: Setup::new(params, constants, plan, threshold)? })
    }

    pub fn plan(&self) -> &CompressionPlan {
        &self.setup.plan
    }

    pub fn reference(&self) -> &Pmf {
        &self.setup.reference
    }

    pub fn config(&self) -> &TesterConfig {
        &self.setup.config
    }

    /// The partition used by `repetition` of a run keyed by `seed`.
    pub fn partition(&self, seed: u64, repetition: u64) -> Result<Partition> {
        self.setup.partition(seed, repetition)
    }

    pub fn run(&self, stream: &mut SampleStream<'_>, ledger: &mut BitLedger, seed: u64) -> Result<CompressedOutcome> {
        let s = &self.setup;
        let plan = &s.plan;
        let segment = plan.segment_len(s.params.n);
        if segment == 0 {
            return Err(Error::InvalidParameter(format!(
                "n={} is shorter than the {} repetitions",
                s.params.n, plan.repetitions
            )));
        }
        stream.require(segment * plan.repetitions)?;
        s.charge_counters(ledger)?;
        let mut counts = Counts::zeros(plan.k_prime);
        let mut accepts = 0;
        for rep in 0..plan.repetitions {
            let pi = s.partition(seed, rep)?;
            s.charge_key(ledger, &pi)?;
            ledger.charge("induced_counts", plan.count_vector_bits())?;
            fill_counts(stream, &pi, segment, &mut counts);
            if identity_chi2_test(&counts, &s.reference, &s.config)?.is_accept() {
                accepts += 1;
            }
            ledger.release("induced_counts")?;
            s.release_key(ledger, &pi)?;
        }
        s.release_counters(ledger)?;
        Ok(CompressedOutcome { verdict: s.verdict(accepts)?, accepts, repetitions: plan.repetitions })
    }
}

/// Closeness testing with one shared partition per repetition and two
/// `k'`-cell count vectors in memory.
#[derive(Debug, Clone)]
pub struct CompressedCloseness {
    setup: Setup,
}

impl CompressedCloseness {
    pub fn new(params: ProblemParams, constants: CompressionConstants, cache: &ThresholdCache) -> Result<Self> {
        let plan = plan_compression_closeness(&params, &constants)?;
        let reference = reference_for(&plan, params.k)?;
        let threshold =
            cache.threshold(Statistic::Closeness, params.k, &reference, plan.segment_len(params.n), plan.delta)?;
        Self::with_threshold(params, constants, plan, threshold)
    }

    pub fn with_threshold(
        params: ProblemParams,
        constants: CompressionConstants,
        plan: CompressionPlan,
        threshold: f64,
    ) -> Result<Self> {
        Ok(Self { setup: Setup::new(params, constants, plan, threshold)? })
    }

    pub fn plan(&self) -> &CompressionPlan {
        &self.setup.plan
    }

    pub fn config(&self) -> &TesterConfig {
        &self.setup.config
    }

    pub fn partition(&self, seed: u64, repetition: u64) -> Result<Partition> {
        self.setup.partition(seed, repetition)
    }

    pub fn run(
        &self,
        stream_p: &mut SampleStream<'_>,
        stream_q: &mut SampleStream<'_>,
        ledger: &mut BitLedger,
        seed: u64,
    ) -> Result<CompressedOutcome> {
        let s = &self.setup;
        let plan = &s.plan;
        let (len_p, len_q) = (SampleStream::len(stream_p), SampleStream::len(stream_q));
        if len_p != len_q {
            return Err(Error::TotalMismatch { expected: len_p, actual: len_q });
        }
        let segment = plan.segment_len(s.params.n);
        if segment == 0 {
            return Err(Error::InvalidParameter(format!(
                "n={} is shorter than the {} repetitions",
                s.params.n, plan.repetitions
            )));
        }
        stream_p.require(segment * plan.repetitions)?;
        stream_q.require(segment * plan.repetitions)?;
        s.charge_counters(ledger)?;
        let mut counts_p = Counts::zeros(plan.k_prime);
        let mut counts_q = Counts::zeros(plan.k_prime);
        let mut accepts = 0;
        for rep in 0..plan.repetitions {
            let pi = s.partition(seed, rep)?;
            s.charge_key(ledger, &pi)?;
            ledger.charge("induced_counts_p", plan.count_vector_bits())?;
            ledger.charge("induced_counts_q", plan.count_vector_bits())?;
            fill_counts(stream_p, &pi, segment, &mut counts_p);
            fill_counts(stream_q, &pi, segment, &mut counts_q);
            if closeness_test(&counts_p, &counts_q, &s.config)?.is_accept() {
                accepts += 1;
            }
            ledger.release("induced_counts_q")?;
            ledger.release("induced_counts_p")?;
            s.release_key(ledger, &pi)?;
        }
        s.release_counters(ledger)?;
        Ok(CompressedOutcome { verdict: s.verdict(accepts)?, accepts, repetitions: plan.repetitions })
    }
}
