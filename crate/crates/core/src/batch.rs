//! Uniformity testing in batches.
//!
//! The stream is cut into `T` batches of `s` samples. Each batch is buffered,
//! reduced to the empirical distance-to-uniform statistic `Z_t`, and folded
//! into an integer running sum; the buffer is then dropped. At the end the
//! average is compared to a threshold `tau`.
//!
//! When `s <= k` the statistic is the fraction of unseen symbols, so the
//! running sum `sum_t k * Z_t` is an integer in `0..=T*k`. When `s > k` the
//! raw integer `sum_i |N_i * k - s|` of each batch is accumulated instead and
//! the threshold uses calibrated gap constants.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};
use std::f64::consts::E;

use crate::error::{Error, Result};
use crate::ledger::{bits_for_counter, BitLedger};
use crate::model::{ceil_log2, make_uniform, Counts, Pmf, ProblemParams, SampleStream, Verdict};

/// An exact non-negative rational `numer / denom`.
#[derive(Debug, Clone, Copy, Eq)]
pub struct Ratio {
    pub numer: u64,
    pub denom: u64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        u128::from(self.numer) * u128::from(other.denom) == u128::from(other.numer) * u128::from(self.denom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchRegime {
    /// `s <= k`: unseen-symbol statistic.
    SmallS,
    /// `s > k`: raw empirical distance statistic.
    LargeS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    /// Samples per batch.
    pub s: u64,
    /// Number of batches.
    pub batches: u64,
    pub regime: BatchRegime,
    /// Bits of the per-batch sample buffer, `s * ceil(log2 k)`.
    pub buffer_bits: u64,
    /// Bits of the running integer sum.
    pub accumulator_bits: u64,
}

impl BatchPlan {
    pub fn state_bits(&self) -> u64 {
        self.buffer_bits + self.accumulator_bits
    }

    /// Largest value the running sum can reach.
    pub fn accumulator_max(&self, k: usize) -> u64 {
        let k = k as u64;
        match self.regime {
            BatchRegime::SmallS => self.batches * k,
            BatchRegime::LargeS => self.batches * 2 * self.s * k,
        }
    }

    fn with_regime(s: u64, n: u64, k: usize, regime: BatchRegime) -> Self {
        let lk = ceil_log2(k as u64);
        let mut plan = Self { s, batches: n / s, regime, buffer_bits: s * lk, accumulator_bits: 0 };
        plan.accumulator_bits = bits_for_counter(plan.accumulator_max(k));
        plan
    }
}

/// Largest batch size whose buffer and accumulator fit in `m` bits.
///
/// The accumulator is budgeted as `bits_for_counter(n) + bits_for_counter(k)`
/// since `T <= n`. If that leaves room for more than `k` samples, the large-`s`
/// regime is used with the accumulator widened to `bits_for_counter(2nk)`.
/// The batch size never drops below one sample.
pub fn plan_batches(params: &ProblemParams) -> Result<BatchPlan> {
    let k = params.k as u64;
    let n = params.n;
    let m = params.m;
    if params.k < 2 || n == 0 {
        return Err(Error::InvalidParameter(format!("k={} and n={n} must be positive", params.k)));
    }
    let lk = ceil_log2(k);
    if lk > m {
        return Err(Error::InvalidParameter(format!("m={m} bits cannot hold a single sample of {lk} bits")));
    }
    let small_fixed = bits_for_counter(n) + bits_for_counter(k);
    let s_small = (m.saturating_sub(small_fixed) / lk).clamp(1, n);
    if s_small <= k {
        return Ok(BatchPlan::with_regime(s_small, n, params.k, BatchRegime::SmallS));
    }
    let large_fixed = bits_for_counter(n.saturating_mul(2).saturating_mul(k));
    let s_large = (m.saturating_sub(large_fixed) / lk).min(n);
    if s_large > k {
        Ok(BatchPlan::with_regime(s_large, n, params.k, BatchRegime::LargeS))
    } else {
        Ok(BatchPlan::with_regime(k, n, params.k, BatchRegime::SmallS))
    }
}

/// Fraction of unseen symbols, as `#{i : N_i = 0} / k`.
pub fn unseen_statistic(counts: &Counts, k: usize) -> Result<Ratio> {
    if counts.k() != k {
        return Err(Error::LengthMismatch { expected: k, actual: counts.k() });
    }
    if counts.total() > k as u64 {
        return Err(Error::InvalidParameter(format!(
            "unseen statistic needs total <= k, got {} > {k}",
            counts.total()
        )));
    }
    let unseen = counts.freq().iter().filter(|&&c| c == 0).count() as u64;
    Ok(Ratio { numer: unseen, denom: k as u64 })
}

/// Empirical distance to uniform, as `sum_i |N_i k - s| / (2 s k)`.
pub fn empirical_tv_statistic(counts: &Counts, s: u64, k: usize) -> Result<Ratio> {
    if counts.k() != k {
        return Err(Error::LengthMismatch { expected: k, actual: counts.k() });
    }
    if counts.total() != s {
        return Err(Error::TotalMismatch { expected: s, actual: counts.total() });
    }
    if s == 0 {
        return Err(Error::InvalidParameter("empirical distance needs s >= 1".into()));
    }
    let kk = k as u64;
    let numer = counts.freq().iter().map(|&c| (c * kk).abs_diff(s)).sum();
    Ok(Ratio { numer, denom: 2 * s * kk })
}

/// Number of distinct symbols in a sorted buffer.
fn distinct_sorted(buf: &[u32]) -> u64 {
    if buf.is_empty() {
        return 0;
    }
    1 + buf.windows(2).filter(|w| w[0] != w[1]).count() as u64
}

/// `sum_i |N_i k - s|` computed from a sorted buffer of `s` samples.
fn tv_numerator_sorted(buf: &[u32], k: u64) -> u64 {
    let s = buf.len() as u64;
    let mut total = 0;
    let mut distinct = 0;
    for run in buf.chunk_by(|a, b| a == b) {
        total += (run.len() as u64 * k).abs_diff(s);
        distinct += 1;
    }
    total + (k - distinct) * s
}

/// Guaranteed expectation gap between an `eps`-far distribution and uniform,
/// `s^2 eps^2 / (4 e k^2)`.
pub fn expectation_gap(s: u64, k: usize, eps: f64) -> f64 {
    let (s, k) = (s as f64, k as f64);
    s * s * eps * eps / (4.0 * E * k * k)
}

/// Expected unseen fraction under uniform, `(1 - 1/k)^s`.
pub fn unseen_mean_uniform(s: u64, k: usize) -> f64 {
    (s as f64 * (-1.0 / k as f64).ln_1p()).exp()
}

/// `(1 - 1/k)^s + s^2 eps^2 / (8 e k^2)`.
pub fn threshold_small(s: u64, k: usize, eps: f64) -> f64 {
    unseen_mean_uniform(s, k) + expectation_gap(s, k, eps) / 2.0
}

/// Batches needed for Chebyshev error at most 1/3: `ceil(1536 e^2 k / (s^2 eps^4))`.
pub fn required_batches(s: u64, k: usize, eps: f64) -> u64 {
    let s = s as f64;
    (1536.0 * E * E * k as f64 / (s * s * eps.powi(4))).ceil() as u64
}

/// Calibrated constants for the large-`s` expectation gap:
/// `mid * eps^2 * sqrt(s/k)` for `k < s <= k/eps^2` and `high * eps` beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LargeSGap {
    pub mid: f64,
    pub high: f64,
}

impl LargeSGap {
    pub fn gap(&self, s: u64, k: usize, eps: f64) -> f64 {
        let (sf, kf) = (s as f64, k as f64);
        if sf <= kf / (eps * eps) {
            self.mid * eps * eps * (sf / kf).sqrt()
        } else {
            self.high * eps
        }
    }
}

/// Exact `E_p[Z]` of the empirical distance statistic on `s` samples from `p`.
///
/// Each `N_i` is `Binomial(s, p_i)`; equal probabilities share one summation.
pub fn expected_tv_statistic(p: &Pmf, s: u64) -> f64 {
    let k = p.k() as u64;
    let mut probs: Vec<f64> = p.probs().to_vec();
    probs.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for run in probs.chunk_by(|a, b| a == b) {
        let pi = run[0];
        let mad = if pi == 0.0 {
            s as f64
        } else if pi == 1.0 {
            (s * k).abs_diff(s) as f64
        } else {
            let b = Binomial::new(pi, s).expect("valid binomial");
            (0..=s).map(|j| b.pmf(j) * (j * k).abs_diff(s) as f64).sum()
        };
        total += run.len() as f64 * mad;
    }
    total / (2.0 * s as f64 * k as f64)
}

/// `E_uniform[Z] + gap / 2` for the large-`s` regime.
pub fn threshold_large(s: u64, k: usize, eps: f64, gap: &LargeSGap) -> f64 {
    let uniform = make_uniform(k).expect("k >= 2");
    expected_tv_statistic(&uniform, s) + gap.gap(s, k, eps) / 2.0
}

/// Result of one batch-tester run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutcome {
    pub verdict: Verdict,
    /// Integer running sum at the end of the stream.
    pub scaled_sum: u64,
    /// `scaled_sum / normalizer` is the average statistic.
    pub normalizer: u64,
}

impl BatchOutcome {
    pub fn mean_statistic(&self) -> f64 {
        self.scaled_sum as f64 / self.normalizer as f64
    }
}

/// A planned batch tester for fixed parameters.
#[derive(Debug, Clone)]
pub struct BatchTester {
    params: ProblemParams,
    plan: BatchPlan,
    tau: f64,
}

impl BatchTester {
    pub fn new(params: ProblemParams, gap: &LargeSGap) -> Result<Self> {
        let params = params.validate()?;
        let plan = plan_batches(&params)?;
        Ok(Self::with_plan(params, plan, gap))
    }

    /// Uses an explicit plan, bypassing budget-driven planning.
    pub fn with_plan(params: ProblemParams, plan: BatchPlan, gap: &LargeSGap) -> Self {
        let tau = match plan.regime {
            BatchRegime::SmallS => threshold_small(plan.s, params.k, params.eps),
            BatchRegime::LargeS => threshold_large(plan.s, params.k, params.eps, gap),
        };
        Self { params, plan, tau }
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn params(&self) -> &ProblemParams {
        &self.params
    }

    pub fn threshold(&self) -> f64 {
        self.tau
    }

    /// Consumes `s * T` samples; leftover samples are not read.
    pub fn run(&self, stream: &mut SampleStream<'_>, ledger: &mut BitLedger) -> Result<BatchOutcome> {
        let BatchPlan { s, batches, regime, .. } = self.plan;
        stream.require(s * batches)?;
        let k = self.params.k as u64;
        ledger.charge("accumulator", self.plan.accumulator_bits)?;
        let mut buf: Vec<u32> = Vec::with_capacity(s as usize);
        let mut scaled_sum = 0u64;
        for _ in 0..batches {
            ledger.charge("sample_buffer", self.plan.buffer_bits)?;
            buf.clear();
            buf.extend(stream.by_ref().take(s as usize).map(|x| x as u32));
            buf.sort_unstable();
            scaled_sum += match regime {
                BatchRegime::SmallS => k - distinct_sorted(&buf),
                BatchRegime::LargeS => tv_numerator_sorted(&buf, k),
            };
            ledger.release("sample_buffer")?;
        }
        ledger.release("accumulator")?;
        let normalizer = match regime {
            BatchRegime::SmallS => batches * k,
            BatchRegime::LargeS => batches * 2 * s * k,
        };
        let mean = scaled_sum as f64 / normalizer as f64;
        let verdict = if mean > self.tau { Verdict::Reject } else { Verdict::Accept };
        Ok(BatchOutcome { verdict, scaled_sum, normalizer })
    }
}
