//! Problem parameters, explicit distributions, sample streams and histograms.
//!
//! Symbols are zero-based: a distribution over a domain of size `k` emits
//! symbols in `0..k`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::ledger::bits_for_counter;
use crate::rng;

/// Absolute tolerance on the total mass of a [`Pmf`].
pub const PMF_TOLERANCE: f64 = 1e-12;

/// `ceil(log2 x)` for `x >= 1`; zero for `x <= 1`.
pub fn ceil_log2(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        u64::from(64 - (x - 1).leading_zeros())
    }
}

/// `ceil(log2(1/eps))`, floored at zero.
fn ceil_log2_inv(eps: f64) -> u64 {
    (1.0 / eps).log2().ceil().max(0.0) as u64
}

/// Domain size, distance parameter, stream length and memory budget of one
/// testing instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub k: usize,
    pub eps: f64,
    pub n: u64,
    /// Memory budget in bits.
    pub m: u64,
}

impl ProblemParams {
    pub fn new(k: usize, eps: f64, n: u64, m: u64) -> Self {
        Self { k, eps, n, m }
    }

    /// `max(ceil log2 n, ceil log2 k, ceil log2 1/eps)`.
    pub fn regime_floor(&self) -> u64 {
        ceil_log2(self.n).max(ceil_log2(self.k as u64)).max(ceil_log2_inv(self.eps))
    }

    /// `min(k * ceil log2(n+1), n * ceil log2 k)`: storing all counts, or all samples.
    pub fn regime_ceiling(&self) -> u64 {
        let counts = (self.k as u64).saturating_mul(bits_for_counter(self.n));
        let samples = self.n.saturating_mul(ceil_log2(self.k as u64));
        counts.min(samples)
    }

    /// Checks basic ranges and the interesting-regime inequalities on `m`.
    pub fn validate(self) -> Result<Self> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!("k={} must be at least 2", self.k)));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::InvalidParameter(format!("eps={} must lie in (0, 1]", self.eps)));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be positive".into()));
        }
        let floor = self.regime_floor();
        if self.m < floor {
            return Err(Error::RegimeTooSmall { m: self.m, floor });
        }
        let ceiling = self.regime_ceiling();
        if self.m > ceiling {
            return Err(Error::RegimeTooLarge { m: self.m, ceiling });
        }
        Ok(self)
    }
}

/// Free-function form of [`ProblemParams::validate`].
pub fn validate_params(p: ProblemParams) -> Result<ProblemParams> {
    p.validate()
}

/// An explicit probability vector over `0..k`, with its cumulative table.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl Pmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidParameter(format!("a pmf needs at least 2 entries, got {}", probs.len())));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidParameter(format!("entry {i} is {p}, not a probability")));
        }
        let cdf: Vec<f64> = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let total = cdf[cdf.len() - 1];
        if (total - 1.0).abs() > PMF_TOLERANCE {
            return Err(Error::InvalidParameter(format!("pmf sums to {total}, not 1")));
        }
        Ok(Self { probs, cdf })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, symbol: usize) -> f64 {
        self.probs[symbol]
    }

    pub fn linf_norm(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Inverse-CDF lookup: the symbol whose cumulative interval contains `u` in [0, 1).
    #[inline]
    pub fn quantile(&self, u: f64) -> usize {
        let x = u * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= x).min(self.probs.len() - 1)
    }
}

pub fn make_uniform(k: usize) -> Result<Pmf> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k={k} must be at least 2")));
    }
    Pmf::new(vec![1.0 / k as f64; k])
}

/// The alternating pair perturbation `(1+2eps)/k, (1-2eps)/k, ...`, at TV distance
/// exactly `eps` from uniform.
pub fn make_paninski_far(k: usize, eps: f64) -> Result<Pmf> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("k={k} must be even and at least 2")));
    }
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::InvalidParameter(format!("eps={eps} must lie in [0, 1/2] for the pair perturbation")));
    }
    let hi = (1.0 + 2.0 * eps) / k as f64;
    let lo = (1.0 - 2.0 * eps) / k as f64;
    Pmf::new((0..k).map(|i| if i % 2 == 0 { hi } else { lo }).collect())
}

/// Uniform on the first `support_size` symbols.
pub fn make_subset_uniform(k: usize, support_size: usize) -> Result<Pmf> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k={k} must be at least 2")));
    }
    if support_size == 0 || support_size > k {
        return Err(Error::InvalidParameter(format!("support_size={support_size} must lie in [1, {k}]")));
    }
    let w = 1.0 / support_size as f64;
    Pmf::new((0..k).map(|i| if i < support_size { w } else { 0.0 }).collect())
}

pub fn make_point_mass(k: usize, symbol: usize) -> Result<Pmf> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k={k} must be at least 2")));
    }
    if symbol >= k {
        return Err(Error::SymbolOutOfRange { symbol, k });
    }
    let mut probs = vec![0.0; k];
    probs[symbol] = 1.0;
    Pmf::new(probs)
}

/// Half the L1 distance between two probability vectors of equal length.
pub fn tv_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { expected: p.len(), actual: q.len() });
    }
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

pub fn tv_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    tv_slices(p.probs(), q.probs())
}

/// A single-pass stream of `len` i.i.d. symbols drawn from `source`.
///
/// The `i`-th symbol is the inverse-CDF image of the `i`-th counter-based
/// uniform of `seed`, so a stream is a pure function of `(source, len, seed)`.
#[derive(Debug)]
pub struct SampleStream<'a> {
    source: &'a Pmf,
    len: u64,
    seed: u64,
    cursor: u64,
}

impl<'a> SampleStream<'a> {
    pub fn new(source: &'a Pmf, len: u64, seed: u64) -> Self {
        Self { source, len, seed, cursor: 0 }
    }

    pub fn source(&self) -> &Pmf {
        self.source
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Samples emitted so far.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn remaining(&self) -> u64 {
        self.len - self.cursor
    }

    /// Fails if fewer than `count` samples remain.
    pub fn require(&self, count: u64) -> Result<()> {
        if self.remaining() < count {
            return Err(Error::StreamExhausted { needed: count, available: self.remaining() });
        }
        Ok(())
    }
}

impl Iterator for SampleStream<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.cursor == self.len {
            return None;
        }
        let u = rng::counter_unit(self.seed, self.cursor);
        self.cursor += 1;
        Some(self.source.quantile(u))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = self.remaining() as usize;
        (r, Some(r))
    }
}

impl ExactSizeIterator for SampleStream<'_> {}

pub fn draw_stream(p: &Pmf, n: u64, seed: u64) -> SampleStream<'_> {
    SampleStream::new(p, n, seed)
}

/// Per-symbol frequencies of a batch of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    freq: Vec<u64>,
    total: u64,
}

impl Counts {
    pub fn zeros(k: usize) -> Self {
        Self { freq: vec![0; k], total: 0 }
    }

    pub fn from_freq(freq: Vec<u64>) -> Self {
        let total = freq.iter().sum();
        Self { freq, total }
    }

    pub fn k(&self) -> usize {
        self.freq.len()
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, symbol: usize) -> u64 {
        self.freq[symbol]
    }

    /// Records one occurrence of `symbol`. Panics if it is out of range.
    #[inline]
    pub fn add(&mut self, symbol: usize) {
        self.freq[symbol] += 1;
        self.total += 1;
    }

    pub fn try_add(&mut self, symbol: usize) -> Result<()> {
        if symbol >= self.freq.len() {
            return Err(Error::SymbolOutOfRange { symbol, k: self.freq.len() });
        }
        self.add(symbol);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.freq.iter_mut().for_each(|f| *f = 0);
        self.total = 0;
    }
}

pub fn histogram<I: IntoIterator<Item = usize>>(samples: I, k: usize) -> Result<Counts> {
    let mut counts = Counts::zeros(k);
    for x in samples {
        counts.try_add(x)?;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Accept => "ACCEPT",
            Verdict::Reject => "REJECT",
        })
    }
}
