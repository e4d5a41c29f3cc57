//! Domain compression by balanced random partitions.
//!
//! A [`Partition`] of `0..k` into `k'` cells is described by a short key. The
//! key drives a swap-or-not shuffle of `0..k`, and the shuffled positions are
//! chopped into consecutive blocks whose sizes differ by at most one.
//! Projecting a symbol therefore needs only the key and `O(1)` scratch state.

use crate::error::{Error, Result};
use crate::model::{ceil_log2, tv_slices, Counts, Pmf};
use crate::rng;

/// Bits of key material stored for a partition of a domain of size `k`.
pub fn partition_key_bits(k: usize) -> u64 {
    (2 * ceil_log2(k as u64)).clamp(32, 64)
}

/// Swap-or-not rounds used for a domain of size `k`.
pub fn shuffle_rounds(k: usize) -> usize {
    (3 * ceil_log2(k as u64) as usize).max(24)
}

/// Symbols shuffled together by [`Partition::cells_of`].
const PROJECTION_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Round {
    /// Offset in `0..k`; the round pairs `x` with `offset - x mod k`.
    offset: u64,
    /// Keys the coin that decides whether a pair is swapped.
    coin: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CellMap {
    /// `cell_of(x) = x`.
    Identity,
    Keyed {
        key: u64,
        key_bits: u64,
        /// Expanded from `key`; a cache, not extra state.
        rounds: Vec<Round>,
    },
}

/// A balanced partition of `0..k` into `k_prime` cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    k_prime: usize,
    /// Base cell size `floor(k / k')`.
    base: usize,
    /// Number of cells holding `base + 1` symbols.
    big_cells: usize,
    map: CellMap,
}

impl Partition {
    /// The singleton partition with `cell_of(x) = x`; it stores no key.
    pub fn identity(k: usize) -> Self {
        Self { k, k_prime: k, base: 1, big_cells: 0, map: CellMap::Identity }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_prime(&self) -> usize {
        self.k_prime
    }

    /// Bits needed to store the partition's description.
    pub fn key_bits(&self) -> u64 {
        match self.map {
            CellMap::Identity => 0,
            CellMap::Keyed { key_bits, .. } => key_bits,
        }
    }

    pub fn key(&self) -> Option<u64> {
        match self.map {
            CellMap::Identity => None,
            CellMap::Keyed { key, .. } => Some(key),
        }
    }

    pub fn cell_size(&self, cell: usize) -> usize {
        if cell < self.big_cells {
            self.base + 1
        } else {
            self.base
        }
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        (0..self.k_prime).map(|c| self.cell_size(c)).collect()
    }

    /// Position of `x` in the keyed shuffle of `0..k`.
    #[inline]
    fn position(&self, x: usize) -> usize {
        match &self.map {
            CellMap::Identity => x,
            CellMap::Keyed { rounds, .. } => {
                let k = self.k as u64;
                let mut x = x as u64;
                for round in rounds {
                    let mut partner = round.offset + k - x;
                    if partner >= k {
                        partner -= k;
                    }
                    // All-ones when the pair is swapped; keeps the loop branch-free.
                    let swap = (rng::mix64(round.coin ^ x.max(partner)) & 1).wrapping_neg();
                    x ^= (x ^ partner) & swap;
                }
                x as usize
            }
        }
    }

    #[inline]
    fn block_of(&self, position: usize) -> usize {
        let big_span = self.big_cells * (self.base + 1);
        if position < big_span {
            position / (self.base + 1)
        } else {
            self.big_cells + (position - big_span) / self.base
        }
    }

    /// Cell of `x`, without a range check.
    #[inline]
    pub fn cell_of(&self, x: usize) -> usize {
        match self.map {
            CellMap::Identity => x,
            CellMap::Keyed { .. } => self.block_of(self.position(x)),
        }
    }

    /// `out[i] = cell_of(symbols[i])`. Shuffle rounds run over the whole block
    /// at once, which overlaps the independent per-symbol chains.
    pub fn cells_of(&self, symbols: &[usize], out: &mut [usize]) {
        debug_assert_eq!(symbols.len(), out.len());
        match &self.map {
            CellMap::Identity => out.copy_from_slice(symbols),
            CellMap::Keyed { rounds, .. } => {
                let k = self.k as u64;
                for (chunk_in, chunk_out) in symbols.chunks(PROJECTION_BLOCK).zip(out.chunks_mut(PROJECTION_BLOCK)) {
                    let mut xs = [0u64; PROJECTION_BLOCK];
                    let xs = &mut xs[..chunk_in.len()];
                    xs.iter_mut().zip(chunk_in).for_each(|(x, &s)| *x = s as u64);
                    for round in rounds {
                        for x in xs.iter_mut() {
                            let mut partner = round.offset + k - *x;
                            if partner >= k {
                                partner -= k;
                            }
                            let swap = (rng::mix64(round.coin ^ (*x).max(partner)) & 1).wrapping_neg();
                            *x ^= (*x ^ partner) & swap;
                        }
                    }
                    chunk_out.iter_mut().zip(xs.iter()).for_each(|(o, &x)| *o = self.block_of(x as usize));
                }
            }
        }
    }

    pub fn project(&self, x: usize) -> Result<usize> {
        if x >= self.k {
            return Err(Error::SymbolOutOfRange { symbol: x, k: self.k });
        }
        Ok(self.cell_of(x))
    }

    /// The cell map over the whole domain.
    pub fn cell_table(&self) -> Vec<usize> {
        (0..self.k).map(|x| self.cell_of(x)).collect()
    }

    /// Image of the uniform distribution: cell `i` has mass `size_i / k`.
    pub fn induced_uniform(&self) -> Pmf {
        let k = self.k as f64;
        Pmf::new(self.cell_sizes().into_iter().map(|s| s as f64 / k).collect()).expect("cell sizes sum to k")
    }
}

/// Draws the balanced partition keyed by `seed`.
pub fn sample_partition(k: usize, k_prime: usize, seed: u64) -> Result<Partition> {
    if k_prime < 2 || k_prime > k {
        return Err(Error::InvalidParameter(format!("k'={k_prime} must lie in [2, k={k}]")));
    }
    let key_bits = partition_key_bits(k);
    let key_mask = if key_bits == 64 { u64::MAX } else { (1u64 << key_bits) - 1 };
    let key = rng::mix64(seed) & key_mask;
    let rounds = (0..shuffle_rounds(k) as u64)
        .map(|i| Round { offset: rng::counter_u64(key, 2 * i) % k as u64, coin: rng::counter_u64(key, 2 * i + 1) })
        .collect();
    Ok(Partition {
        k,
        k_prime,
        base: k / k_prime,
        big_cells: k % k_prime,
        map: CellMap::Keyed { key, key_bits, rounds },
    })
}

fn induce_slice(probs: &[f64], k_prime: usize, cell_of: impl Fn(usize) -> usize) -> Vec<f64> {
    let mut out = vec![0.0; k_prime];
    for (x, &p) in probs.iter().enumerate() {
        out[cell_of(x)] += p;
    }
    out
}

/// `p_Pi(i) = p(Pi_i)`.
pub fn induce_pmf(p: &Pmf, pi: &Partition) -> Result<Pmf> {
    if p.k() != pi.k() {
        return Err(Error::LengthMismatch { expected: pi.k(), actual: p.k() });
    }
    Pmf::new(induce_slice(p.probs(), pi.k_prime(), |x| pi.cell_of(x)))
}

/// Cell-wise sums of a raw histogram.
pub fn project_counts(counts: &Counts, pi: &Partition) -> Result<Counts> {
    if counts.k() != pi.k() {
        return Err(Error::LengthMismatch { expected: pi.k(), actual: counts.k() });
    }
    let mut freq = vec![0u64; pi.k_prime()];
    for (x, &c) in counts.freq().iter().enumerate() {
        freq[pi.cell_of(x)] += c;
    }
    Ok(Counts::from_freq(freq))
}

/// Number of unlabeled balanced partitions of `0..k` into `k'` cells.
pub fn balanced_partition_count(k: usize, k_prime: usize) -> f64 {
    let ln_fact = |n: usize| statrs::function::factorial::ln_factorial(n as u64);
    let base = k / k_prime;
    let big = k % k_prime;
    let ln = ln_fact(k)
        - big as f64 * ln_fact(base + 1)
        - (k_prime - big) as f64 * ln_fact(base)
        - ln_fact(big)
        - ln_fact(k_prime - big);
    ln.exp().round()
}

/// Calls `visit` with the cell map of every unlabeled balanced partition of
/// `0..k` into `k'` cells.
pub fn for_each_balanced_partition(k: usize, k_prime: usize, mut visit: impl FnMut(&[usize])) {
    // sizes[j] = number of cells still to open with size j.
    let base = k / k_prime;
    let big = k % k_prime;
    let mut remaining_sizes = vec![(base, k_prime - big), (base + 1, big)];
    remaining_sizes.retain(|&(_, c)| c > 0);
    let mut cell_of = vec![usize::MAX; k];

    fn open_cell(
        cell_of: &mut Vec<usize>,
        sizes: &mut Vec<(usize, usize)>,
        next_cell: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        let Some(first) = cell_of.iter().position(|&c| c == usize::MAX) else {
            visit(cell_of);
            return;
        };
        for si in 0..sizes.len() {
            if sizes[si].1 == 0 {
                continue;
            }
            let size = sizes[si].0;
            sizes[si].1 -= 1;
            cell_of[first] = next_cell;
            let free: Vec<usize> = (first + 1..cell_of.len()).filter(|&x| cell_of[x] == usize::MAX).collect();
            choose(cell_of, sizes, next_cell, &free, 0, size - 1, visit);
            cell_of[first] = usize::MAX;
            sizes[si].1 += 1;
        }
    }

    fn choose(
        cell_of: &mut Vec<usize>,
        sizes: &mut Vec<(usize, usize)>,
        cell: usize,
        free: &[usize],
        from: usize,
        needed: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if needed == 0 {
            open_cell(cell_of, sizes, cell + 1, visit);
            return;
        }
        for i in from..free.len() {
            if free.len() - i < needed {
                break;
            }
            cell_of[free[i]] = cell;
            choose(cell_of, sizes, cell, free, i + 1, needed - 1, visit);
            cell_of[free[i]] = usize::MAX;
        }
    }

    open_cell(&mut cell_of, &mut remaining_sizes, 0, &mut visit);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Enumerate when there are at most `trials` balanced partitions, else sample.
    Auto,
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionReport {
    /// Fraction of partitions with `TV(p_Pi, q_Pi) >= c1 sqrt(k'/k) TV(p, q)`.
    pub probability: f64,
    pub partitions: u64,
    pub exhaustive: bool,
    /// Smallest observed `TV(p_Pi, q_Pi) / (sqrt(k'/k) TV(p, q))`.
    pub min_ratio: f64,
}

/// Largest partition count the oracle will enumerate.
pub const ENUMERATION_LIMIT: f64 = 2.0e6;

/// Estimates (or computes exactly, by enumeration) the probability that a
/// random balanced partition contracts `TV(p, q)` by no more than
/// `c1 sqrt(k'/k)`.
pub fn contraction_probability_oracle(
    p: &Pmf,
    q: &Pmf,
    k_prime: usize,
    c1: f64,
    trials: u64,
    seed: u64,
    mode: OracleMode,
) -> Result<ContractionReport> {
    let k = p.k();
    if q.k() != k {
        return Err(Error::LengthMismatch { expected: k, actual: q.k() });
    }
    if k_prime < 2 || k_prime > k {
        return Err(Error::InvalidParameter(format!("k'={k_prime} must lie in [2, k={k}]")));
    }
    let tv = tv_slices(p.probs(), q.probs())?;
    if tv <= 0.0 {
        return Err(Error::InvalidParameter("contraction oracle needs TV(p, q) > 0".into()));
    }
    let scale = (k_prime as f64 / k as f64).sqrt() * tv;
    let bound = c1 * scale;

    let count = balanced_partition_count(k, k_prime);
    let exhaustive = match mode {
        OracleMode::Exhaustive => {
            if count > ENUMERATION_LIMIT {
                return Err(Error::InvalidParameter(format!("{count} balanced partitions is too many to enumerate")));
            }
            true
        }
        OracleMode::Sampled => false,
        OracleMode::Auto => count <= trials as f64 && count <= ENUMERATION_LIMIT,
    };

    let mut hits = 0u64;
    let mut total = 0u64;
    let mut min_ratio = f64::INFINITY;
    let mut tally = |tv_pi: f64| {
        total += 1;
        // Slack absorbs summation-order rounding in the induced sums.
        if tv_pi + 1e-12 >= bound {
            hits += 1;
        }
        min_ratio = min_ratio.min(tv_pi / scale);
    };

    if exhaustive {
        for_each_balanced_partition(k, k_prime, |cells| {
            let pp = induce_slice(p.probs(), k_prime, |x| cells[x]);
            let qq = induce_slice(q.probs(), k_prime, |x| cells[x]);
            tally(tv_slices(&pp, &qq).expect("equal lengths"));
        });
    } else {
        for t in 0..trials {
            let pi = sample_partition(k, k_prime, rng::derive_seed(seed, t))?;
            let pp = induce_slice(p.probs(), k_prime, |x| pi.cell_of(x));
            let qq = induce_slice(q.probs(), k_prime, |x| pi.cell_of(x));
            tally(tv_slices(&pp, &qq).expect("equal lengths"));
        }
    }

    Ok(ContractionReport { probability: hits as f64 / total as f64, partitions: total, exhaustive, min_ratio })
}
