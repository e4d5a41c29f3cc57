//! Calibrated constants and null thresholds.
//!
//! A [`CalibrationRecord`] holds every constant the testers need: the
//! domain-compression pair `(c1, c2)`, the per-repetition failure probability,
//! the sample-rate multipliers of the base testers, the large-`s` gap
//! constants of the batch tester, and a table of null thresholds. It is
//! stored as versioned TOML. The crate ships the record produced by
//! [`calibrate_constants`] with [`CalibrationSpec::default`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{
    closeness_null_threshold, identity_chi2_statistic, identity_null_threshold, sample_multinomial,
    standardized_closeness,
};
use crate::batch::{expected_tv_statistic, LargeSGap};
use crate::compressed::{amplification_repetitions, closeness_segment_len, identity_segment_len, CompressionConstants};
use crate::compression::{contraction_probability_oracle, OracleMode};
use crate::error::{Error, Result};
use crate::model::{make_paninski_far, make_point_mass, make_subset_uniform, make_uniform, Counts, Pmf};
use crate::rng::{counter_u64, derive_seed};

pub const CALIBRATION_VERSION: u32 = 1;

const BUILTIN: &str = include_str!("../data/calibration.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    IdentityChi2,
    Closeness,
}

impl Statistic {
    fn tag(self) -> u64 {
        match self {
            Statistic::IdentityChi2 => 1,
            Statistic::Closeness => 2,
        }
    }
}

/// One null quantile. The reference is the image of `uniform:{source_k}`
/// on `k` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub statistic: Statistic,
    pub k: usize,
    pub reference: String,
    pub delta: f64,
    pub n: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionEntry {
    pub family: String,
    pub k: usize,
    pub k_prime: usize,
    pub c1: f64,
    pub probability: f64,
    pub partitions: u64,
    pub exhaustive: bool,
}

/// Rejection rate of a base tester on a far instance at one rate multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEntry {
    pub statistic: Statistic,
    pub k: usize,
    pub eps: f64,
    pub c4: f64,
    pub n: u64,
    pub reject_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub version: u32,
    pub master_seed: u64,
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub c4_identity: f64,
    pub c4_closeness: f64,
    pub large_s: LargeSGap,
    pub null_replicates: usize,
    /// Seed from which every null threshold seed is derived.
    pub null_seed: u64,
    pub oracle_trials: u64,
    pub power_trials: u64,
    pub contraction: Vec<ContractionEntry>,
    pub power: Vec<PowerEntry>,
    pub thresholds: Vec<ThresholdEntry>,
}

impl CalibrationRecord {
    /// The record shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN).expect("shipped calibration parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let record: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if record.version != CALIBRATION_VERSION {
            return Err(Error::Parse(format!(
                "calibration version {} is not the supported version {CALIBRATION_VERSION}",
                record.version
            )));
        }
        Ok(record)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CalibrationMissing(path.display().to_string()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn compression_constants(&self) -> CompressionConstants {
        CompressionConstants { c1: self.c1, c2: self.c2, delta: self.delta }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ThresholdKey {
    statistic: Statistic,
    k: usize,
    reference: String,
    delta_bits: u64,
    n: u64,
}

/// In-process memo of null thresholds, optionally preloaded from a record.
///
/// The Monte Carlo seed of each entry is a function of the cache seed and the
/// key alone, so a value is the same whether it was preloaded, computed first
/// or computed concurrently by several threads.
#[derive(Debug)]
pub struct ThresholdCache {
    replicates: usize,
    seed: u64,
    memo: Mutex<HashMap<ThresholdKey, f64>>,
}

impl ThresholdCache {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self { replicates, seed, memo: Mutex::new(HashMap::new()) }
    }

    pub fn from_record(record: &CalibrationRecord) -> Self {
        let cache = Self::new(record.null_replicates, record.null_seed);
        {
            let mut memo = cache.memo.lock().expect("fresh mutex");
            for e in &record.thresholds {
                memo.insert(
                    ThresholdKey {
                        statistic: e.statistic,
                        k: e.k,
                        reference: e.reference.clone(),
                        delta_bits: e.delta.to_bits(),
                        n: e.n,
                    },
                    e.value,
                );
            }
        }
        cache
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    fn key_seed(&self, key: &ThresholdKey, source_k: usize) -> u64 {
        let words = [key.statistic.tag(), key.k as u64, source_k as u64, key.delta_bits, key.n];
        words.iter().enumerate().fold(self.seed, |acc, (i, &w)| counter_u64(acc ^ w, i as u64))
    }

    /// Null `(1 - delta)`-quantile of `statistic` at `n` samples per stream,
    /// with `reference` the image of `uniform(source_k)`.
    pub fn threshold(&self, statistic: Statistic, source_k: usize, reference: &Pmf, n: u64, delta: f64) -> Result<f64> {
        let key = ThresholdKey {
            statistic,
            k: reference.k(),
            reference: format!("uniform:{source_k}"),
            delta_bits: delta.to_bits(),
            n,
        };
        if let Some(&v) = self.memo.lock().expect("threshold memo").get(&key) {
            return Ok(v);
        }
        let seed = self.key_seed(&key, source_k);
        let value = match statistic {
            Statistic::IdentityChi2 => identity_null_threshold(reference, n, delta, self.replicates, seed)?,
            Statistic::Closeness => closeness_null_threshold(reference, n, delta, self.replicates, seed)?,
        };
        self.memo.lock().expect("threshold memo").insert(key, value);
        Ok(value)
    }

    /// All thresholds held, in a stable order.
    pub fn entries(&self) -> Vec<ThresholdEntry> {
        let memo = self.memo.lock().expect("threshold memo");
        let mut out: Vec<ThresholdEntry> = memo
            .iter()
            .map(|(key, &value)| ThresholdEntry {
                statistic: key.statistic,
                k: key.k,
                reference: key.reference.clone(),
                delta: f64::from_bits(key.delta_bits),
                n: key.n,
                value,
            })
            .collect();
        out.sort_by(|a, b| {
            (a.statistic.tag(), a.k, &a.reference, a.n)
                .cmp(&(b.statistic.tag(), b.k, &b.reference, b.n))
                .then(a.delta.total_cmp(&b.delta))
        });
        out
    }
}

/// Sizes and budgets of a calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub master_seed: u64,
    pub delta: f64,
    /// Tried in order until the contraction suite certifies a usable `c2`.
    pub c1_candidates: Vec<f64>,
    /// Largest acceptable repetition count for the amplification.
    pub max_repetitions: u64,
    pub oracle_trials: u64,
    pub null_replicates: usize,
    pub power_trials: u64,
    /// Rate multipliers tried in increasing order.
    pub c4_grid: Vec<f64>,
    /// `(k', eps')` instances on which the base testers must reach power `1 - delta`.
    pub power_instances: Vec<(usize, f64)>,
    /// `(k, k')` layouts of the contraction suite.
    pub contraction_layouts: Vec<(usize, usize)>,
    /// `(k, eps)` instances for the large-`s` gap constants.
    pub gap_instances: Vec<(usize, f64)>,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            master_seed: 20_240_611,
            delta: 0.1,
            c1_candidates: vec![0.3, 0.2, 0.1],
            max_repetitions: 64,
            oracle_trials: 10_000,
            null_replicates: 100_000,
            power_trials: 1_000,
            c4_grid: vec![0.25, 0.375, 0.5, 0.625, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0],
            power_instances: vec![(16, 0.5), (64, 0.25), (64, 0.1), (100, 0.2)],
            contraction_layouts: vec![(6, 2), (8, 2), (8, 4), (12, 3), (16, 4), (32, 4), (64, 8), (256, 16)],
            gap_instances: vec![(16, 0.25), (16, 0.5), (32, 0.25), (32, 0.5), (64, 0.25), (64, 0.5)],
        }
    }
}

fn contraction_suite(k: usize) -> Result<Vec<(String, Pmf)>> {
    let mut out = vec![
        ("pointmass".to_string(), make_point_mass(k, 0)?),
        (format!("subset:{}", k / 2), make_subset_uniform(k, k / 2)?),
    ];
    if k.is_multiple_of(2) {
        out.push(("paninski:0.5".to_string(), make_paninski_far(k, 0.5)?));
    }
    Ok(out)
}

fn calibrate_contraction(spec: &CalibrationSpec) -> Result<(f64, f64, Vec<ContractionEntry>)> {
    for (ci, &c1) in spec.c1_candidates.iter().enumerate() {
        let mut entries = Vec::new();
        for (li, &(k, k_prime)) in spec.contraction_layouts.iter().enumerate() {
            let u = make_uniform(k)?;
            for (fi, (family, p)) in contraction_suite(k)?.into_iter().enumerate() {
                let seed = derive_seed(spec.master_seed, (ci * 10_000 + li * 100 + fi) as u64);
                let r =
                    contraction_probability_oracle(&p, &u, k_prime, c1, spec.oracle_trials, seed, OracleMode::Auto)?;
                entries.push(ContractionEntry {
                    family,
                    k,
                    k_prime,
                    c1,
                    probability: r.probability,
                    partitions: r.partitions,
                    exhaustive: r.exhaustive,
                });
            }
        }
        let c2 = entries.iter().map(|e| e.probability).fold(1.0, f64::min);
        if let Ok(r) = amplification_repetitions(spec.delta, c2) {
            if r <= spec.max_repetitions {
                return Ok((c1, c2, entries));
            }
        }
    }
    Err(Error::CalibrationFailed(format!(
        "no c1 in {:?} gives a contraction probability usable at delta={}",
        spec.c1_candidates, spec.delta
    )))
}

/// Rejection rate of the identity tester on `paninski(k, eps)` at `n` samples.
fn identity_power(k: usize, eps: f64, n: u64, threshold: f64, trials: u64, seed: u64) -> Result<f64> {
    let u = make_uniform(k)?;
    let p = make_paninski_far(k, eps)?;
    let rejects: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t));
            let mut freq = vec![0; k];
            sample_multinomial(&mut rng, n, p.probs(), &mut freq);
            let s = identity_chi2_statistic(&Counts::from_freq(freq), &u).expect("valid counts");
            u64::from(s > threshold)
        })
        .sum();
    Ok(rejects as f64 / trials as f64)
}

/// Rejection rate of the closeness tester on `uniform(k)` against `paninski(k, eps)`.
fn closeness_power(k: usize, eps: f64, n: u64, threshold: f64, trials: u64, seed: u64) -> Result<f64> {
    let u = make_uniform(k)?;
    let p = make_paninski_far(k, eps)?;
    let rejects: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t));
            let mut a = vec![0; k];
            let mut b = vec![0; k];
            sample_multinomial(&mut rng, n, u.probs(), &mut a);
            sample_multinomial(&mut rng, n, p.probs(), &mut b);
            let z = standardized_closeness(&Counts::from_freq(a), &Counts::from_freq(b)).expect("equal totals");
            u64::from(z > threshold)
        })
        .sum();
    Ok(rejects as f64 / trials as f64)
}

/// Smallest grid multiplier at which the tester reaches power `1 - delta` on
/// every instance.
fn calibrate_rate(
    spec: &CalibrationSpec,
    statistic: Statistic,
    cache: &ThresholdCache,
    power_log: &mut Vec<PowerEntry>,
) -> Result<f64> {
    let stream = statistic.tag();
    for (gi, &c4) in spec.c4_grid.iter().enumerate() {
        let mut all_pass = true;
        for (ii, &(k, eps)) in spec.power_instances.iter().enumerate() {
            let u = make_uniform(k)?;
            let (n, reject_rate) = match statistic {
                Statistic::IdentityChi2 => {
                    let n = identity_segment_len(k, eps, c4);
                    let t = cache.threshold(statistic, k, &u, n, spec.delta)?;
                    let seed = derive_seed(spec.master_seed, stream << 32 | (gi * 100 + ii) as u64);
                    (n, identity_power(k, eps, n, t, spec.power_trials, seed)?)
                }
                Statistic::Closeness => {
                    let n = closeness_segment_len(k, eps, c4);
                    let t = cache.threshold(statistic, k, &u, n, spec.delta)?;
                    let seed = derive_seed(spec.master_seed, stream << 32 | (gi * 100 + ii) as u64);
                    (n, closeness_power(k, eps, n, t, spec.power_trials, seed)?)
                }
            };
            power_log.push(PowerEntry { statistic, k, eps, c4, n, reject_rate });
            if reject_rate < 1.0 - spec.delta {
                all_pass = false;
                break;
            }
        }
        if all_pass {
            return Ok(c4);
        }
    }
    Err(Error::CalibrationFailed(format!(
        "{statistic:?} tester misses power {} on the grid {:?}",
        1.0 - spec.delta,
        spec.c4_grid
    )))
}

/// Large-`s` gap constants: the smallest observed ratio of the exact
/// expectation gap between `paninski(k, eps)` and uniform to its scaling.
pub fn calibrate_large_s_gap(instances: &[(usize, f64)]) -> Result<LargeSGap> {
    let mut mid = f64::INFINITY;
    let mut high = f64::INFINITY;
    for &(k, eps) in instances {
        let u = make_uniform(k)?;
        let p = make_paninski_far(k, eps)?;
        let knee = (k as f64 / (eps * eps)).floor() as u64;
        let mut s = k as u64 + 1;
        while s <= 4 * knee {
            let gap = expected_tv_statistic(&p, s) - expected_tv_statistic(&u, s);
            if s <= knee {
                mid = mid.min(gap / (eps * eps * (s as f64 / k as f64).sqrt()));
            } else {
                high = high.min(gap / eps);
            }
            s = (s * 5 / 4).max(s + 1);
        }
    }
    if !(mid.is_finite() && high.is_finite() && mid > 0.0 && high > 0.0) {
        return Err(Error::CalibrationFailed("large-s gap grid did not cover both ranges".into()));
    }
    Ok(LargeSGap { mid, high })
}

/// Runs the whole calibration. Deterministic in `spec`.
pub fn calibrate_constants(spec: &CalibrationSpec) -> Result<CalibrationRecord> {
    if !(spec.delta > 0.0 && spec.delta < 0.5) {
        return Err(Error::InvalidParameter(format!("delta={} must lie in (0, 1/2)", spec.delta)));
    }
    if spec.master_seed > i64::MAX as u64 {
        return Err(Error::InvalidParameter("calibration seed must fit in 63 bits".into()));
    }
    let (c1, c2, contraction) = calibrate_contraction(spec)?;
    let null_seed = derive_seed(spec.master_seed, u64::from(u32::MAX)) >> 1;
    let cache = ThresholdCache::new(spec.null_replicates, null_seed);
    let mut power = Vec::new();
    let c4_identity = calibrate_rate(spec, Statistic::IdentityChi2, &cache, &mut power)?;
    let c4_closeness = calibrate_rate(spec, Statistic::Closeness, &cache, &mut power)?;
    let large_s = calibrate_large_s_gap(&spec.gap_instances)?;
    Ok(CalibrationRecord {
        version: CALIBRATION_VERSION,
        master_seed: spec.master_seed,
        c1,
        c2,
        delta: spec.delta,
        c4_identity,
        c4_closeness,
        large_s,
        null_replicates: spec.null_replicates,
        null_seed,
        oracle_trials: spec.oracle_trials,
        power_trials: spec.power_trials,
        contraction,
        power,
        thresholds: cache.entries(),
    })
}
