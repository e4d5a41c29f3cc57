//! Counts-only identity and closeness testers.
//!
//! Both testers threshold a bias-corrected statistic at a null quantile
//! estimated by Monte Carlo under the reference distribution with the same
//! `n`, so their size is controlled directly rather than through asymptotics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Counts, Pmf, Verdict};
use crate::rng::derive_seed;

/// Parameters of one final-step test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TesterConfig {
    pub k: usize,
    pub eps: f64,
    /// Target probability of a wrong verdict.
    pub delta: f64,
    /// Reject iff the statistic exceeds this value.
    pub threshold: f64,
}

impl TesterConfig {
    pub fn new(k: usize, eps: f64, delta: f64, threshold: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::InvalidParameter(format!("delta={delta} must lie in (0, 1/2)")));
        }
        if k < 2 {
            return Err(Error::InvalidParameter(format!("k={k} must be at least 2")));
        }
        Ok(Self { k, eps, delta, threshold })
    }
}

fn identity_chi2_slice(freq: &[u64], reference: &[f64], n: u64) -> f64 {
    let n = n as f64;
    freq.iter()
        .zip(reference)
        .map(|(&c, &r)| {
            let c = c as f64;
            let expected = n * r;
            ((c - expected).powi(2) - c) / expected
        })
        .sum()
}

/// `S = sum_i ((N_i - n r_i)^2 - N_i) / (n r_i)`.
///
/// Under the reference with a fixed total `n`, `E[S] = -1`; in general
/// `E[S] = (n - 1) sum_i p_i^2 / r_i - n`.
pub fn identity_chi2_statistic(counts: &Counts, reference: &Pmf) -> Result<f64> {
    if counts.k() != reference.k() {
        return Err(Error::LengthMismatch { expected: reference.k(), actual: counts.k() });
    }
    if counts.total() == 0 {
        return Err(Error::InvalidParameter("identity test needs at least one sample".into()));
    }
    if let Some(i) = reference.probs().iter().position(|&r| r <= 0.0) {
        return Err(Error::InvalidParameter(format!("reference has zero mass at {i}")));
    }
    Ok(identity_chi2_slice(counts.freq(), reference.probs(), counts.total()))
}

pub fn identity_chi2_test(counts: &Counts, reference: &Pmf, config: &TesterConfig) -> Result<Verdict> {
    let s = identity_chi2_statistic(counts, reference)?;
    Ok(if s > config.threshold { Verdict::Reject } else { Verdict::Accept })
}

fn check_pair(x: &Counts, y: &Counts) -> Result<()> {
    if x.k() != y.k() {
        return Err(Error::LengthMismatch { expected: x.k(), actual: y.k() });
    }
    if x.total() != y.total() {
        return Err(Error::TotalMismatch { expected: x.total(), actual: y.total() });
    }
    Ok(())
}

/// `C = sum_i ((X_i - Y_i)^2 - X_i - Y_i)`, exact.
pub fn closeness_statistic(x: &Counts, y: &Counts) -> Result<i128> {
    check_pair(x, y)?;
    Ok(x.freq()
        .iter()
        .zip(y.freq())
        .map(|(&a, &b)| {
            let (a, b) = (i128::from(a), i128::from(b));
            (a - b).pow(2) - a - b
        })
        .sum())
}

fn standardized_slice(x: &[u64], y: &[u64], n: u64) -> f64 {
    let mut c = 0.0;
    let mut pairs = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        let t = a + b;
        c += (a - b).powi(2) - t;
        pairs += t * (t - 1.0);
    }
    if pairs == 0.0 {
        return 0.0;
    }
    let offset = pairs / (2.0 * n as f64 - 1.0);
    (c + offset) / (2.0 * pairs).sqrt()
}

/// `C` centred by its exact mean under `p = q` given the cell totals
/// `t_i = X_i + Y_i`, and scaled by `sqrt(sum_i 2 t_i (t_i - 1))`.
///
/// Returns 0 when no cell holds two samples.
pub fn standardized_closeness(x: &Counts, y: &Counts) -> Result<f64> {
    check_pair(x, y)?;
    Ok(standardized_slice(x.freq(), y.freq(), x.total()))
}

pub fn closeness_test(x: &Counts, y: &Counts, config: &TesterConfig) -> Result<Verdict> {
    let z = standardized_closeness(x, y)?;
    Ok(if z > config.threshold { Verdict::Reject } else { Verdict::Accept })
}

/// Multinomial counts by sequential conditional binomials.
pub fn sample_multinomial<R: rand::Rng>(rng: &mut R, n: u64, probs: &[f64], out: &mut [u64]) {
    let mut left = n;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        if i == last || left == 0 {
            out[i] = if i == last { left } else { 0 };
            left -= out[i];
            continue;
        }
        let cond = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let draw = Binomial::new(left, cond).expect("probability clamped to [0, 1]").sample(rng);
        out[i] = draw;
        left -= draw;
        mass -= p;
    }
}

/// Replicates simulated per rayon task.
const CHUNK: usize = 1024;

fn null_replicates<F>(reference: &Pmf, replicates: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [u64], &mut [u64]) -> f64 + Sync,
{
    let k = reference.k();
    let chunks = replicates.div_ceil(CHUNK);
    let mut out: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let mut a = vec![0u64; k];
            let mut b = vec![0u64; k];
            let len = CHUNK.min(replicates - c * CHUNK);
            (0..len).map(|_| stat(&mut rng, &mut a, &mut b)).collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// The `level` empirical quantile of sorted values: the smallest value with at
/// least a `level` fraction of the sample at or below it.
pub fn upper_quantile(sorted: &[f64], level: f64) -> f64 {
    let idx = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn check_null_args(reference: &Pmf, n: u64, delta: f64, replicates: usize) -> Result<()> {
    if n == 0 || replicates == 0 {
        return Err(Error::InvalidParameter("null calibration needs n >= 1 and replicates >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta={delta} must lie in (0, 1)")));
    }
    if reference.probs().iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidParameter("reference must be strictly positive".into()));
    }
    Ok(())
}

/// Sorted null draws of the identity statistic with `n` samples from `reference`.
pub fn identity_null_sample(reference: &Pmf, n: u64, replicates: usize, seed: u64) -> Vec<f64> {
    let probs = reference.probs();
    null_replicates(reference, replicates, seed, |rng, a, _| {
        sample_multinomial(rng, n, probs, a);
        identity_chi2_slice(a, probs, n)
    })
}

/// The null `(1 - delta)`-quantile of the identity statistic.
pub fn identity_null_threshold(reference: &Pmf, n: u64, delta: f64, replicates: usize, seed: u64) -> Result<f64> {
    check_null_args(reference, n, delta, replicates)?;
    Ok(upper_quantile(&identity_null_sample(reference, n, replicates, seed), 1.0 - delta))
}

/// Sorted null draws of the standardized closeness statistic, both streams
/// of length `n` from `reference`.
pub fn closeness_null_sample(reference: &Pmf, n: u64, replicates: usize, seed: u64) -> Vec<f64> {
    let probs = reference.probs();
    null_replicates(reference, replicates, seed, |rng, a, b| {
        sample_multinomial(rng, n, probs, a);
        sample_multinomial(rng, n, probs, b);
        standardized_slice(a, b, n)
    })
}

/// The null `(1 - delta)`-quantile of the standardized closeness statistic.
pub fn closeness_null_threshold(reference: &Pmf, n: u64, delta: f64, replicates: usize, seed: u64) -> Result<f64> {
    check_null_args(reference, n, delta, replicates)?;
    Ok(upper_quantile(&closeness_null_sample(reference, n, replicates, seed), 1.0 - delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{draw_stream, histogram, make_paninski_far, make_uniform};
    use proptest::prelude::*;

    fn counts(v: &[u64]) -> Counts {
        Counts::from_freq(v.to_vec())
    }

    #[test]
    fn chi2_examples() {
        let u = make_uniform(2).unwrap();
        assert_eq!(identity_chi2_statistic(&counts(&[2, 2]), &u).unwrap(), -2.0);
        let cfg = TesterConfig::new(2, 0.5, 0.1, 0.01).unwrap();
        assert_eq!(identity_chi2_test(&counts(&[2, 2]), &u, &cfg).unwrap(), Verdict::Accept);
        // (4 - 2)^2 - 4 over 2, plus (0 - 2)^2 over 2.
        assert_eq!(identity_chi2_statistic(&counts(&[4, 0]), &u).unwrap(), 2.0);

        let skewed = Pmf::new(vec![1.0, 0.0]).unwrap();
        assert!(identity_chi2_statistic(&counts(&[1, 1]), &skewed).is_err());
        assert!(identity_chi2_statistic(&counts(&[0, 0]), &u).is_err());
        assert!(identity_chi2_statistic(&counts(&[1, 1, 1]), &u).is_err());
        assert!(TesterConfig::new(2, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn chi2_null_mean_is_minus_one() {
        let r = Pmf::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let draws = identity_null_sample(&r, 50, 10_000, 3);
        let m = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / m;
        let var = draws.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        assert!((mean + 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn chi2_alternative_mean_formula() {
        // E[S] = (n - 1) sum p^2 / r - n, checked by simulation.
        let r = make_uniform(5).unwrap();
        let p = Pmf::new(vec![0.3, 0.3, 0.2, 0.1, 0.1]).unwrap();
        let n = 40u64;
        let exact = (n as f64 - 1.0) * p.probs().iter().map(|x| x * x / 0.2).sum::<f64>() - n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = vec![0u64; 5];
        let reps = 20_000;
        let draws: Vec<f64> = (0..reps)
            .map(|_| {
                sample_multinomial(&mut rng, n, p.probs(), &mut buf);
                identity_chi2_slice(&buf, r.probs(), n)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        assert!((mean - exact).abs() < 4.0 * (var / reps as f64).sqrt());
    }

    #[test]
    fn chi2_rejects_paninski() {
        let u = make_uniform(100).unwrap();
        let p = make_paninski_far(100, 0.5).unwrap();
        let n = 2000;
        let threshold = identity_null_threshold(&u, n, 0.1, 10_000, 1).unwrap();
        let cfg = TesterConfig::new(100, 0.5, 0.1, threshold).unwrap();
        let mut rejects = 0;
        for seed in 0..60 {
            let c = histogram(draw_stream(&p, n, seed), 100).unwrap();
            if identity_chi2_test(&c, &u, &cfg).unwrap() == Verdict::Reject {
                rejects += 1;
            }
        }
        assert!(rejects >= 40, "rejects {rejects}/60");
    }

    #[test]
    fn closeness_examples() {
        let x = counts(&[3, 1, 0, 2]);
        assert_eq!(closeness_statistic(&x, &x).unwrap(), -12);
        let n = 7u64;
        let a = counts(&[n, 0, 0]);
        let b = counts(&[0, n, 0]);
        assert_eq!(closeness_statistic(&a, &b).unwrap(), i128::from(2 * n * n - 2 * n));
        assert!(matches!(closeness_statistic(&counts(&[1, 0]), &counts(&[1, 1])), Err(Error::TotalMismatch { .. })));
        assert_eq!(standardized_closeness(&counts(&[1, 0, 0]), &counts(&[0, 1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn closeness_offset_is_exact_conditional_mean() {
        // n = 2, k = 2, both cells total 2 samples: enumerate X ~ hypergeometric.
        // Given t = (2, 2) the pair (X_0, Y_0) is (2,0), (1,1) or (0,2) with
        // weights 1/6, 4/6, 1/6; C takes values 4, -4, 4, so E[C | t] = -4/3.
        let n = 2.0f64;
        let offset = (2.0 * 1.0 + 2.0 * 1.0) / (2.0 * n - 1.0);
        assert!((offset - 4.0 / 3.0).abs() < 1e-15);
        let z_same = standardized_closeness(&counts(&[1, 1]), &counts(&[1, 1])).unwrap();
        let z_split = standardized_closeness(&counts(&[2, 0]), &counts(&[0, 2])).unwrap();
        let mean = (4.0 * z_same + 2.0 * z_split) / 6.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn closeness_null_acceptance() {
        let u = make_uniform(50).unwrap();
        let n = 5000;
        let threshold = closeness_null_threshold(&u, n, 0.1, 10_000, 2).unwrap();
        let cfg = TesterConfig::new(50, 0.5, 0.1, threshold).unwrap();
        let trials = 500u64;
        let accepts = (0..trials)
            .filter(|&s| {
                let x = histogram(draw_stream(&u, n, 2 * s + 1000), 50).unwrap();
                let y = histogram(draw_stream(&u, n, 2 * s + 1001), 50).unwrap();
                closeness_test(&x, &y, &cfg).unwrap().is_accept()
            })
            .count() as f64;
        let sigma = (0.9 * 0.1 / trials as f64).sqrt();
        assert!(accepts / trials as f64 >= 0.9 - 3.0 * sigma);
    }

    #[test]
    fn thresholds_are_reproducible() {
        let u = make_uniform(10).unwrap();
        let a = identity_null_threshold(&u, 100, 0.1, 3000, 9).unwrap();
        let b = identity_null_threshold(&u, 100, 0.1, 3000, 9).unwrap();
        assert_eq!(a, b);
        assert!(identity_null_threshold(&u, 0, 0.1, 3000, 9).is_err());
        assert_eq!(upper_quantile(&[1.0, 2.0, 3.0, 4.0], 0.75), 3.0);
        assert_eq!(upper_quantile(&[1.0, 2.0, 3.0, 4.0], 0.76), 4.0);
    }

    #[test]
    fn multinomial_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pmf::new(vec![0.5, 0.0, 0.25, 0.25]).unwrap();
        let mut out = vec![0; 4];
        for n in [0u64, 1, 17, 1000] {
            sample_multinomial(&mut rng, n, p.probs(), &mut out);
            assert_eq!(out.iter().sum::<u64>(), n);
            assert_eq!(out[1], 0);
        }
    }

    proptest! {
        #[test]
        fn closeness_is_symmetric(x in proptest::collection::vec(0u64..20, 2..30), shift in 1usize..29) {
            // A rotation of x has the same total.
            let mut y = x.clone();
            y.rotate_left(shift % x.len());
            let (a, b) = (Counts::from_freq(x), Counts::from_freq(y));
            prop_assert_eq!(closeness_statistic(&a, &b).unwrap(), closeness_statistic(&b, &a).unwrap());
            prop_assert_eq!(standardized_closeness(&a, &b).unwrap(), standardized_closeness(&b, &a).unwrap());
        }

        #[test]
        fn verdicts_are_pure(v in proptest::collection::vec(0u64..50, 2..20), t in -5.0f64..20.0) {
            let c = Counts::from_freq(v.clone());
            prop_assume!(c.total() > 0);
            let r = make_uniform(v.len()).unwrap();
            let cfg = TesterConfig::new(v.len(), 0.3, 0.1, t).unwrap();
            prop_assert_eq!(identity_chi2_test(&c, &r, &cfg).unwrap(), identity_chi2_test(&c, &r, &cfg).unwrap());
        }
    }
}
