//! Exact moments of the unseen-element statistic under the uniform distribution.

use crate::error::{Error, Result};

/// Mean and variance of `Z = #{i : N_i = 0} / k` for `s` uniform samples on `0..k`.
///
/// With `a = (1 - 1/k)^s` and `b = (1 - 2/k)^s`,
/// `Var(k Z) = k a (1 - a) + k (k - 1) (b - a^2)`.
pub fn exact_unseen_moments(k: usize, s: u64) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if s > k as u64 {
        return Err(Error::InvalidParameter(format!("batch size s={s} exceeds k={k}")));
    }
    let kf = k as f64;
    let s = i32::try_from(s).map_err(|_| Error::InvalidParameter("batch size too large".into()))?;
    let a = (1.0 - 1.0 / kf).powi(s);
    let b = (1.0 - 2.0 / kf).powi(s);
    let var_count = kf * a * (1.0 - a) + kf * (kf - 1.0) * (b - a * a);
    Ok((a, (var_count / (kf * kf)).max(0.0)))
}

/// Largest ratio of the exact variance to `2 s^2 / k^3` over `1 <= s <= k <= max_k`,
/// with the `(k, s)` where it occurs.
pub fn max_variance_ratio(max_k: usize) -> (f64, usize, u64) {
    let mut best = (0.0, 0, 0);
    for k in 1..=max_k {
        let bound_scale = 2.0 / (k as f64).powi(3);
        for s in 1..=k as u64 {
            let (_, var) = exact_unseen_moments(k, s).expect("s <= k");
            let ratio = var / (bound_scale * (s * s) as f64);
            if ratio > best.0 {
                best = (ratio, k, s);
            }
        }
    }
    best
}
