//! Small descriptive-statistics helpers shared across modules.
//!
//! One convention is used everywhere: standard deviations are sample SDs
//! with an `n - 1` denominator, and quantiles interpolate linearly between
//! order statistics at position `p * (n + 1)` (clamped to the sample range).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (`n - 1` denominator). `None` for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile with positions `p (n + 1)`, clamped to the
/// first and last order statistics. Non-finite inputs are ignored.
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    Some(quantile_sorted(&v, p))
}

/// Same as [`quantile`] for an already sorted, finite slice.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let n = v.len();
    let h = p * (n as f64 + 1.0);
    if h <= 1.0 {
        return v[0];
    }
    if h >= n as f64 {
        return v[n - 1];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    v[lo - 1] + frac * (v[lo] - v[lo - 1])
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, used to derive seeds
/// and hash-ordered splits.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of a sequence of string parts, separated so that `("ab","c")` and
/// `("a","bc")` differ.
pub fn hash_parts(parts: &[&str]) -> u64 {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(p.as_bytes());
        buf.push(0x1f);
    }
    fnv1a(&buf)
}

/// Derive an independent stream seed from a parent seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&seed.to_le_bytes());
    buf[8..].copy_from_slice(&index.to_le_bytes());
    // splitmix finalizer on top of FNV so nearby indices decorrelate
    let mut z = fnv1a(&buf).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}
