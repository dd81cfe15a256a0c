//! Seed derivation, hashing, and small numeric helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream from a base seed and a purpose label.
///
/// Every stochastic component gets its own stream so that adding or removing
/// one consumer (e.g. the adversarial mini-batch sampler) cannot shift the
/// draws seen by another. This is what makes the trainer reductions
/// bit-exact.
pub fn seed_stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// SHA-256 of a byte slice as a lowercase hex string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    to_hex(&digest)
}

/// Incremental SHA-256 over a sequence of f32 slices, little-endian.
pub struct ParamHasher {
    inner: Sha256,
}

impl ParamHasher {
    pub fn new() -> Self {
        Self { inner: Sha256::new() }
    }

    pub fn update_f32(&mut self, values: &[f32]) {
        for v in values {
            self.inner.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        to_hex(&self.inner.finalize())
    }
}

impl Default for ParamHasher {
    fn default() -> Self {
        Self::new()
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Rounds half-up to the nearest integer (0.5 goes up), used for subsample
/// counts so fractional plans resolve the same way on every platform.
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        return 0;
    }
    (x + 0.5).floor() as usize
}

/// Spearman rank correlation with average ranks for ties.
/// Returns `None` when fewer than two points or either variable is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One-sided sign test: P(X >= k) for X ~ Binomial(n, 1/2).
/// Ties must be removed by the caller before counting.
pub fn sign_test_p(positives: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    // Direct summation; n stays small (tens of points) in this crate.
    let mut p = 0.0f64;
    for k in positives..=n {
        p += ln_choose(n, k).exp();
    }
    p / 2f64.powi(n as i32)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;

    #[test]
    fn seed_streams_are_independent_and_stable() {
        let mut a = seed_stream(7, "shuffle");
        let mut b = seed_stream(7, "shuffle");
        let mut c = seed_stream(7, "init");
        assert_eq!(a.next_u64(), b.next_u64());
        let mut a2 = seed_stream(7, "shuffle");
        a2.next_u64();
        assert_ne!(a2.next_u64(), c.next_u64());
    }

    #[test]
    fn round_half_up_breaks_ties_upward() {
        assert_eq!(round_half_up(12.5), 13);
        assert_eq!(round_half_up(12.49), 12);
        assert_eq!(round_half_up(0.0), 0);
        assert_eq!(round_half_up(-1.0), 0);
    }

    #[test]
    fn spearman_detects_monotone_relation() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 25.0, 40.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let yd = [40.0, 25.0, 20.0, 10.0];
        assert!((spearman(&xs, &yd).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&xs, &[1.0, 1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn sign_test_matches_hand_binomial() {
        // n=5, k=4: (C(5,4)+C(5,5))/32 = 6/32
        let p = sign_test_p(4, 5);
        assert!((p - 6.0 / 32.0).abs() < 1e-12);
        assert!((sign_test_p(0, 5) - 1.0).abs() < 1e-12);
    }
}
