use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

/// Exact binomial coefficient; zero when `k > n`.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Row `n` of Pascal's triangle, exactly.
pub fn binomial_row(n: u64) -> Vec<BigUint> {
    let mut row = Vec::with_capacity(n as usize + 1);
    let mut acc = BigUint::one();
    row.push(acc.clone());
    for k in 0..n {
        acc *= n - k;
        acc /= k + 1;
        row.push(acc.clone());
    }
    row
}

/// Converts `num / den` to the nearest-ish `f64` without overflowing on
/// operands far beyond the `f64` range.
pub fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    assert!(!den.is_zero(), "division by zero");
    if num.is_zero() {
        return 0.0;
    }
    let bits = num.bits().max(den.bits());
    let shift = bits.saturating_sub(1000);
    let n = (num >> shift).to_f64().unwrap_or(f64::INFINITY);
    let d = (den >> shift).to_f64().unwrap_or(f64::INFINITY);
    n / d
}

/// Converts a big integer to `f64`, saturating at infinity.
pub fn big_to_f64(value: &BigUint) -> f64 {
    value.to_f64().unwrap_or(f64::INFINITY)
}

/// Estimator weights `w_m(n) = C(n, m) / C(D, m)` for one detector count `D`.
///
/// `C(n, m)` is taken as zero for `m > n`, so row `m` vanishes below `n = m`.
#[derive(Debug)]
pub struct ClickWeights {
    detectors: usize,
    // row-major: weights[m * (D + 1) + n]
    weights: Vec<f64>,
}

impl ClickWeights {
    /// Weights for every order `0..=D`, shared between callers with the same `D`.
    pub fn for_detectors(detectors: usize) -> Arc<ClickWeights> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<ClickWeights>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(hit) = cache.lock().expect("weight cache poisoned").get(&detectors) {
            return Arc::clone(hit);
        }
        let built = Arc::new(Self::build(detectors));
        cache
            .lock()
            .expect("weight cache poisoned")
            .entry(detectors)
            .or_insert(built)
            .clone()
    }

    fn build(detectors: usize) -> Self {
        let d = detectors;
        // Pascal's triangle up to row D, exactly.
        let mut rows: Vec<Vec<BigUint>> = Vec::with_capacity(d + 1);
        for n in 0..=d {
            let mut row = vec![BigUint::one(); n + 1];
            for k in 1..n {
                row[k] = &rows[n - 1][k - 1] + &rows[n - 1][k];
            }
            rows.push(row);
        }
        let mut weights = vec![0.0; (d + 1) * (d + 1)];
        for m in 0..=d {
            let den = &rows[d][m];
            for n in m..=d {
                weights[m * (d + 1) + n] = ratio_to_f64(&rows[n][m], den);
            }
        }
        ClickWeights {
            detectors,
            weights,
        }
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    #[inline]
    pub fn get(&self, order: usize, clicks: usize) -> f64 {
        self.weights[order * (self.detectors + 1) + clicks]
    }

    /// Row `w_m(0..=D)` for one order `m`.
    pub fn row(&self, order: usize) -> &[f64] {
        let width = self.detectors + 1;
        &self.weights[order * width..(order + 1) * width]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), BigUint::from(10u32));
        assert_eq!(binomial(3, 5), BigUint::zero());
        assert_eq!(binomial(0, 0), BigUint::one());
        let row = binomial_row(64);
        assert_eq!(row[32], binomial(64, 32));
        assert_eq!(row.iter().sum::<BigUint>(), BigUint::one() << 64u32);
    }

    #[test]
    fn binomial_128_64_exceeds_u64() {
        let b = binomial(128, 64);
        assert!(b.bits() > 64);
        let approx = big_to_f64(&b);
        assert!((approx / 2.395_114_604_192_808_5e37 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_handles_huge_operands() {
        let num = binomial(3000, 1500);
        let den = binomial(3000, 1499);
        // C(3000,1500)/C(3000,1499) = 1501/1500
        assert!((ratio_to_f64(&num, &den) - 1501.0 / 1500.0).abs() < 1e-15);
    }

    #[test]
    fn weights_respect_zero_convention() {
        let w = ClickWeights::for_detectors(4);
        assert_eq!(w.get(3, 2), 0.0);
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(4, 4), 1.0);
        // C(3,2)/C(4,2) = 3/6
        assert!((w.get(2, 3) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn weights_are_nested() {
        let w = ClickWeights::for_detectors(128);
        for m in 0..128 {
            for n in 0..=128 {
                assert!(w.get(m, n) >= w.get(m + 1, n));
            }
        }
    }
}
