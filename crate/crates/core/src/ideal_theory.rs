//! Lossless, noise-free reference theory for `N` photons split evenly over
//! `M` modes.
//!
//! The output state has multinomial amplitudes; its normally ordered
//! correlations depend only on the total order `Σ m_j`. These closed forms are
//! the ground truth the detection model and witness are checked against.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::math::ratio_to_f64;

/// Largest photon number evaluated through exact integer arithmetic.
pub const EXACT_PHOTON_LIMIT: u32 = 20;

/// Oracle guards: enumeration is only attempted below these sizes.
pub const ORACLE_MAX_PHOTONS: u32 = 12;
pub const ORACLE_MAX_MODES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockSplitConfig {
    photon_number: u32,
    mode_count: u32,
}

impl FockSplitConfig {
    pub fn new(photon_number: u32, mode_count: u32) -> Result<Self> {
        if mode_count == 0 {
            return Err(Error::invalid("mode_count", "at least one mode is required"));
        }
        Ok(FockSplitConfig {
            photon_number,
            mode_count,
        })
    }

    pub fn photon_number(&self) -> u32 {
        self.photon_number
    }

    pub fn mode_count(&self) -> u32 {
        self.mode_count
    }
}

/// Photon numbers `(n_1, …, n_M)` of one output component.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OccupationPattern(pub Vec<u32>);

/// Orders `(m_1, …, m_M)` of a normally ordered correlation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn total_order(&self) -> u64 {
        self.0.iter().map(|&m| m as u64).sum()
    }
}

fn check_len(what: &'static str, expected: u32, actual: usize) -> Result<()> {
    if actual != expected as usize {
        return Err(Error::DimensionMismatch {
            what,
            expected: expected as usize,
            actual,
        });
    }
    Ok(())
}

fn factorial(n: u64) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, k| acc * k)
}

/// Probability `N! / (M^N n_1! ⋯ n_M!)` of finding the given occupation pattern.
pub fn output_probability(config: &FockSplitConfig, pattern: &OccupationPattern) -> Result<f64> {
    check_len("occupation pattern", config.mode_count, pattern.0.len())?;
    let total: u64 = pattern.0.iter().map(|&n| n as u64).sum();
    if total != config.photon_number as u64 {
        return Err(Error::OccupationSum {
            expected: config.photon_number as u64,
            actual: total,
        });
    }
    let numerator = factorial(total);
    let mut denominator = BigUint::from(config.mode_count).pow(config.photon_number);
    for &n in &pattern.0 {
        denominator *= factorial(n as u64);
    }
    Ok(ratio_to_f64(&numerator, &denominator))
}

/// Ideal correlation `G0 = N! / (M^{Σm} (N − Σm)!)`, zero once `Σm > N`.
///
/// Exact rational arithmetic is used up to [`EXACT_PHOTON_LIMIT`] photons and
/// a log-space evaluation beyond.
pub fn ideal_correlation(config: &FockSplitConfig, idx: &MultiIndex) -> Result<f64> {
    check_len("multi-index", config.mode_count, idx.0.len())?;
    let order = idx.total_order();
    let n = config.photon_number as u64;
    if order > n {
        return Ok(0.0);
    }
    if config.photon_number <= EXACT_PHOTON_LIMIT {
        return Ok(rational_to_f64(&exact_correlation(n, config.mode_count, order)));
    }
    let mut log_value = -(order as f64) * (config.mode_count as f64).ln();
    for i in 0..order {
        log_value += ((n - i) as f64).ln();
    }
    Ok(log_value.exp())
}

/// Exact rational form of the ideal correlation of total order `order`.
pub fn ideal_correlation_exact(config: &FockSplitConfig, idx: &MultiIndex) -> Result<BigRational> {
    check_len("multi-index", config.mode_count, idx.0.len())?;
    let order = idx.total_order();
    let n = config.photon_number as u64;
    if order > n {
        return Ok(BigRational::zero());
    }
    Ok(exact_correlation(n, config.mode_count, order))
}

fn exact_correlation(n: u64, modes: u32, order: u64) -> BigRational {
    let falling = ((n - order + 1)..=n).fold(BigUint::one(), |acc, k| acc * k);
    let denom = BigUint::from(modes).pow(order as u32);
    BigRational::new(falling.into(), denom.into())
}

pub(crate) fn rational_to_f64(value: &BigRational) -> f64 {
    value.to_f64().unwrap_or_else(|| {
        let num = value.numer().magnitude();
        let den = value.denom().magnitude();
        let mag = ratio_to_f64(num, den);
        if value.numer() < &Zero::zero() {
            -mag
        } else {
            mag
        }
    })
}

/// All occupation patterns of `N` photons over `M` modes, in lexicographic order.
pub fn occupation_patterns(config: &FockSplitConfig) -> Vec<OccupationPattern> {
    fn rec(remaining: u32, slots: usize, prefix: &mut Vec<u32>, out: &mut Vec<OccupationPattern>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(OccupationPattern(prefix.clone()));
            prefix.pop();
            return;
        }
        for n in 0..=remaining {
            prefix.push(n);
            rec(remaining - n, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(
        config.photon_number,
        config.mode_count as usize,
        &mut Vec::new(),
        &mut out,
    );
    out
}

/// Brute-force reference for [`ideal_correlation`].
///
/// Sums `p(n) · Π (n_j)_{m_j}` over every occupation pattern, with `p(n)`
/// taken from the multinomial amplitudes and `(n)_m` the falling factorial.
pub mod oracle {
    use super::*;

    pub fn ideal_correlation_oracle(config: &FockSplitConfig, idx: &MultiIndex) -> Result<f64> {
        check_len("multi-index", config.mode_count, idx.0.len())?;
        if config.photon_number > ORACLE_MAX_PHOTONS || config.mode_count > ORACLE_MAX_MODES {
            return Err(Error::TooLarge(format!(
                "enumeration oracle limited to N <= {ORACLE_MAX_PHOTONS}, M <= {ORACLE_MAX_MODES} \
                 (got N = {}, M = {})",
                config.photon_number, config.mode_count
            )));
        }
        let n = config.photon_number as u64;
        let mpow = BigUint::from(config.mode_count).pow(config.photon_number);
        let nfact = factorial(n);
        let mut acc = BigRational::zero();
        for pattern in occupation_patterns(config) {
            let mut weight = nfact.clone();
            let mut denom = mpow.clone();
            for (&nj, &mj) in pattern.0.iter().zip(&idx.0) {
                denom *= factorial(nj as u64);
                if mj > nj {
                    weight = BigUint::zero();
                    break;
                }
                for i in 0..mj {
                    weight *= nj - i;
                }
            }
            acc += BigRational::new(weight.into(), denom.into());
        }
        Ok(rational_to_f64(&acc))
    }
}
