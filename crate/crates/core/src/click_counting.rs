//! Detection theory for `D` multiplexed on-off detectors.
//!
//! A trial yields the number of clicks `n ∈ 0..=D`. The click POVM is
//! evaluated for reference sources, and recorded click histograms are mapped
//! to normally ordered moments through the unbiased estimator
//! `G^(m) = Σ_n [C(n,m)/C(D,m)] c(n)`.

use nalgebra::DMatrix;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{binomial_row, ClickWeights, Fixed};

/// Extra fractional bits carried beyond the `3^D` bound on inclusion–exclusion
/// coefficients.
const EXTRA_BITS: u32 = 160;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickHistogram {
    detector_count: usize,
    counts: Vec<u64>,
    trials: u64,
}

impl ClickHistogram {
    pub fn empty(detector_count: usize) -> Self {
        ClickHistogram {
            detector_count,
            counts: vec![0; detector_count + 1],
            trials: 0,
        }
    }

    pub fn from_counts(detector_count: usize, counts: Vec<u64>) -> Result<Self> {
        if detector_count == 0 {
            return Err(Error::invalid("detector_count", "must be positive"));
        }
        if counts.len() != detector_count + 1 {
            return Err(Error::DimensionMismatch {
                what: "click histogram",
                expected: detector_count + 1,
                actual: counts.len(),
            });
        }
        let trials = counts.iter().sum();
        Ok(ClickHistogram {
            detector_count,
            counts,
            trials,
        })
    }

    pub fn detector_count(&self) -> usize {
        self.detector_count
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn record(&mut self, clicks: usize) {
        self.counts[clicks] += 1;
        self.trials += 1;
    }

    /// Relative frequencies `c(n) = counts[n] / trials`.
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        if self.trials == 0 {
            return Err(Error::EmptyHistogram);
        }
        let c = self.trials as f64;
        Ok(self.counts.iter().map(|&k| k as f64 / c).collect())
    }

    pub fn merge(&mut self, other: &ClickHistogram) -> Result<()> {
        if other.detector_count != self.detector_count {
            return Err(Error::DimensionMismatch {
                what: "histogram merge",
                expected: self.detector_count,
                actual: other.detector_count,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.trials += other.trials;
        Ok(())
    }
}

/// Arm of a two-arm experiment: `A` is the signal, `B` the idler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

impl Arm {
    pub fn index(self) -> usize {
        match self {
            Arm::A => 0,
            Arm::B => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::A => Arm::B,
            Arm::B => Arm::A,
        }
    }

    pub fn label(self) -> char {
        match self {
            Arm::A => 'A',
            Arm::B => 'B',
        }
    }
}

/// Joint click counts `C(n_A, n_B)` of a two-arm experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointClickHistogram {
    detector_count_a: usize,
    detector_count_b: usize,
    // row-major over n_A
    counts: Vec<u64>,
    trials: u64,
}

impl JointClickHistogram {
    pub fn empty(detector_count_a: usize, detector_count_b: usize) -> Self {
        JointClickHistogram {
            detector_count_a,
            detector_count_b,
            counts: vec![0; (detector_count_a + 1) * (detector_count_b + 1)],
            trials: 0,
        }
    }

    /// Builds a joint histogram from rows indexed by `n_A`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid("counts", "need at least two rows (D_A >= 1)"));
        }
        let width = rows[0].len();
        if width < 2 {
            return Err(Error::invalid("counts", "need at least two columns (D_B >= 1)"));
        }
        let mut hist = Self::empty(rows.len() - 1, width - 1);
        for (na, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    what: "joint histogram row",
                    expected: width,
                    actual: row.len(),
                });
            }
            for (nb, &k) in row.iter().enumerate() {
                hist.add(na, nb, k);
            }
        }
        Ok(hist)
    }

    pub fn detector_count_a(&self) -> usize {
        self.detector_count_a
    }

    pub fn detector_count_b(&self) -> usize {
        self.detector_count_b
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    #[inline]
    fn index(&self, na: usize, nb: usize) -> usize {
        na * (self.detector_count_b + 1) + nb
    }

    pub fn get(&self, na: usize, nb: usize) -> u64 {
        self.counts[self.index(na, nb)]
    }

    pub fn add(&mut self, na: usize, nb: usize, count: u64) {
        let i = self.index(na, nb);
        self.counts[i] += count;
        self.trials += count;
    }

    pub fn record(&mut self, na: usize, nb: usize) {
        self.add(na, nb, 1);
    }

    /// Flat row-major counts.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.detector_count_b + 1)
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn marginal_a(&self) -> ClickHistogram {
        let counts = self
            .counts
            .chunks(self.detector_count_b + 1)
            .map(|row| row.iter().sum())
            .collect();
        ClickHistogram {
            detector_count: self.detector_count_a,
            counts,
            trials: self.trials,
        }
    }

    pub fn marginal_b(&self) -> ClickHistogram {
        let mut counts = vec![0u64; self.detector_count_b + 1];
        for row in self.counts.chunks(self.detector_count_b + 1) {
            for (acc, &k) in counts.iter_mut().zip(row) {
                *acc += k;
            }
        }
        ClickHistogram {
            detector_count: self.detector_count_b,
            counts,
            trials: self.trials,
        }
    }

    pub fn merge(&mut self, other: &JointClickHistogram) -> Result<()> {
        if (other.detector_count_a, other.detector_count_b)
            != (self.detector_count_a, self.detector_count_b)
        {
            return Err(Error::DimensionMismatch {
                what: "joint histogram merge",
                expected: (self.detector_count_a + 1) * (self.detector_count_b + 1),
                actual: (other.detector_count_a + 1) * (other.detector_count_b + 1),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.trials += other.trials;
        Ok(())
    }
}

/// Moments `G^(0..=max_order)` of a symmetric detection system.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMomentVector {
    values: Vec<f64>,
    covariance: DMatrix<f64>,
    trials: u64,
}

impl SymmetricMomentVector {
    /// Moment values without sampling uncertainty. `values[0]` must be 1.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("values", "at least G^(0) is required"));
        }
        if values[0] != 1.0 {
            return Err(Error::invalid("values", format!("G^(0) must be 1, got {}", values[0])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("moment vector"));
        }
        let n = values.len();
        Ok(SymmetricMomentVector {
            values,
            covariance: DMatrix::zeros(n, n),
            trials: 0,
        })
    }

    /// Moments of a click distribution `c(0..=D)`.
    ///
    /// With `trials > 0` the covariance is the multinomial sampling covariance
    /// expected for that many trials drawn from `distribution`.
    pub fn from_distribution(distribution: &[f64], max_order: usize, trials: u64) -> Result<Self> {
        if distribution.len() < 2 {
            return Err(Error::invalid("distribution", "need D >= 1"));
        }
        let d = distribution.len() - 1;
        if max_order > d {
            return Err(Error::InsufficientOrder {
                requested: max_order,
                available: d,
            });
        }
        let weights = ClickWeights::for_detectors(d);
        let values = estimate(&weights, distribution, max_order);
        let covariance = if trials == 0 {
            DMatrix::zeros(max_order + 1, max_order + 1)
        } else {
            weighted_covariance(&weights, distribution, &values, trials)
        };
        Ok(SymmetricMomentVector {
            values,
            covariance,
            trials,
        })
    }

    pub fn max_order(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, order: usize) -> f64 {
        self.values[order]
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    /// Keeps orders `0..=max_order` only.
    pub fn truncated(&self, max_order: usize) -> Result<Self> {
        if max_order > self.max_order() {
            return Err(Error::InsufficientOrder {
                requested: max_order,
                available: self.max_order(),
            });
        }
        Ok(SymmetricMomentVector {
            values: self.values[..=max_order].to_vec(),
            covariance: self
                .covariance
                .view((0, 0), (max_order + 1, max_order + 1))
                .into_owned(),
            trials: self.trials,
        })
    }
}

fn estimate(weights: &ClickWeights, distribution: &[f64], max_order: usize) -> Vec<f64> {
    (0..=max_order)
        .map(|m| {
            let row = weights.row(m);
            // rows vanish below n = m
            (m..distribution.len()).map(|n| row[n] * distribution[n]).sum()
        })
        .collect()
}

pub(crate) fn weighted_covariance(
    weights: &ClickWeights,
    distribution: &[f64],
    values: &[f64],
    trials: u64,
) -> DMatrix<f64> {
    let k = values.len();
    let c = trials as f64;
    let mut cov = DMatrix::zeros(k, k);
    for a in 0..k {
        let wa = weights.row(a);
        for b in a..k {
            let wb = weights.row(b);
            let start = a.max(b);
            let second: f64 = (start..distribution.len())
                .map(|n| wa[n] * wb[n] * distribution[n])
                .sum();
            let v = (second - values[a] * values[b]) / c;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

/// Moment estimates from a recorded histogram, with multinomial covariance.
pub fn moments_from_histogram(hist: &ClickHistogram, max_order: usize) -> Result<SymmetricMomentVector> {
    if max_order > hist.detector_count {
        return Err(Error::InsufficientOrder {
            requested: max_order,
            available: hist.detector_count,
        });
    }
    let freqs = hist.frequencies()?;
    SymmetricMomentVector::from_distribution(&freqs, max_order, hist.trials)
}

/// Sampled joint frequencies retained for propagating errors through
/// two-group moments.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSampling {
    pub frequencies: DMatrix<f64>,
    pub trials: u64,
}

/// Two-index moments `G^(m_A, m_B)` of a signal/idler system.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMomentTable {
    values: DMatrix<f64>,
    detector_count_a: usize,
    detector_count_b: usize,
    sampling: Option<JointSampling>,
}

impl JointMomentTable {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, ma: usize, mb: usize) -> f64 {
        self.values[(ma, mb)]
    }

    pub fn max_order_a(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn max_order_b(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn sampling(&self) -> Option<&JointSampling> {
        self.sampling.as_ref()
    }

    /// Table from known values; carries no sampling information.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("values", "empty moment table"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint moment table"));
        }
        Ok(JointMomentTable {
            detector_count_a: values.nrows() - 1,
            detector_count_b: values.ncols() - 1,
            values,
            sampling: None,
        })
    }

    /// Product table `G_A^(m_A) · G_B^(m_B)`.
    pub fn product(a: &SymmetricMomentVector, b: &SymmetricMomentVector) -> Self {
        let values = DMatrix::from_fn(a.values.len(), b.values.len(), |i, j| {
            a.values[i] * b.values[j]
        });
        JointMomentTable {
            detector_count_a: a.max_order(),
            detector_count_b: b.max_order(),
            values,
            sampling: None,
        }
    }

    /// Variance of `Σ coeffs[m_A, m_B] · Ĝ^(m_A, m_B)` under multinomial
    /// sampling, or `None` when the table was not estimated from counts.
    pub fn linear_variance(&self, coeffs: &DMatrix<f64>) -> Option<f64> {
        let sampling = self.sampling.as_ref()?;
        let wa = weight_matrix(self.detector_count_a, self.values.nrows() - 1);
        let wb = weight_matrix(self.detector_count_b, self.values.ncols() - 1);
        // influence of each outcome (n_A, n_B) on the linear combination
        let h = wa.transpose() * coeffs * &wb;
        let f = &sampling.frequencies;
        let mean = h.component_mul(f).sum();
        let second = h.component_mul(&h).component_mul(f).sum();
        Some(((second - mean * mean) / sampling.trials as f64).max(0.0))
    }
}

/// `W[m, n] = C(n, m) / C(D, m)` for `m ≤ max_order`.
fn weight_matrix(detectors: usize, max_order: usize) -> DMatrix<f64> {
    let w = ClickWeights::for_detectors(detectors);
    DMatrix::from_fn(max_order + 1, detectors + 1, |m, n| w.get(m, n))
}

pub fn joint_moments_from_histogram(
    hist: &JointClickHistogram,
    max_a: usize,
    max_b: usize,
) -> Result<JointMomentTable> {
    if max_a > hist.detector_count_a {
        return Err(Error::InsufficientOrder {
            requested: max_a,
            available: hist.detector_count_a,
        });
    }
    if max_b > hist.detector_count_b {
        return Err(Error::InsufficientOrder {
            requested: max_b,
            available: hist.detector_count_b,
        });
    }
    if hist.trials == 0 {
        return Err(Error::EmptyHistogram);
    }
    let c = hist.trials as f64;
    let freqs = DMatrix::from_fn(hist.detector_count_a + 1, hist.detector_count_b + 1, |a, b| {
        hist.get(a, b) as f64 / c
    });
    let wa = weight_matrix(hist.detector_count_a, max_a);
    let wb = weight_matrix(hist.detector_count_b, max_b);
    let values = &wa * &freqs * wb.transpose();
    Ok(JointMomentTable {
        values,
        detector_count_a: hist.detector_count_a,
        detector_count_b: hist.detector_count_b,
        sampling: Some(JointSampling {
            frequencies: freqs,
            trials: hist.trials,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceVariant {
    Fock { photons: u32 },
    Coherent { mean_photons: f64 },
    Thermal { mean_photons: f64, schmidt_modes: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub variant: SourceVariant,
    pub efficiency: f64,
    pub background_click_prob: f64,
}

impl SourceModel {
    pub fn new(variant: SourceVariant, efficiency: f64, background_click_prob: f64) -> Result<Self> {
        let model = SourceModel {
            variant,
            efficiency,
            background_click_prob,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn fock(photons: u32) -> Self {
        SourceModel {
            variant: SourceVariant::Fock { photons },
            efficiency: 1.0,
            background_click_prob: 0.0,
        }
    }

    pub fn coherent(mean_photons: f64) -> Self {
        SourceModel {
            variant: SourceVariant::Coherent { mean_photons },
            efficiency: 1.0,
            background_click_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::invalid("efficiency", format!("{} not in [0, 1]", self.efficiency)));
        }
        if !(0.0..1.0).contains(&self.background_click_prob) {
            return Err(Error::invalid(
                "background_click_prob",
                format!("{} not in [0, 1)", self.background_click_prob),
            ));
        }
        match self.variant {
            SourceVariant::Fock { .. } => {}
            SourceVariant::Coherent { mean_photons } => {
                if !(mean_photons >= 0.0 && mean_photons.is_finite()) {
                    return Err(Error::invalid("mean_photons", "must be finite and >= 0"));
                }
            }
            SourceVariant::Thermal {
                mean_photons,
                schmidt_modes,
            } => {
                if !(mean_photons >= 0.0 && mean_photons.is_finite()) {
                    return Err(Error::invalid("mean_photons", "must be finite and >= 0"));
                }
                if !(schmidt_modes > 0.0 && schmidt_modes.is_finite()) {
                    return Err(Error::invalid("schmidt_modes", "must be finite and > 0"));
                }
            }
        }
        Ok(())
    }
}

/// No-click probabilities `Q(s)` for `s = 0..=D` silent detectors.
fn silent_probabilities(model: &SourceModel, d: usize, prec: u32) -> Vec<Fixed> {
    let one = Fixed::one(prec);
    let eta = Fixed::from_f64(model.efficiency, prec);
    let keep_bg = &one - &Fixed::from_f64(model.background_click_prob, prec);
    let dd = d as i64;
    (0..=d)
        .map(|s| {
            let frac = eta.mul_uint(&BigUint::from(s)).div_int(dd); // η s / D
            let optical = match model.variant {
                SourceVariant::Fock { photons } => (&one - &frac).powi(photons as u64),
                SourceVariant::Coherent { mean_photons } => {
                    (-(&frac * &Fixed::from_f64(mean_photons, prec))).exp()
                }
                SourceVariant::Thermal {
                    mean_photons,
                    schmidt_modes,
                } => {
                    let per_mode = Fixed::from_f64(mean_photons / schmidt_modes, prec);
                    let base = &one + &(&frac * &per_mode);
                    base.powf(&Fixed::from_f64(-schmidt_modes, prec))
                }
            };
            &keep_bg.powi(s as u64) * &optical
        })
        .collect()
}

fn working_precision(d: usize) -> u32 {
    // |C(D,n) C(n,t)| <= 3^D < 2^(1.59 D)
    2 * d as u32 + EXTRA_BITS
}

/// Click distribution `c(n) = ⟨Π̂_n⟩`, `n = 0..=D`, by inclusion–exclusion over
/// silent-detector subsets.
pub fn exact_click_distribution(model: &SourceModel, detectors: usize) -> Result<Vec<f64>> {
    model.validate()?;
    if detectors == 0 {
        return Err(Error::invalid("detectors", "D must be at least 1"));
    }
    let d = detectors;
    let prec = working_precision(d);
    let q = silent_probabilities(model, d, prec);
    let top = binomial_row(d as u64);
    let mut out = Vec::with_capacity(d + 1);
    for n in 0..=d {
        let row = binomial_row(n as u64);
        let mut acc = Fixed::zero(prec);
        for (t, coeff) in row.iter().enumerate() {
            let term = q[d - n + t].mul_uint(coeff);
            acc = if t % 2 == 0 { &acc + &term } else { &acc - &term };
        }
        let value = acc.mul_uint(&top[n]).to_f64();
        out.push(value.max(0.0));
    }
    Ok(out)
}

/// Analytic moments `⟨:π̂^m:⟩ = Σ_t (−1)^t C(m,t) Q(t)`: the probability that a
/// fixed set of `m` detectors all click.
pub fn exact_moments(model: &SourceModel, detectors: usize, max_order: usize) -> Result<Vec<f64>> {
    model.validate()?;
    if max_order > detectors {
        return Err(Error::InsufficientOrder {
            requested: max_order,
            available: detectors,
        });
    }
    let prec = working_precision(detectors);
    let q = silent_probabilities(model, detectors, prec);
    Ok((0..=max_order)
        .map(|m| {
            let mut acc = Fixed::zero(prec);
            for (t, coeff) in binomial_row(m as u64).iter().enumerate() {
                let term = q[t].mul_uint(coeff);
                acc = if t % 2 == 0 { &acc + &term } else { &acc - &term };
            }
            acc.to_f64().max(0.0)
        })
        .collect())
}

/// Independent references for the click distribution.
pub mod oracle {
    use super::*;

    /// Enumerates every photon's fate (lost or landing in one of `D` bins)
    /// and every background pattern. Limited to tiny instances.
    pub fn fock_enumeration(photons: u32, efficiency: f64, background: f64, d: usize) -> Result<Vec<f64>> {
        let outcomes = (d as u64 + 1).checked_pow(photons).unwrap_or(u64::MAX);
        if outcomes > 1 << 20 || d > 12 {
            return Err(Error::TooLarge(format!(
                "path enumeration over {photons} photons and {d} detectors"
            )));
        }
        let mut dist = vec![0.0; d + 1];
        let per_bin = efficiency / d as f64;
        for code in 0..outcomes {
            let mut rest = code;
            let mut occupied = 0u64;
            let mut prob = 1.0;
            for _ in 0..photons {
                let fate = (rest % (d as u64 + 1)) as usize;
                rest /= d as u64 + 1;
                if fate == d {
                    prob *= 1.0 - efficiency;
                } else {
                    prob *= per_bin;
                    occupied |= 1 << fate;
                }
            }
            for bg in 0u64..(1 << d) {
                let mut p = prob;
                for bin in 0..d {
                    p *= if bg >> bin & 1 == 1 { background } else { 1.0 - background };
                }
                let clicks = (occupied | bg).count_ones() as usize;
                dist[clicks] += p;
            }
        }
        Ok(dist)
    }

    /// Positive-term recursion on the number of occupied detectors, followed
    /// by a binomial background OR on the empty ones.
    pub fn fock_occupancy(photons: u32, efficiency: f64, background: f64, d: usize) -> Vec<f64> {
        let mut occ = vec![0.0; d + 1];
        occ[0] = 1.0;
        for _ in 0..photons {
            occ = add_photon(&occ, efficiency);
        }
        with_background(&occ, background)
    }

    fn add_photon(occ: &[f64], efficiency: f64) -> Vec<f64> {
        let d = occ.len() - 1;
        let mut next = vec![0.0; d + 1];
        for k in 0..=d {
            if occ[k] == 0.0 {
                continue;
            }
            let fresh = efficiency * (d - k) as f64 / d as f64;
            next[k] += occ[k] * (1.0 - fresh);
            if k < d {
                next[k + 1] += occ[k] * fresh;
            }
        }
        next
    }

    /// Coherent light clicks each detector independently with probability
    /// `1 − (1 − p_bg) e^{−η|α|²/D}`.
    pub fn coherent_binomial(mean_photons: f64, efficiency: f64, background: f64, d: usize) -> Vec<f64> {
        let p = 1.0 - (1.0 - background) * (-efficiency * mean_photons / d as f64).exp();
        binomial_pmf(d, p)
    }

    /// Thermal source as a negative-binomial mixture of Fock occupancies.
    pub fn thermal_mixture(
        mean_photons: f64,
        schmidt_modes: f64,
        efficiency: f64,
        background: f64,
        d: usize,
    ) -> Vec<f64> {
        let p = mean_photons / (mean_photons + schmidt_modes);
        let mut dist = vec![0.0; d + 1];
        let mut occ = vec![0.0; d + 1];
        occ[0] = 1.0;
        // P(0) = (1 − p)^μ, P(k+1)/P(k) = (k + μ)/(k + 1) · p
        let mut pk = (1.0 - p).powf(schmidt_modes);
        let mut k = 0u32;
        loop {
            for (acc, v) in dist.iter_mut().zip(&occ) {
                *acc += pk * v;
            }
            pk *= (k as f64 + schmidt_modes) / (k as f64 + 1.0) * p;
            k += 1;
            if (k as f64 > mean_photons && pk < 1e-20) || k > 100_000 {
                break;
            }
            occ = add_photon(&occ, efficiency);
        }
        with_background(&dist, background)
    }

    fn with_background(occupied: &[f64], background: f64) -> Vec<f64> {
        let d = occupied.len() - 1;
        let mut dist = vec![0.0; d + 1];
        for (k, &pk) in occupied.iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            for (j, b) in binomial_pmf(d - k, background).into_iter().enumerate() {
                dist[k + j] += pk * b;
            }
        }
        dist
    }

    pub fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
        let mut out = vec![0.0; n + 1];
        for (k, slot) in out.iter_mut().enumerate() {
            let ln_c = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
            let lp = if k == 0 { 0.0 } else { k as f64 * p.ln() };
            let lq = if k == n { 0.0 } else { (n - k) as f64 * (1.0 - p).ln() };
            *slot = (ln_c + lp + lq).exp();
        }
        out
    }

    fn ln_gamma(x: f64) -> f64 {
        // exact log-factorial for the integer arguments used here
        (2..x.round() as u64).map(|k| (k as f64).ln()).sum()
    }
}
