//! Statistical layer: sampling covariance of moment estimates, systematic
//! error from singles uniformity, eigenvalue error propagation, heralding and
//! witness sweeps.
//!
//! Random and systematic errors are combined in quadrature on the final
//! eigenvalue. The systematic part treats `ε_sys` as a relative scale
//! uncertainty shared by all moments, propagated through the absolute
//! eigenvalue gradient; the plain eigenvalue scaling `ε_sys·|λ|` is reported
//! alongside.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click_counting::{
    moments_from_histogram, Arm, ClickHistogram, JointClickHistogram, SymmetricMomentVector,
};
use crate::error::{Error, Result};
use crate::math::ClickWeights;
use crate::moments_witness::{build_reduced_matrix, min_eigenpair, ReducedWitnessMatrix, Significance, WitnessResult};
use crate::simulator::SinglesProfile;
use crate::timetag::WindowMode;

/// Herald slices with fewer trials are flagged as low statistics.
pub const LOW_STATISTICS_TRIALS: u64 = 100;

/// `Cov(Ĝ_m, Ĝ_m') = (1/C)[Σ_n w_m(n) w_m'(n) ĉ(n) − Ĝ_m Ĝ_m']`.
pub fn moment_covariance(hist: &ClickHistogram, max_order: usize) -> Result<DMatrix<f64>> {
    Ok(moments_from_histogram(hist, max_order)?.covariance().clone())
}

/// Multinomial draw of `trials` outcomes with probabilities `p`.
pub fn multinomial_resample<R: rand::Rng + ?Sized>(p: &[f64], trials: u64, rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; p.len()];
    let mut remaining = trials;
    let mut mass = 1.0;
    for (i, &pi) in p.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == p.len() || mass <= 0.0 {
            out[i] = remaining;
            break;
        }
        let q = (pi / mass).clamp(0.0, 1.0);
        let k = Binomial::new(remaining, q).expect("probability in [0, 1]").sample(rng);
        out[i] = k;
        remaining -= k;
        mass -= pi;
    }
    out
}

/// Empirical covariance of moment estimates over multinomial resamples of
/// the histogram.
pub fn bootstrap_covariance(hist: &ClickHistogram, max_order: usize, resamples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let freqs = hist.frequencies()?;
    if max_order > hist.detector_count() {
        return Err(Error::InsufficientOrder {
            requested: max_order,
            available: hist.detector_count(),
        });
    }
    let weights = ClickWeights::for_detectors(hist.detector_count());
    let samples: Vec<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let counts = multinomial_resample(&freqs, hist.trials(), &mut rng);
            let c = hist.trials() as f64;
            (0..=max_order)
                .map(|m| {
                    let row = weights.row(m);
                    counts.iter().enumerate().map(|(n, &k)| row[n] * k as f64 / c).sum()
                })
                .collect()
        })
        .collect();
    let k = max_order + 1;
    let r = resamples as f64;
    let mean: Vec<f64> = (0..k).map(|m| samples.iter().map(|s| s[m]).sum::<f64>() / r).collect();
    Ok(DMatrix::from_fn(k, k, |a, b| {
        samples
            .iter()
            .map(|s| (s[a] - mean[a]) * (s[b] - mean[b]))
            .sum::<f64>()
            / (r - 1.0)
    }))
}

/// `2·stddev/mean` of per-bin counts (sample standard deviation).
pub fn relative_spread(counts: &[u64]) -> Result<f64> {
    let nonzero = counts.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(Error::invalid("singles", "need at least two bins with nonzero counts"));
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(2.0 * var.sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystematicError {
    pub arm_a: Option<f64>,
    pub arm_b: Option<f64>,
    /// Root mean square of the available per-arm values.
    pub pooled: f64,
}

/// Relative systematic error from the uniformity of per-bin singles.
/// Each arm is normalized to its own mean.
pub fn systematic_error(singles: &SinglesProfile) -> Result<SystematicError> {
    let arm_a = relative_spread(singles.arm(Arm::A)).ok();
    let arm_b = relative_spread(singles.arm(Arm::B)).ok();
    let available: Vec<f64> = [arm_a, arm_b].into_iter().flatten().collect();
    if available.is_empty() {
        return Err(Error::invalid("singles", "no arm has two or more bins with counts"));
    }
    let pooled = (available.iter().map(|e| e * e).sum::<f64>() / available.len() as f64).sqrt();
    Ok(SystematicError { arm_a, arm_b, pooled })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBudget {
    pub random_std: Vec<f64>,
    pub systematic_rel: f64,
    pub covariance: DMatrix<f64>,
}

impl ErrorBudget {
    pub fn new(moments: &SymmetricMomentVector, systematic_rel: f64) -> Result<Self> {
        if !(systematic_rel >= 0.0 && systematic_rel.is_finite()) {
            return Err(Error::invalid("systematic_rel", "must be finite and >= 0"));
        }
        let covariance = moments.covariance().clone();
        let random_std = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
        Ok(ErrorBudget {
            random_std,
            systematic_rel,
            covariance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropagatedError {
    pub random: f64,
    pub systematic: f64,
    pub combined: f64,
    /// Alternative convention: `ε_sys · |λ|`.
    pub systematic_eigenvalue_scale: f64,
}

/// First-order propagation of moment errors to the minimal eigenvalue.
pub fn propagate_witness_error(
    matrix: &ReducedWitnessMatrix,
    lambda: f64,
    eigvec: &[f64],
    budget: &ErrorBudget,
) -> Result<PropagatedError> {
    let grad = matrix.eigenvalue_gradient(eigvec)?;
    let n = grad.len();
    if budget.covariance.nrows() < n || budget.covariance.ncols() < n {
        return Err(Error::DimensionMismatch {
            what: "moment covariance",
            expected: n,
            actual: budget.covariance.nrows().min(budget.covariance.ncols()),
        });
    }
    let mut var = 0.0;
    for a in 0..n {
        if grad[a] == 0.0 {
            continue;
        }
        for b in 0..n {
            var += grad[a] * budget.covariance[(a, b)] * grad[b];
        }
    }
    let random = var.max(0.0).sqrt();
    let g = matrix.source_moments().values();
    let systematic = budget.systematic_rel * grad.iter().zip(g).map(|(d, v)| d.abs() * v).sum::<f64>();
    Ok(PropagatedError {
        random,
        systematic,
        combined: random.hypot(systematic),
        systematic_eigenvalue_scale: budget.systematic_rel * lambda.abs(),
    })
}

/// `Σ = max(0, −λ)/error`; unbounded for a negative eigenvalue with zero error.
pub fn significance(lambda: f64, combined_error: f64) -> Significance {
    let negativity = (-lambda).max(0.0);
    if negativity == 0.0 {
        Significance::Finite(0.0)
    } else if combined_error > 0.0 {
        Significance::Finite(negativity / combined_error)
    } else {
        Significance::Unbounded
    }
}

/// Builds the reduced witness, finds its minimal eigenpair and propagates errors.
pub fn witness(moments: &SymmetricMomentVector, k: usize, d: usize, systematic_rel: f64) -> Result<(WitnessResult, PropagatedError)> {
    let matrix = build_reduced_matrix(moments, k, d)?;
    let (lambda, v) = min_eigenpair(&matrix)?;
    let budget = ErrorBudget::new(moments, systematic_rel)?;
    let err = propagate_witness_error(&matrix, lambda, v.as_slice(), &budget)?;
    Ok((
        WitnessResult {
            min_eigenvalue: lambda,
            eigenvector: v.iter().copied().collect(),
            random_error: err.random,
            systematic_error: err.systematic,
            combined_error: err.combined,
            significance: significance(lambda, err.combined),
        },
        err,
    ))
}

/// Standard deviation of the minimal eigenvalue over multinomial resamples
/// of `hist`; a check on the first-order random error.
pub fn resampled_eigenvalue_spread(hist: &ClickHistogram, k: usize, d: usize, samples: usize, seed: u64) -> Result<f64> {
    let freqs = hist.frequencies()?;
    let order = k * d;
    let lambdas: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let counts = multinomial_resample(&freqs, hist.trials(), &mut rng);
            let h = ClickHistogram::from_counts(hist.detector_count(), counts)?;
            let m = SymmetricMomentVector::from_distribution(&h.frequencies()?, order, 0)?;
            Ok(min_eigenpair(&build_reduced_matrix(&m, k, d)?)?.0)
        })
        .collect::<Result<_>>()?;
    let n = lambdas.len() as f64;
    let mean = lambdas.iter().sum::<f64>() / n;
    Ok((lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeraldedSlice {
    pub herald_arm: Arm,
    pub herald_clicks: usize,
    /// Conditional click histogram of the other arm.
    pub histogram: ClickHistogram,
    pub low_statistics: bool,
}

/// Conditional histogram `C(n_other | n_herald = n)`.
pub fn herald_condition(joint: &JointClickHistogram, arm: Arm, n: usize) -> Result<HeraldedSlice> {
    let (herald_d, other_d) = match arm {
        Arm::A => (joint.detector_count_a(), joint.detector_count_b()),
        Arm::B => (joint.detector_count_b(), joint.detector_count_a()),
    };
    if n > herald_d {
        return Err(Error::invalid("herald_n", format!("{n} exceeds {herald_d} bins")));
    }
    let counts: Vec<u64> = (0..=other_d)
        .map(|m| match arm {
            Arm::A => joint.get(n, m),
            Arm::B => joint.get(m, n),
        })
        .collect();
    let histogram = ClickHistogram::from_counts(other_d, counts)?;
    if histogram.trials() == 0 {
        return Err(Error::EmptyHeraldSlice {
            arm: arm.label(),
            clicks: n,
        });
    }
    Ok(HeraldedSlice {
        herald_arm: arm,
        herald_clicks: n,
        low_statistics: histogram.trials() < LOW_STATISTICS_TRIALS,
        histogram,
    })
}

/// One analyzed dataset of a sweep: a pump setting under one window plan.
#[derive(Debug, Clone)]
pub struct SweepDataset {
    pub pump: String,
    pub window: WindowMode,
    pub joint: JointClickHistogram,
    pub systematic_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub herald_arm: Arm,
    pub heralds: RangeInclusive<usize>,
    pub k_list: Vec<usize>,
    /// Detection bins per network mode (`D`).
    pub bins_per_mode: usize,
}

/// One cell of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pump: String,
    pub window_mode: String,
    pub window_param: f64,
    pub herald_n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda_min: Option<f64>,
    pub err_random: Option<f64>,
    pub err_sys: Option<f64>,
    pub err_combined: Option<f64>,
    pub significance: Option<Significance>,
    pub trials: u64,
    pub err_sys_eigenvalue_scale: Option<f64>,
    pub low_statistics: bool,
    pub error: Option<CellFailure>,
}

impl ResultRow {
    /// Stable identifier of the cell.
    pub fn key(&self) -> String {
        cell_key(&self.pump, &WindowModeKey(self.window_mode.as_str(), self.window_param), self.herald_n, self.k)
    }
}

struct WindowModeKey<'a>(&'a str, f64);

fn cell_key(pump: &str, window: &WindowModeKey<'_>, herald: usize, k: usize) -> String {
    let sanitize = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}__{}-{}__n{}__K{}", sanitize(pump), window.0, sanitize(&window.1.to_string()), herald, k)
}

/// Key of the cell for `(pump, window, herald, K)`.
pub fn sweep_cell_key(pump: &str, window: &WindowMode, herald: usize, k: usize) -> String {
    cell_key(pump, &WindowModeKey(window.label(), window.param()), herald, k)
}

/// Failure of one sweep cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFailure {
    pub message: String,
    pub numerical: bool,
}

impl From<&Error> for CellFailure {
    fn from(e: &Error) -> Self {
        CellFailure {
            message: e.to_string(),
            numerical: e.is_numerical(),
        }
    }
}

/// Evaluates every `(herald, K)` cell of one dataset. An empty herald slice
/// yields a blank cell with zero trials; other failures are recorded in the
/// row's `error` field.
pub fn evaluate_dataset(dataset: &SweepDataset, spec: &SweepSpec) -> Vec<ResultRow> {
    let max_k = spec.k_list.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for herald in spec.heralds.clone() {
        let slice = herald_condition(&dataset.joint, spec.herald_arm, herald);
        let empty = matches!(slice, Err(Error::EmptyHeraldSlice { .. }));
        let moments = slice.as_ref().map_err(CellFailure::from).and_then(|s| {
            moments_from_histogram(&s.histogram, (max_k * spec.bins_per_mode).min(s.histogram.detector_count()))
                .map_err(|e| CellFailure::from(&e))
        });
        for &k in &spec.k_list {
            let mut row = ResultRow {
                pump: dataset.pump.clone(),
                window_mode: dataset.window.label().to_string(),
                window_param: dataset.window.param(),
                herald_n: herald,
                k,
                lambda_min: None,
                err_random: None,
                err_sys: None,
                err_combined: None,
                significance: None,
                trials: slice.as_ref().map_or(0, |s| s.histogram.trials()),
                err_sys_eigenvalue_scale: None,
                low_statistics: slice.as_ref().map_or(true, |s| s.low_statistics),
                error: None,
            };
            if empty {
                rows.push(row);
                continue;
            }
            match moments.as_ref().map_err(Clone::clone).and_then(|m| {
                witness(m, k, spec.bins_per_mode, dataset.systematic_rel).map_err(|e| CellFailure::from(&e))
            }) {
                Ok((w, e)) => {
                    row.lambda_min = Some(w.min_eigenvalue);
                    row.err_random = Some(w.random_error);
                    row.err_sys = Some(w.systematic_error);
                    row.err_combined = Some(w.combined_error);
                    row.significance = Some(w.significance);
                    row.err_sys_eigenvalue_scale = Some(e.systematic_eigenvalue_scale);
                }
                Err(f) => row.error = Some(f),
            }
            rows.push(row);
        }
    }
    rows
}

/// Evaluates all datasets in parallel; rows are ordered by dataset, herald
/// and the order of `k_list`.
pub fn sweep(datasets: &[SweepDataset], spec: &SweepSpec) -> ResultTable {
    let rows = datasets
        .par_iter()
        .map(|d| evaluate_dataset(d, spec))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    ResultTable { rows }
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "pump",
    "window_mode",
    "window_param",
    "herald_n",
    "K",
    "lambda_min",
    "err_random",
    "err_sys",
    "err_combined",
    "significance",
    "trials",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ResultTable {
    /// CSV with the documented columns. Significance is blank where the
    /// eigenvalue is nonnegative or the cell failed.
    pub fn to_csv(&self, preamble: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(p) = preamble {
            for line in p.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        out.push_str(&RESULT_COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let sig = match (r.lambda_min, r.significance) {
                (Some(l), Some(Significance::Finite(s))) if l < 0.0 => format!("{s:?}"),
                (Some(l), Some(Significance::Unbounded)) if l < 0.0 => "unbounded".into(),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.pump),
                r.window_mode,
                r.window_param,
                r.herald_n,
                r.k,
                opt(r.lambda_min),
                opt(r.err_random),
                opt(r.err_sys),
                opt(r.err_combined),
                sig,
                r.trials
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result rows serialize")
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn numerical_failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.as_ref().is_some_and(|e| e.numerical)).count()
    }
}
