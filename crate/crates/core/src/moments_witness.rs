//! Matrix-of-moments witness for `K` symmetric modes.
//!
//! The full matrix `Γ_K` has one row per multi-index `(m_1, …, m_K)` with
//! `m_j ∈ 0..=D/2`, and its entries depend only on the total order. Grouping
//! rows by total order `j ∈ 0..=κ`, `κ = K·D/2`, gives the reduced matrix
//! `A_jl = sqrt(d_j d_l) G^(j+l)`, where `d_j` counts multi-indices of order
//! `j`. Every nonzero eigenvalue of `Γ_K` is an eigenvalue of `A`; the
//! remaining `Σ_j (d_j − 1)` eigenvalues of `Γ_K` are exactly zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_bigint::BigUint;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::click_counting::{JointMomentTable, SymmetricMomentVector};
use crate::error::{Error, Result};
use crate::math::big_to_f64;

/// Largest dimension handled by dense diagonalization.
pub const DENSE_LIMIT: usize = 256;
/// Largest full matrix the oracle will build.
pub const ORACLE_LIMIT: usize = 4096;
/// Absolute tolerance requested from the symmetric eigensolver.
pub const EIGEN_TOLERANCE: f64 = 1e-10;
/// Residual bound `‖Av − λv‖ ≤ RESIDUAL_BOUND · ‖A‖` every reported pair meets.
pub const RESIDUAL_BOUND: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Multiplicities {
    k: usize,
    d: usize,
    values: Vec<BigUint>,
}

impl Multiplicities {
    pub fn modes(&self) -> usize {
        self.k
    }

    pub fn detectors(&self) -> usize {
        self.d
    }

    /// `κ = K·D/2`, the largest total order of a row index.
    pub fn kappa(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[BigUint] {
        &self.values
    }

    pub fn total(&self) -> BigUint {
        self.values.iter().sum()
    }

    pub fn sqrt_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| big_to_f64(v).sqrt()).collect()
    }
}

/// Coefficients of `g(z) = [(1 − z^{D/2+1}) / (1 − z)]^K`.
pub fn multiplicities(k: usize, d: usize) -> Result<Multiplicities> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid("D", format!("must be a positive even integer, got {d}")));
    }
    if k == 0 {
        return Err(Error::invalid("K", "must be at least 1"));
    }
    Ok(multiplicities_unchecked(k, d))
}

// K = 0 yields the constant polynomial 1.
fn multiplicities_unchecked(k: usize, d: usize) -> Multiplicities {
    let half = d / 2;
    let mut poly = vec![BigUint::one()];
    for _ in 0..k {
        // multiply by 1 + z + … + z^{D/2} using a sliding window sum
        let mut next = vec![BigUint::zero(); poly.len() + half];
        let mut window = BigUint::zero();
        for (i, slot) in next.iter_mut().enumerate() {
            if i < poly.len() {
                window += &poly[i];
            }
            if i > half {
                window -= &poly[i - half - 1];
            }
            *slot = window.clone();
        }
        poly = next;
    }
    Multiplicities { k, d, values: poly }
}

#[derive(Debug, Clone)]
pub struct ReducedWitnessMatrix {
    multiplicities: Multiplicities,
    sqrt_d: Vec<f64>,
    entries: DMatrix<f64>,
    source_moments: SymmetricMomentVector,
}

impl ReducedWitnessMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn multiplicities(&self) -> &Multiplicities {
        &self.multiplicities
    }

    pub fn sqrt_multiplicities(&self) -> &[f64] {
        &self.sqrt_d
    }

    pub fn source_moments(&self) -> &SymmetricMomentVector {
        &self.source_moments
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    /// `∂λ/∂G^(m) = Σ_{j+l=m} v_j v_l sqrt(d_j d_l)` for `m = 0..=2κ`.
    pub fn eigenvalue_gradient(&self, eigvec: &[f64]) -> Result<Vec<f64>> {
        let n = self.dimension();
        if eigvec.len() != n {
            return Err(Error::DimensionMismatch {
                what: "eigenvector",
                expected: n,
                actual: eigvec.len(),
            });
        }
        let u: Vec<f64> = eigvec.iter().zip(&self.sqrt_d).map(|(v, s)| v * s).collect();
        let mut grad = vec![0.0; 2 * n - 1];
        for (j, uj) in u.iter().enumerate() {
            for (l, ul) in u.iter().enumerate() {
                grad[j + l] += uj * ul;
            }
        }
        Ok(grad)
    }
}

pub fn build_reduced_matrix(moments: &SymmetricMomentVector, k: usize, d: usize) -> Result<ReducedWitnessMatrix> {
    let mult = multiplicities(k, d)?;
    let needed = k * d;
    if moments.max_order() < needed {
        return Err(Error::InsufficientOrder {
            requested: needed,
            available: moments.max_order(),
        });
    }
    let sqrt_d = mult.sqrt_f64();
    let n = mult.kappa() + 1;
    let g = moments.values();
    let entries = DMatrix::from_fn(n, n, |j, l| sqrt_d[j] * sqrt_d[l] * g[j + l]);
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reduced witness matrix"));
    }
    Ok(ReducedWitnessMatrix {
        multiplicities: mult,
        sqrt_d,
        entries,
        source_moments: moments.truncated(needed)?,
    })
}

/// Full `(D/2+1)^K`-dimensional matrix of moments, for validating the reduction.
pub fn build_full_matrix_oracle(moments: &SymmetricMomentVector, k: usize, d: usize) -> Result<DMatrix<f64>> {
    multiplicities(k, d)?;
    let base = d / 2 + 1;
    let dim = base
        .checked_pow(k as u32)
        .filter(|&n| n <= ORACLE_LIMIT)
        .ok_or_else(|| Error::TooLarge(format!("full matrix ({base}^{k}) exceeds {ORACLE_LIMIT} rows")))?;
    if moments.max_order() < k * d {
        return Err(Error::InsufficientOrder {
            requested: k * d,
            available: moments.max_order(),
        });
    }
    // total order of each multi-index, digits in base D/2+1
    let order: Vec<usize> = (0..dim)
        .map(|mut i| {
            let mut s = 0;
            for _ in 0..k {
                s += i % base;
                i /= base;
            }
            s
        })
        .collect();
    let g = moments.values();
    Ok(DMatrix::from_fn(dim, dim, |r, c| g[order[r] + order[c]]))
}

/// Smallest eigenvalue and unit eigenvector of the reduced matrix.
pub fn min_eigenpair(matrix: &ReducedWitnessMatrix) -> Result<(f64, DVector<f64>)> {
    symmetric_min_eigenpair(&matrix.entries)
}

/// Smallest eigenpair of a real symmetric matrix.
///
/// The eigenvector has unit norm and its first significant component is
/// positive. When the smallest eigenvalue is degenerate, the vector is the
/// normalized projection of the first unit vector `e_0, e_1, …` with a
/// nonzero component in the eigenspace.
pub fn symmetric_min_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "square matrix",
            expected: n,
            actual: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("witness matrix"));
    }
    let scale = a.norm();
    let (lambda, vector) = if n <= DENSE_LIMIT {
        dense_min_eigenpair(a)?
    } else {
        lanczos_min_eigenpair(a)?
    };
    let residual = (a * &vector - &vector * lambda).norm();
    if residual > RESIDUAL_BOUND * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NonConvergence {
            dimension: n,
            detail: format!("residual {residual:e} exceeds {RESIDUAL_BOUND:e} x norm {scale:e}"),
        });
    }
    Ok((lambda, vector))
}

fn dense_min_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = a.nrows();
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 1000 * n).ok_or_else(|| {
        Error::NonConvergence {
            dimension: n,
            detail: "QL iteration limit reached".into(),
        }
    })?;
    let lambda = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let tie = EIGEN_TOLERANCE * a.norm().max(1.0);
    let basis: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v - lambda <= tie)
        .map(|(i, _)| eig.eigenvectors.column(i).into_owned())
        .collect();
    Ok((lambda, canonical_vector(&basis)))
}

/// Deterministic representative of the span of orthonormal `basis`.
fn canonical_vector(basis: &[DVector<f64>]) -> DVector<f64> {
    let mut v = if basis.len() == 1 {
        basis[0].clone()
    } else {
        let n = basis[0].len();
        let mut chosen = basis[0].clone();
        for i in 0..n {
            // projection of e_i onto the eigenspace
            let mut p = DVector::zeros(n);
            for q in basis {
                p.axpy(q[i], q, 1.0);
            }
            if p.norm() > 1e-6 {
                chosen = p;
                break;
            }
        }
        chosen
    };
    v.normalize_mut();
    let threshold = 1e-8 * v.amax();
    if let Some(first) = v.iter().copied().find(|x| x.abs() > threshold) {
        if first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

const LANCZOS_STEPS: usize = 400;
const LANCZOS_RESTARTS: usize = 30;

/// Lanczos with full reorthogonalization and explicit restarts from the
/// current Ritz vector.
fn lanczos_min_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = a.nrows();
    let steps = LANCZOS_STEPS.min(n);
    let scale = a.norm();
    // deterministic, non-degenerate start vector
    let mut start = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 104_729) as f64 / 104_729.0);
    start.normalize_mut();
    let mut best = (f64::INFINITY, start.clone());
    for _ in 0..LANCZOS_RESTARTS {
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut beta: Vec<f64> = Vec::with_capacity(steps);
        let mut q = start.clone();
        for _ in 0..steps {
            let mut w = a * &q;
            let aj = q.dot(&w);
            alpha.push(aj);
            basis.push(q.clone());
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&w);
                    w.axpy(-c, b, 1.0);
                }
            }
            let bj = w.norm();
            if bj <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            beta.push(bj);
            q = w / bj;
        }
        let m = alpha.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j || j + 1 == i {
                beta[i.min(j)]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::try_new(t, f64::EPSILON, 1000 * m).ok_or_else(|| Error::NonConvergence {
            dimension: n,
            detail: "tridiagonal QL iteration limit reached".into(),
        })?;
        let (idx, theta) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        let y = eig.eigenvectors.column(idx);
        let mut x = DVector::zeros(n);
        for (b, &c) in basis.iter().zip(y.iter()) {
            x.axpy(c, b, 1.0);
        }
        x.normalize_mut();
        let residual = (a * &x - &x * theta).norm();
        best = (theta, x.clone());
        if residual <= 0.1 * RESIDUAL_BOUND * scale {
            return Ok((theta, canonical_vector(&[x])));
        }
        start = x;
    }
    let residual = (a * &best.1 - &best.1 * best.0).norm();
    Err(Error::NonConvergence {
        dimension: n,
        detail: format!("Lanczos residual {residual:e} after {LANCZOS_RESTARTS} restarts"),
    })
}

/// Significance of a negative eigenvalue in units of its combined error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Significance {
    Finite(f64),
    /// Negative eigenvalue with zero error.
    Unbounded,
}

impl Significance {
    pub fn value(&self) -> Option<f64> {
        match self {
            Significance::Finite(v) => Some(*v),
            Significance::Unbounded => None,
        }
    }
}

impl Serialize for Significance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Significance::Finite(v) => s.serialize_f64(*v),
            Significance::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Significance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Finite(f64),
            Label(String),
        }
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(Significance::Finite(v)),
            Repr::Label(l) if l == "unbounded" => Ok(Significance::Unbounded),
            Repr::Label(l) => Err(serde::de::Error::custom(format!("unknown significance `{l}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WitnessResult {
    pub min_eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    pub random_error: f64,
    pub systematic_error: f64,
    pub combined_error: f64,
    pub significance: Significance,
}

/// Two-group reduced witness with orders `κ_A = K_A·D_A/2`, `κ_B = K_B·D_B/2`.
///
/// Rows are indexed by `(j_A, j_B)` in row-major order over `j_A`. The random
/// error uses the table's sampling data when present; `systematic_rel` scales
/// all moments coherently.
pub fn joint_reduced_witness(
    joint: &JointMomentTable,
    k_a: usize,
    k_b: usize,
    d_a: usize,
    d_b: usize,
    systematic_rel: f64,
) -> Result<WitnessResult> {
    let ma = joint_multiplicities(k_a, d_a)?;
    let mb = joint_multiplicities(k_b, d_b)?;
    let (need_a, need_b) = (k_a * d_a, k_b * d_b);
    if joint.max_order_a() < need_a {
        return Err(Error::InsufficientOrder {
            requested: need_a,
            available: joint.max_order_a(),
        });
    }
    if joint.max_order_b() < need_b {
        return Err(Error::InsufficientOrder {
            requested: need_b,
            available: joint.max_order_b(),
        });
    }
    let (sa, sb) = (ma.sqrt_f64(), mb.sqrt_f64());
    let (na, nb) = (sa.len(), sb.len());
    let g = joint.values();
    let a = DMatrix::from_fn(na * nb, na * nb, |r, c| {
        let (ja, jb) = (r / nb, r % nb);
        let (la, lb) = (c / nb, c % nb);
        sa[ja] * sa[la] * sb[jb] * sb[lb] * g[(ja + la, jb + lb)]
    });
    let (lambda, v) = symmetric_min_eigenpair(&a)?;

    let mut grad = DMatrix::zeros(joint.max_order_a() + 1, joint.max_order_b() + 1);
    let u: Vec<f64> = (0..na * nb).map(|r| v[r] * sa[r / nb] * sb[r % nb]).collect();
    for r in 0..na * nb {
        for c in 0..na * nb {
            grad[(r / nb + c / nb, r % nb + c % nb)] += u[r] * u[c];
        }
    }
    let random = joint.linear_variance(&grad).unwrap_or(0.0).sqrt();
    let systematic = systematic_rel
        * grad
            .iter()
            .zip(g.iter())
            .map(|(gr, gv)| gr.abs() * gv)
            .sum::<f64>();
    let combined = random.hypot(systematic);
    Ok(WitnessResult {
        min_eigenvalue: lambda,
        eigenvector: v.iter().copied().collect(),
        random_error: random,
        systematic_error: systematic,
        combined_error: combined,
        significance: crate::analysis::significance(lambda, combined),
    })
}

fn joint_multiplicities(k: usize, d: usize) -> Result<Multiplicities> {
    if k == 0 {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::invalid("D", format!("must be a positive even integer, got {d}")));
        }
        return Ok(multiplicities_unchecked(0, d));
    }
    multiplicities(k, d)
}

/// One `(moments, K, D)` evaluation in a batch.
#[derive(Debug, Clone)]
pub struct WitnessCell<'a> {
    pub moments: &'a SymmetricMomentVector,
    pub k: usize,
    pub d: usize,
}

/// Minimal eigenpairs of many independent cells, evaluated in parallel.
/// Output order matches input order.
pub fn min_eigenpairs_batch(cells: &[WitnessCell<'_>]) -> Vec<Result<(f64, DVector<f64>)>> {
    cells
        .par_iter()
        .map(|cell| build_reduced_matrix(cell.moments, cell.k, cell.d).and_then(|m| min_eigenpair(&m)))
        .collect()
}
