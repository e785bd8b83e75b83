//! Subspace estimation from offline latent bandit data.
//!
//! Each trajectory is split into odd and even steps, a reward parameter is
//! estimated from each half, and the symmetrized cross-half outer products
//! are averaged into `M_bar`. The averaged correction matrices `D_bar_1`,
//! `D_bar_2` undo the shrinkage of the per-half estimators, and the top
//! eigenvectors of `D_bar_1^{-1} M_bar D_bar_2^{-1}` span the estimate.
//!
//! Two estimator variants are supported:
//!
//! * `Regularized`: ridge with `V = mu I + X^T X`, `D = I - mu V^{-1}`.
//! * `Pseudoinverse`: `beta = V^+ b`, `D = W W^T` where `W` spans the
//!   nonzero eigenspace of `V`.
//!
//! When a half has fewer steps than dimensions both variants are computed
//! in the `h x h` Gram space of the half instead of the `d_A x d_A` space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, maybe_inf, rows};
use crate::model::{Step, Trajectory};

/// Trajectories per parallel work unit. Fixed so the reduction order never
/// depends on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Regularized,
    Pseudoinverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Hoeffding,
    EmpiricalBernstein,
    /// Caller-supplied concentration radii.
    External { delta_m: f64, delta_d: f64 },
}

/// Running ridge statistics `V = mu I + sum phi phi^T`, `b = sum phi r`.
#[derive(Debug, Clone)]
pub struct RidgeAccumulator {
    v: DMatrix<f64>,
    b: DVector<f64>,
    mu: f64,
    count: usize,
}

impl RidgeAccumulator {
    pub fn new(d: usize, mu: f64) -> Self {
        Self {
            v: DMatrix::identity(d, d) * mu,
            b: DVector::zeros(d),
            mu,
            count: 0,
        }
    }

    pub fn push(&mut self, feature: &DVector<f64>, reward: f64) {
        self.v.ger(1.0, feature, feature, 1.0);
        self.b.axpy(reward, feature, 1.0);
        self.count += 1;
    }

    pub fn from_steps<'a>(d: usize, mu: f64, steps: impl IntoIterator<Item = &'a Step>) -> Self {
        let mut acc = Self::new(d, mu);
        for s in steps {
            acc.push(&s.feature, s.reward);
        }
        acc
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// `V^{-1} b` through a Cholesky solve.
pub fn ridge_solve(acc: &RidgeAccumulator) -> Result<DVector<f64>> {
    let chol = nalgebra::Cholesky::new(acc.v.clone()).ok_or_else(|| {
        Error::Singular(format!("ridge design matrix with mu={} is not positive definite", acc.mu))
    })?;
    Ok(chol.solve(&acc.b))
}

/// Odd steps (1st, 3rd, ...) go to the first half. An odd-length
/// trajectory puts its extra step in the first half.
pub fn split_odd_even(traj: &Trajectory) -> Result<(Vec<&Step>, Vec<&Step>)> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split a trajectory of length {}",
            traj.len()
        )));
    }
    let first = traj.steps().iter().step_by(2).collect();
    let second = traj.steps().iter().skip(1).step_by(2).collect();
    Ok((first, second))
}

fn design(steps: &[&Step]) -> (DMatrix<f64>, DVector<f64>) {
    let d = steps[0].feature.len();
    let x = DMatrix::from_fn(steps.len(), d, |i, j| steps[i].feature[j]);
    let r = DVector::from_iterator(steps.len(), steps.iter().map(|s| s.reward));
    (x, r)
}

/// Minimum-norm least squares from one half: `beta = V^+ b` and the
/// orthogonal projector onto the row space of the design.
pub fn pinv_estimate(steps: &[&Step]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("no steps to estimate from".into()));
    }
    let (x, r) = design(steps);
    let (beta, w) = pinv_parts(&x, &r);
    let proj = &w * w.transpose();
    Ok((beta, proj))
}

/// Returns `(X^+ r, W)` with `W` an orthonormal basis of the row space of `X`.
fn pinv_parts(x: &DMatrix<f64>, r: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let gram = x * x.transpose();
    let (vals, vecs) = linalg::sym_eigen_desc(&gram);
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > tol && vals[i] > 0.0).collect();
    let d = x.ncols();
    let mut w = DMatrix::zeros(d, keep.len());
    let mut beta = DVector::zeros(d);
    for (c, &i) in keep.iter().enumerate() {
        let q = vecs.column(i);
        let xtq = x.transpose() * q;
        beta.axpy(q.dot(r) / vals[i], &xtq, 1.0);
        w.set_column(c, &(xtq / vals[i].sqrt()));
    }
    (beta, w)
}

/// Per-half estimate and correction matrix.
struct HalfEstimate {
    beta: DVector<f64>,
    correction: DMatrix<f64>,
}

fn half_estimate(steps: &[&Step], d: usize, mu: f64, variant: Variant) -> Result<HalfEstimate> {
    match variant {
        Variant::Pseudoinverse => {
            let (x, r) = design(steps);
            let (beta, w) = pinv_parts(&x, &r);
            Ok(HalfEstimate {
                beta,
                correction: &w * w.transpose(),
            })
        }
        Variant::Regularized if d <= steps.len() => {
            let acc = RidgeAccumulator::from_steps(d, mu, steps.iter().copied());
            let chol = linalg::cholesky(acc.v(), "ridge design matrix")?;
            let beta = chol.solve(acc.b());
            let correction = DMatrix::identity(d, d) - chol.inverse() * mu;
            Ok(HalfEstimate { beta, correction })
        }
        Variant::Regularized => {
            // (mu I + X^T X)^{-1} X^T = X^T (mu I + X X^T)^{-1}
            let (x, r) = design(steps);
            let k = x.nrows();
            let inner = &x * x.transpose() + DMatrix::identity(k, k) * mu;
            let chol = linalg::cholesky(&inner, "ridge kernel matrix")?;
            let beta = x.transpose() * chol.solve(&r);
            let correction = x.transpose() * chol.solve(&x);
            Ok(HalfEstimate {
                beta,
                correction: linalg::symmetrize(&correction),
            })
        }
    }
}

/// Averaged moment statistics of a dataset.
#[derive(Debug, Clone)]
pub struct MomentSummary {
    pub m_bar: DMatrix<f64>,
    pub d_bar_1: DMatrix<f64>,
    pub d_bar_2: DMatrix<f64>,
    /// `|| sum_n M_n^2 ||_2`.
    pub m_list_sq_norm: f64,
    /// `max_n ||M_n||_2`.
    pub m_max_norm: f64,
    pub n: usize,
    /// Longest trajectory length seen.
    pub h: usize,
    pub variant: Variant,
}

impl MomentSummary {
    pub fn d_a(&self) -> usize {
        self.m_bar.nrows()
    }
}

struct Partial {
    m: DMatrix<f64>,
    m_sq: DMatrix<f64>,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    m_max: f64,
}

impl Partial {
    fn zeros(d: usize) -> Self {
        Self {
            m: DMatrix::zeros(d, d),
            m_sq: DMatrix::zeros(d, d),
            d1: DMatrix::zeros(d, d),
            d2: DMatrix::zeros(d, d),
            m_max: 0.0,
        }
    }

    fn absorb(&mut self, other: Partial) {
        self.m += other.m;
        self.m_sq += other.m_sq;
        self.d1 += other.d1;
        self.d2 += other.d2;
        self.m_max = self.m_max.max(other.m_max);
    }
}

fn trajectory_partial(traj: &Trajectory, d: usize, mu: f64, variant: Variant, acc: &mut Partial) -> Result<()> {
    let (first, second) = split_odd_even(traj)?;
    let e1 = half_estimate(&first, d, mu, variant)?;
    let e2 = half_estimate(&second, d, mu, variant)?;
    let (a, b) = (&e1.beta, &e2.beta);
    // M = (a b^T + b a^T) / 2
    acc.m.ger(0.5, a, b, 1.0);
    acc.m.ger(0.5, b, a, 1.0);
    // M^2 = ((a.b)(a b^T + b a^T) + |b|^2 a a^T + |a|^2 b b^T) / 4
    let ab = a.dot(b);
    let (aa, bb) = (a.norm_squared(), b.norm_squared());
    acc.m_sq.ger(0.25 * ab, a, b, 1.0);
    acc.m_sq.ger(0.25 * ab, b, a, 1.0);
    acc.m_sq.ger(0.25 * bb, a, a, 1.0);
    acc.m_sq.ger(0.25 * aa, b, b, 1.0);
    // eigenvalues of sym(a b^T) are (a.b +- |a||b|) / 2
    acc.m_max = acc.m_max.max(0.5 * (ab.abs() + (aa * bb).sqrt()));
    acc.d1 += e1.correction;
    acc.d2 += e2.correction;
    Ok(())
}

pub fn build_moments(dataset: &[Trajectory], mu: f64, variant: Variant) -> Result<MomentSummary> {
    let d = dataset
        .first()
        .and_then(Trajectory::dim)
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    if variant == Variant::Regularized && !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("regularized variant needs mu > 0, got {mu}")));
    }
    for (i, t) in dataset.iter().enumerate() {
        if t.steps().iter().any(|s| s.feature.len() != d) {
            return Err(Error::InvalidArgument(format!(
                "trajectory {i} has features of a different dimension than {d}"
            )));
        }
    }
    let partials: Vec<Result<Partial>> = dataset
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial::zeros(d);
            for traj in chunk {
                trajectory_partial(traj, d, mu, variant, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = Partial::zeros(d);
    for p in partials {
        total.absorb(p?);
    }
    let n = dataset.len() as f64;
    Ok(MomentSummary {
        m_bar: linalg::symmetrize(&(total.m / n)),
        d_bar_1: linalg::symmetrize(&(total.d1 / n)),
        d_bar_2: linalg::symmetrize(&(total.d2 / n)),
        m_list_sq_norm: linalg::sym_spectral_norm(&total.m_sq),
        m_max_norm: total.m_max,
        n: dataset.len(),
        h: dataset.iter().map(Trajectory::len).max().unwrap_or(0),
        variant,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Matrix Hoeffding radius for the averaged correction matrices:
/// `sqrt(8 log(4 d_A / delta) / n)`.
pub fn bound_delta_d(n: usize, d_a: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    Ok(hoeffding_radius(n, (4.0 * d_a as f64 / delta).ln()))
}

/// `sqrt(8 log_term / n)`, with `log_term = log(4 d_A / delta)`.
pub fn hoeffding_radius(n: usize, log_term: f64) -> f64 {
    (8.0 * log_term / n as f64).sqrt()
}

/// Empirical-Bernstein radius for `M_bar` under ridge regularization,
/// three terms exactly as stated for the regularized estimator.
pub fn bound_delta_m(summary: &MomentSummary, delta: f64, r: f64, h: usize, mu: f64) -> Result<f64> {
    check_delta(delta)?;
    if summary.variant == Variant::Pseudoinverse {
        return Err(Error::NotApplicable(
            "the M_bar radius depends on mu; use the variance-only radius for the pseudoinverse variant".into(),
        ));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be > 0, got {mu}")));
    }
    let log_term = (4.0 * summary.d_a() as f64 / delta).ln();
    Ok(delta_m_terms(summary.m_list_sq_norm, summary.n, log_term, r, h, mu))
}

/// The three-term radius on raw inputs, with `log_term = log(4 d_A / delta)`.
pub fn delta_m_terms(m_sq_norm: f64, n: usize, log_term: f64, r: f64, h: usize, mu: f64) -> f64 {
    let n = n as f64;
    let scale = r * r * (2.0 + h as f64 / (2.0 * mu));
    (2.0 * m_sq_norm * log_term / n).sqrt()
        + 2.0 * scale * (2.0 * log_term / n).powf(0.75)
        + 4.0 * scale * log_term / (3.0 * n)
}

/// Variance-only matrix-Bernstein radius from the empirical second moment:
/// `sqrt(2 ||sum M_n^2 / n||_2 log(4 d_A / delta) / n)`.
pub fn delta_m_variance_only(summary: &MomentSummary, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let n = summary.n as f64;
    let log_term = (4.0 * summary.d_a() as f64 / delta).ln();
    Ok((2.0 * (summary.m_list_sq_norm / n) * log_term / n).sqrt())
}

/// Matrix Hoeffding radius for `M_bar` using the empirical range
/// `max_n ||M_n||_2`.
pub fn delta_m_hoeffding(summary: &MomentSummary, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let log_term = (4.0 * summary.d_a() as f64 / delta).ln();
    Ok(summary.m_max_norm * (8.0 * log_term / summary.n as f64).sqrt())
}

/// Spectral bound on `||U_hat U_hat^T - U* U*^T||_2`.
pub fn compute_delta_off(delta_m: f64, delta_d: f64, b_d: f64, lambda_hat: f64, d_k: usize, r: f64) -> Result<f64> {
    if !(lambda_hat > 0.0) {
        return Err(Error::DegenerateGap(lambda_hat));
    }
    let bd_dd = b_d * delta_d;
    if bd_dd >= 1.0 {
        return Err(Error::VacuousBound { product: bd_dd });
    }
    let shrink = 1.0 - bd_dd;
    let d_term = b_d.powi(3) * (2.0 - bd_dd) / (shrink * shrink) * (r * r + delta_m) * delta_d;
    let m_term = (b_d / shrink).powi(2) * delta_m;
    Ok(2.0 * (2.0 * d_k as f64).sqrt() / lambda_hat * (d_term + m_term))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub delta_m: f64,
    pub delta_d: f64,
    pub b_d: f64,
    pub lambda_hat: f64,
    pub r: f64,
}

/// The offline phase's output: an orthonormal basis and its error radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceEstimate {
    pub d_a: usize,
    pub d_k: usize,
    #[serde(with = "rows")]
    pub u_hat: DMatrix<f64>,
    /// `"inf"` in JSON when the bound is vacuous.
    #[serde(with = "maybe_inf")]
    pub delta_off: f64,
    /// Eigenvalues of the corrected moment target, descending.
    pub eigenvalues: Vec<f64>,
    pub bound_inputs: BoundInputs,
    pub vacuous: bool,
    pub n: usize,
}

impl SubspaceEstimate {
    /// A known subspace with a trusted radius, e.g. the ground truth.
    pub fn from_basis(u: DMatrix<f64>, delta_off: f64) -> Result<Self> {
        let (d_a, d_k) = u.shape();
        let gram = u.transpose() * &u;
        if (gram - DMatrix::identity(d_k, d_k)).amax() > 1e-8 {
            return Err(Error::InvalidArgument("basis columns are not orthonormal".into()));
        }
        Ok(Self {
            d_a,
            d_k,
            u_hat: u,
            delta_off,
            eigenvalues: Vec::new(),
            bound_inputs: BoundInputs {
                delta_m: 0.0,
                delta_d: 0.0,
                b_d: 1.0,
                lambda_hat: 0.0,
                r: 0.0,
            },
            vacuous: !delta_off.is_finite(),
            n: 0,
        })
    }

    pub fn projector(&self) -> DMatrix<f64> {
        linalg::projector(&self.u_hat)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_hat.shape() != (self.d_a, self.d_k) {
            return Err(Error::InvalidArgument("u_hat shape does not match d_a x d_k".into()));
        }
        let gram = self.u_hat.transpose() * &self.u_hat;
        if (gram - DMatrix::identity(self.d_k, self.d_k)).amax() > 1e-8 {
            return Err(Error::InvalidArgument("u_hat columns are not orthonormal".into()));
        }
        if !(self.delta_off >= 0.0) {
            return Err(Error::InvalidArgument("delta_off must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoldConfig {
    pub d_k: usize,
    pub mu: f64,
    pub delta: f64,
    pub bound_kind: BoundKind,
    pub variant: Variant,
    /// Reward bound `R` entering the radius formulas.
    pub reward_bound: f64,
    /// Drop the `Delta_D` contribution from `Delta_off`.
    pub simplified_delta_off: bool,
}

impl SoldConfig {
    pub fn new(d_k: usize) -> Self {
        Self {
            d_k,
            mu: 1.0,
            delta: 0.05,
            bound_kind: BoundKind::EmpiricalBernstein,
            variant: Variant::Pseudoinverse,
            reward_bound: 1.0,
            simplified_delta_off: false,
        }
    }
}

fn invert_correction(d_bar: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (vals, vecs) = linalg::sym_eigen_desc(d_bar);
    let min_eig = vals.last().copied().unwrap_or(0.0);
    if !(min_eig > 1e-10) {
        return Err(Error::NearSingular { min_eig });
    }
    let inv_diag = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v)));
    Ok((&vecs * inv_diag * vecs.transpose(), 1.0 / min_eig))
}

pub fn sold(dataset: &[Trajectory], cfg: &SoldConfig) -> Result<SubspaceEstimate> {
    check_delta(cfg.delta)?;
    let summary = build_moments(dataset, cfg.mu, cfg.variant)?;
    let d_a = summary.d_a();
    if cfg.d_k == 0 || cfg.d_k > d_a {
        return Err(Error::InvalidArgument(format!("need 1 <= d_K <= d_A, got d_K={}", cfg.d_k)));
    }
    let (d1_inv, b1) = invert_correction(&summary.d_bar_1)?;
    let (d2_inv, b2) = invert_correction(&summary.d_bar_2)?;
    let b_d = b1.max(b2);

    let target = linalg::symmetrize(&(&d1_inv * &summary.m_bar * &d2_inv));
    let (eigenvalues, vecs) = linalg::sym_eigen_desc(&target);
    let u_hat = vecs.columns(0, cfg.d_k).clone_owned();

    let (m_eigs, _) = linalg::sym_eigen_desc(&summary.m_bar);
    let lambda_hat = m_eigs[cfg.d_k - 1] - m_eigs.get(cfg.d_k).copied().unwrap_or(0.0);

    let (delta_m, delta_d) = match cfg.bound_kind {
        BoundKind::External { delta_m, delta_d } => (delta_m, delta_d),
        BoundKind::Hoeffding => (
            delta_m_hoeffding(&summary, cfg.delta)?,
            bound_delta_d(summary.n, d_a, cfg.delta)?,
        ),
        BoundKind::EmpiricalBernstein => {
            let dm = match cfg.variant {
                Variant::Regularized => bound_delta_m(&summary, cfg.delta, cfg.reward_bound, summary.h, cfg.mu)?,
                Variant::Pseudoinverse => delta_m_variance_only(&summary, cfg.delta)?,
            };
            (dm, bound_delta_d(summary.n, d_a, cfg.delta)?)
        }
    };
    let dd_used = if cfg.simplified_delta_off { 0.0 } else { delta_d };

    let (delta_off, vacuous) = if cfg.d_k == d_a {
        (0.0, false)
    } else if lambda_hat <= 1e-12 {
        log::warn!("eigengap {lambda_hat:.3e} too small; subspace radius is vacuous");
        (f64::INFINITY, true)
    } else {
        match compute_delta_off(delta_m, dd_used, b_d, lambda_hat, cfg.d_k, cfg.reward_bound) {
            Ok(v) => (v, false),
            Err(Error::VacuousBound { product }) => {
                log::warn!("B_D * delta_D = {product:.3} >= 1; subspace radius is vacuous");
                (f64::INFINITY, true)
            }
            Err(e) => return Err(e),
        }
    };

    Ok(SubspaceEstimate {
        d_a,
        d_k: cfg.d_k,
        u_hat,
        delta_off,
        eigenvalues,
        bound_inputs: BoundInputs {
            delta_m,
            delta_d,
            b_d,
            lambda_hat,
            r: cfg.reward_bound,
        },
        vacuous,
        n: summary.n,
    })
}

/// Number of eigenvalues at least `rel_threshold` times the largest one.
pub fn estimate_rank(eigenvalues: &[f64], rel_threshold: f64) -> usize {
    let top = match eigenvalues.first() {
        Some(&v) if v > 0.0 => v,
        _ => return 0,
    };
    let cut = rel_threshold * top;
    eigenvalues.iter().filter(|&&v| v >= cut).count()
}

/// Rank at the largest ratio drop `v_k / v_{k+1}` among `k >= min_rank`;
/// nonpositive trailing values count as an infinite drop.
pub fn largest_gap_rank(values: &[f64], min_rank: usize) -> usize {
    let mut best = (min_rank.max(1).min(values.len()), f64::NEG_INFINITY);
    for k in min_rank.max(1)..values.len() {
        let (a, b) = (values[k - 1], values[k]);
        if a <= 0.0 {
            break;
        }
        let ratio = if b > 0.0 { a / b } else { f64::INFINITY };
        if ratio > best.1 {
            best = (k, ratio);
        }
    }
    best.0
}
