//! Online policies over finite action rounds.
//!
//! All policies share one sufficient-statistics state (`V_t`, `b_t`, `C_t`,
//! `kappa_t`). ProBALL policies work inside the offline subspace `U_hat`
//! while the switch test
//!
//! ```text
//! delta_off * tau * sqrt(t) + delta_off * tau' * sqrt(d_K * sum_s kappa_s^2 / t) <= d_A
//! ```
//!
//! holds and fall back to the full-dimensional learner afterwards.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, inv_quad_norm};
use crate::model::ActionRound;
use crate::offline::SubspaceEstimate;
use crate::rng::{standard_normal, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStyle {
    /// Confidence radii from the regret theorems with constant `C`.
    Theory,
    /// `0.33 sqrt(d log(1 + 10 T / d))`.
    Practical,
}

/// Which dimension and horizon the theory-style projected radius uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha1Form {
    /// `C R sqrt(d_K log(T / delta))`.
    Theorem,
    /// `C R sqrt(d_A log(t / delta))`.
    Lemma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonusSchedule {
    pub r: f64,
    pub mu: f64,
    pub c_mult: f64,
    pub delta: f64,
    pub tau: f64,
    pub tau_prime: f64,
    /// Horizon `T`.
    pub horizon: usize,
    pub style: ScheduleStyle,
    pub alpha1_form: Alpha1Form,
}

impl BonusSchedule {
    pub fn practical(horizon: usize, tau: f64) -> Self {
        Self {
            r: 1.0,
            mu: 1.0,
            c_mult: 1.0,
            delta: 0.05,
            tau,
            tau_prime: 0.0,
            horizon,
            style: ScheduleStyle::Practical,
            alpha1_form: Alpha1Form::Theorem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("r", self.r), ("mu", self.mu), ("c_mult", self.c_mult), ("delta", self.delta)];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.tau >= 0.0) || !(self.tau_prime >= 0.0) {
            return Err(Error::InvalidArgument("tau and tau' must be >= 0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }

    fn practical_radius(&self, d: usize) -> f64 {
        let d = d as f64;
        0.33 * (d * (1.0 + 10.0 * self.horizon as f64 / d).ln()).sqrt()
    }

    fn theory_radius(&self, d: usize, log_arg: f64) -> f64 {
        self.r * self.mu.sqrt() + self.c_mult * self.r * (d as f64 * log_arg.ln().max(0.0)).sqrt()
    }

    /// Radius of the projected (d_K-dimensional) confidence set at step `t`.
    pub fn alpha1(&self, t: usize, kappa: f64, delta_off: f64, d_k: usize, d_a: usize) -> f64 {
        match self.style {
            ScheduleStyle::Practical => self.practical_radius(d_k),
            ScheduleStyle::Theory => {
                let leak = if self.tau_prime > 0.0 && kappa > 0.0 {
                    self.tau_prime * self.r * delta_off * kappa
                } else {
                    0.0
                };
                let base = match self.alpha1_form {
                    Alpha1Form::Theorem => self.theory_radius(d_k, self.horizon as f64 / self.delta),
                    Alpha1Form::Lemma => self.theory_radius(d_a, t.max(1) as f64 / self.delta),
                };
                base + leak
            }
        }
    }

    /// Radius of the full-dimensional confidence set.
    pub fn alpha2(&self, d_a: usize) -> f64 {
        match self.style {
            ScheduleStyle::Practical => self.practical_radius(d_a),
            ScheduleStyle::Theory => self.theory_radius(d_a, self.horizon as f64 / self.delta),
        }
    }

    /// Radii for the LOCAL-UCB sets, which use `log(2T / delta)`.
    pub fn local_alphas(&self, d_k: usize, d_a: usize) -> (f64, f64) {
        match self.style {
            ScheduleStyle::Practical => (self.practical_radius(d_k), self.practical_radius(d_a)),
            ScheduleStyle::Theory => {
                let arg = 2.0 * self.horizon as f64 / self.delta;
                (self.theory_radius(d_k, arg), self.theory_radius(d_a, arg))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Projected,
    Fullrank,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Projected => "projected",
            Branch::Fullrank => "fullrank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmChoice {
    pub index: usize,
    pub ucb_value: f64,
    pub branch: Branch,
}

/// Sufficient statistics shared by every online policy.
#[derive(Debug, Clone)]
pub struct OnlineLearnerState {
    pub v: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `C_t = sum_s U_hat^T phi_s phi_s^T`, `d_K x d_A`.
    pub c: DMatrix<f64>,
    pub kappa: f64,
    /// 1-based step counter.
    pub t: usize,
    pub switched: bool,
    pub kappa_sq_sum: f64,
}

impl OnlineLearnerState {
    pub fn new(d_a: usize, d_k: usize) -> Self {
        Self {
            v: DMatrix::identity(d_a, d_a),
            b: DVector::zeros(d_a),
            c: DMatrix::zeros(d_k, d_a),
            kappa: 0.0,
            t: 1,
            switched: false,
            kappa_sq_sum: 0.0,
        }
    }

    pub fn d_a(&self) -> usize {
        self.v.nrows()
    }

    /// Fold in one observation. `C_t` and `kappa_t` are tracked only when a
    /// usable subspace is supplied.
    pub fn update(&mut self, phi: &DVector<f64>, reward: f64, estimate: Option<&SubspaceEstimate>) -> Result<()> {
        if phi.len() != self.d_a() {
            return Err(Error::InvalidArgument(format!(
                "feature has dimension {}, expected {}",
                phi.len(),
                self.d_a()
            )));
        }
        self.v.ger(1.0, phi, phi, 1.0);
        self.b.axpy(reward, phi, 1.0);
        if let Some(est) = estimate.filter(|e| e.delta_off.is_finite()) {
            let x = est.u_hat.transpose() * phi;
            self.c.ger(1.0, &x, phi, 1.0);
            self.kappa = kappa(&self.c, &est.u_hat, &self.v)?;
            self.kappa_sq_sum += self.kappa * self.kappa;
        }
        self.t += 1;
        Ok(())
    }
}

/// Alias matching the update operation's role in the online loop.
pub fn update_state(
    state: &mut OnlineLearnerState,
    phi: &DVector<f64>,
    reward: f64,
    estimate: Option<&SubspaceEstimate>,
) -> Result<()> {
    state.update(phi, reward, estimate)
}

/// `||C||_{(U^T V U)^{-1}} = sqrt(||C^T (U^T V U)^{-1} C||_2)`, evaluated as
/// the top eigenvalue of the `d_K x d_K` matrix `L^{-1} C C^T L^{-T}`.
pub fn kappa(c: &DMatrix<f64>, u_hat: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let proj_v = u_hat.transpose() * (v * u_hat);
    let chol = linalg::cholesky(&proj_v, "projected design matrix")?;
    let l = chol.l_dirty();
    let cct = c * c.transpose();
    let left = l
        .solve_lower_triangular(&cct)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let both = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok(linalg::sym_spectral_norm(&both).max(0.0).sqrt())
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

fn require_round(round: &ActionRound, d_a: usize) -> Result<()> {
    if round.is_empty() {
        return Err(Error::InvalidArgument("empty action round".into()));
    }
    if round.features.iter().any(|f| f.len() != d_a) {
        return Err(Error::InvalidArgument("arm feature dimension mismatch".into()));
    }
    Ok(())
}

/// Per-arm LinUCB values `phi^T beta_2 + alpha2 ||phi||_{V^{-1}}`.
pub fn linucb_values(state: &OnlineLearnerState, round: &ActionRound, alpha2: f64) -> Result<Vec<f64>> {
    require_round(round, state.d_a())?;
    let chol = linalg::cholesky(&state.v, "design matrix")?;
    let beta = chol.solve(&state.b);
    Ok(round
        .features
        .iter()
        .map(|f| f.dot(&beta) + alpha2 * inv_quad_norm(&chol, f))
        .collect())
}

pub fn linucb_select(state: &OnlineLearnerState, round: &ActionRound, alpha2: f64) -> Result<ArmChoice> {
    let values = linucb_values(state, round, alpha2)?;
    let (index, ucb_value) = argmax(values.into_iter()).expect("round is nonempty");
    Ok(ArmChoice {
        index,
        ucb_value,
        branch: Branch::Fullrank,
    })
}

/// Whether the projected confidence set is still in use at the current step.
pub fn switch_test(state: &OnlineLearnerState, estimate: &SubspaceEstimate, schedule: &BonusSchedule) -> bool {
    let delta_off = estimate.delta_off;
    if !delta_off.is_finite() {
        return false;
    }
    let t = state.t.max(1) as f64;
    let mut lhs = delta_off * schedule.tau * t.sqrt();
    if schedule.tau_prime > 0.0 {
        lhs += delta_off * schedule.tau_prime * (estimate.d_k as f64 * state.kappa_sq_sum / t).sqrt();
    }
    lhs <= estimate.d_a as f64
}

struct Projected {
    chol: Cholesky<f64, Dyn>,
    theta: DVector<f64>,
}

fn projected_fit(state: &OnlineLearnerState, u: &DMatrix<f64>) -> Result<Projected> {
    let proj_v = u.transpose() * (&state.v * u);
    let chol = linalg::cholesky(&proj_v, "projected design matrix")?;
    let theta = chol.solve(&(u.transpose() * &state.b));
    Ok(Projected { chol, theta })
}

fn check_estimate(state: &OnlineLearnerState, estimate: &SubspaceEstimate) -> Result<()> {
    if estimate.d_a != state.d_a() || estimate.d_k > estimate.d_a {
        return Err(Error::InvalidArgument("subspace estimate dimensions do not match the learner".into()));
    }
    Ok(())
}

/// ProBALL-UCB arm selection.
pub fn proball_select(
    state: &OnlineLearnerState,
    estimate: &SubspaceEstimate,
    round: &ActionRound,
    schedule: &BonusSchedule,
) -> Result<ArmChoice> {
    check_estimate(state, estimate)?;
    if !switch_test(state, estimate, schedule) {
        return linucb_select(state, round, schedule.alpha2(estimate.d_a));
    }
    require_round(round, state.d_a())?;
    let alpha1 = schedule.alpha1(state.t, state.kappa, estimate.delta_off, estimate.d_k, estimate.d_a);
    let fit = projected_fit(state, &estimate.u_hat)?;
    let values = round.features.iter().map(|f| {
        let x = estimate.u_hat.transpose() * f;
        x.dot(&fit.theta) + alpha1 * inv_quad_norm(&fit.chol, &x)
    });
    let (index, ucb_value) = argmax(values).expect("round is nonempty");
    Ok(ArmChoice {
        index,
        ucb_value,
        branch: Branch::Projected,
    })
}

/// `mean + alpha L^{-T} z` with `z ~ N(0, I)`, a draw from `N(mean, alpha^2 A^{-1})`.
fn gaussian_draw(chol: &Cholesky<f64, Dyn>, mean: &DVector<f64>, alpha: f64, rng: &mut SimRng) -> Result<DVector<f64>> {
    let z = DVector::from_fn(mean.len(), |_, _| standard_normal(rng));
    let l = chol.l_dirty();
    let offset = l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Numerical("covariance factor is singular".into()))?;
    Ok(mean + offset * alpha)
}

/// Linear Thompson sampling in the full space.
pub fn lints_select(state: &OnlineLearnerState, round: &ActionRound, alpha2: f64, rng: &mut SimRng) -> Result<ArmChoice> {
    require_round(round, state.d_a())?;
    let chol = linalg::cholesky(&state.v, "design matrix")?;
    let mean = chol.solve(&state.b);
    let sample = gaussian_draw(&chol, &mean, alpha2, rng)?;
    let (index, ucb_value) = argmax(round.features.iter().map(|f| f.dot(&sample))).expect("round is nonempty");
    Ok(ArmChoice {
        index,
        ucb_value,
        branch: Branch::Fullrank,
    })
}

/// ProBALL-TS arm selection.
pub fn proball_ts_select(
    state: &OnlineLearnerState,
    estimate: &SubspaceEstimate,
    round: &ActionRound,
    schedule: &BonusSchedule,
    rng: &mut SimRng,
) -> Result<ArmChoice> {
    check_estimate(state, estimate)?;
    if !switch_test(state, estimate, schedule) {
        return lints_select(state, round, schedule.alpha2(estimate.d_a), rng);
    }
    require_round(round, state.d_a())?;
    let alpha1 = schedule.alpha1(state.t, state.kappa, estimate.delta_off, estimate.d_k, estimate.d_a);
    let fit = projected_fit(state, &estimate.u_hat)?;
    let theta = gaussian_draw(&fit.chol, &fit.theta, alpha1, rng)?;
    let beta = &estimate.u_hat * theta;
    let (index, ucb_value) = argmax(round.features.iter().map(|f| f.dot(&beta))).expect("round is nonempty");
    Ok(ArmChoice {
        index,
        ucb_value,
        branch: Branch::Projected,
    })
}

/// Candidate subspaces for LOCAL-UCB: `U_hat` itself plus `budget` random
/// bases `orth(U_hat + s E)` with `s` bisected so that
/// `||U_hat^T U||_F^2 = d_K - delta_off^2 / 2`, i.e. on the boundary of the
/// subspace confidence set.
pub fn local_candidates(estimate: &SubspaceEstimate, budget: usize, rng: &mut SimRng) -> Result<Vec<DMatrix<f64>>> {
    let u_hat = &estimate.u_hat;
    let (d_a, d_k) = u_hat.shape();
    let mut out = vec![u_hat.clone()];
    let delta_off = estimate.delta_off;
    if delta_off == 0.0 || d_k == d_a {
        return Ok(out);
    }
    let target = if delta_off.is_finite() {
        d_k as f64 - delta_off * delta_off / 2.0
    } else {
        f64::NEG_INFINITY
    };
    let overlap = |u: &DMatrix<f64>| (u_hat.transpose() * u).norm_squared();
    for _ in 0..budget {
        let e = DMatrix::from_fn(d_a, d_k, |_, _| standard_normal(rng));
        let far = linalg::orthonormalize_columns(&e)?;
        if overlap(&far) >= target {
            // The whole ray stays inside the set; take its far end.
            out.push(far);
            continue;
        }
        let at = |s: f64| linalg::orthonormalize_columns(&(u_hat + &e * s));
        let mut hi = 1.0;
        while overlap(&at(hi)?) > target {
            hi *= 2.0;
            if hi > 1e8 {
                break;
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if overlap(&at(mid)?) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(at(lo)?);
    }
    Ok(out)
}

/// Per-arm LOCAL-UCB values: `max_U min(projected UCB(U), full UCB)`.
pub fn local_ucb_values(
    state: &OnlineLearnerState,
    round: &ActionRound,
    candidates: &[DMatrix<f64>],
    alpha1: f64,
    alpha2: f64,
) -> Result<Vec<f64>> {
    let full = linucb_values(state, round, alpha2)?;
    let mut best = vec![f64::NEG_INFINITY; round.len()];
    for u in candidates {
        let fit = projected_fit(state, u)?;
        for (i, f) in round.features.iter().enumerate() {
            let x = u.transpose() * f;
            let proj = x.dot(&fit.theta) + alpha1 * inv_quad_norm(&fit.chol, &x);
            best[i] = best[i].max(proj.min(full[i]));
        }
    }
    Ok(best)
}

/// Approximate LOCAL-UCB: optimism over the intersection of the offline
/// and online confidence sets, with the subspace searched over a random
/// candidate set. Each returned value upper-bounds nothing beyond LinUCB's.
pub fn local_ucb_select(
    state: &OnlineLearnerState,
    estimate: &SubspaceEstimate,
    round: &ActionRound,
    schedule: &BonusSchedule,
    solver_budget: usize,
    rng: &mut SimRng,
) -> Result<ArmChoice> {
    check_estimate(state, estimate)?;
    if solver_budget == 0 {
        return Err(Error::InvalidArgument("solver_budget must be >= 1".into()));
    }
    let (alpha1, alpha2) = schedule.local_alphas(estimate.d_k, estimate.d_a);
    let candidates = local_candidates(estimate, solver_budget, rng)?;
    let values = local_ucb_values(state, round, &candidates, alpha1, alpha2)?;
    let (index, ucb_value) = argmax(values.into_iter()).expect("round is nonempty");
    Ok(ArmChoice {
        index,
        ucb_value,
        branch: Branch::Projected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyId {
    #[serde(rename = "linucb")]
    LinUcb,
    #[serde(rename = "lints")]
    LinTs,
    #[serde(rename = "proball-ucb")]
    ProballUcb,
    #[serde(rename = "proball-ts")]
    ProballTs,
    #[serde(rename = "local-ucb")]
    LocalUcb,
    /// Greedy on the true reward parameter; zero regret by construction.
    #[serde(rename = "oracle")]
    Oracle,
}

impl PolicyId {
    pub const ALL: [PolicyId; 6] = [
        PolicyId::LinUcb,
        PolicyId::LinTs,
        PolicyId::ProballUcb,
        PolicyId::ProballTs,
        PolicyId::LocalUcb,
        PolicyId::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::LinUcb => "linucb",
            PolicyId::LinTs => "lints",
            PolicyId::ProballUcb => "proball-ucb",
            PolicyId::ProballTs => "proball-ts",
            PolicyId::LocalUcb => "local-ucb",
            PolicyId::Oracle => "oracle",
        }
    }

    pub fn uses_subspace(self) -> bool {
        matches!(self, PolicyId::ProballUcb | PolicyId::ProballTs | PolicyId::LocalUcb)
    }
}

impl std::str::FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy {s:?}")))
    }
}

/// A policy bound to its state, subspace, schedule and private rng.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: PolicyId,
    pub state: OnlineLearnerState,
    pub estimate: Option<SubspaceEstimate>,
    pub schedule: BonusSchedule,
    pub solver_budget: usize,
    rng: SimRng,
}

impl Learner {
    pub fn new(
        policy: PolicyId,
        d_a: usize,
        estimate: Option<SubspaceEstimate>,
        schedule: BonusSchedule,
        solver_budget: usize,
        rng: SimRng,
    ) -> Result<Self> {
        schedule.validate()?;
        if policy.uses_subspace() && estimate.is_none() {
            return Err(Error::InvalidArgument(format!("policy {} needs a subspace estimate", policy.as_str())));
        }
        if let Some(e) = &estimate {
            e.validate()?;
            if e.d_a != d_a {
                return Err(Error::InvalidArgument("subspace estimate dimension does not match d_A".into()));
            }
        }
        let d_k = estimate.as_ref().map_or(0, |e| e.d_k);
        Ok(Self {
            policy,
            state: OnlineLearnerState::new(d_a, d_k),
            estimate,
            schedule,
            solver_budget,
            rng,
        })
    }

    /// The oracle policy needs the true parameter and is handled by the caller.
    pub fn select(&mut self, round: &ActionRound) -> Result<ArmChoice> {
        let d_a = self.state.d_a();
        let choice = match self.policy {
            PolicyId::LinUcb => linucb_select(&self.state, round, self.schedule.alpha2(d_a))?,
            PolicyId::LinTs => lints_select(&self.state, round, self.schedule.alpha2(d_a), &mut self.rng)?,
            PolicyId::ProballUcb => proball_select(&self.state, self.subspace()?, round, &self.schedule)?,
            PolicyId::ProballTs => {
                let est = self.estimate.as_ref().expect("checked at construction");
                proball_ts_select(&self.state, est, round, &self.schedule, &mut self.rng)?
            }
            PolicyId::LocalUcb => {
                let est = self.estimate.as_ref().expect("checked at construction");
                local_ucb_select(&self.state, est, round, &self.schedule, self.solver_budget, &mut self.rng)?
            }
            PolicyId::Oracle => {
                return Err(Error::InvalidArgument("the oracle policy selects from the true parameter".into()))
            }
        };
        if choice.branch == Branch::Fullrank && self.policy.uses_subspace() {
            self.state.switched = true;
        }
        Ok(choice)
    }

    fn subspace(&self) -> Result<&SubspaceEstimate> {
        self.estimate
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("missing subspace estimate".into()))
    }

    pub fn observe(&mut self, phi: &DVector<f64>, reward: f64) -> Result<()> {
        let est = if self.policy.uses_subspace() { self.estimate.as_ref() } else { None };
        self.state.update(phi, reward, est)
    }
}
