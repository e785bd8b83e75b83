//! Linear latent contextual bandit environment.
//!
//! A trajectory's reward parameter is `beta = U* theta` with `theta` drawn
//! once per trajectory. Rewards are `phi^T beta + eps`, where `eps` is
//! Gaussian noise truncated at three standard deviations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, rows};
use crate::rng::{standard_normal, stream_rng, truncated_normal, SimRng, Stream};

/// One logged interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub feature: DVector<f64>,
    pub reward: f64,
}

/// An offline episode generated under a single hidden latent state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    steps: Vec<Step>,
    hidden_theta: DVector<f64>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, hidden_theta: DVector<f64>) -> Self {
        Self { steps, hidden_theta }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.steps.first().map(|s| s.feature.len())
    }

    /// Ground-truth latent state. Diagnostics only; estimators never read it.
    pub fn hidden_theta(&self) -> &DVector<f64> {
        &self.hidden_theta
    }
}

/// The arms available in one online round.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRound {
    pub features: Vec<DVector<f64>>,
}

impl ActionRound {
    pub fn new(features: Vec<DVector<f64>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("action round has no arms".into()));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    /// Fresh `N(0, I)` draws normalized to unit length.
    UnitSphere,
    /// A fixed catalog of feature vectors.
    Finite(Vec<DVector<f64>>),
}

/// Logging policy for offline data. It sees only the feature source, never
/// the latent state.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    Uniform,
    /// Fixed probabilities over a finite catalog.
    Weighted(Vec<f64>),
}

impl BehaviorPolicy {
    pub fn draw_feature(&self, source: &FeatureSource, rng: &mut SimRng) -> Result<DVector<f64>> {
        match (self, source) {
            (BehaviorPolicy::Uniform, FeatureSource::UnitSphere) => {
                Err(Error::InvalidArgument("unit-sphere source needs a dimension".into()))
            }
            (BehaviorPolicy::Weighted(_), FeatureSource::UnitSphere) => Err(Error::InvalidArgument(
                "weighted behavior policy requires a finite feature universe".into(),
            )),
            (BehaviorPolicy::Uniform, FeatureSource::Finite(items)) => {
                if items.is_empty() {
                    return Err(Error::InvalidArgument("empty feature universe".into()));
                }
                Ok(items[rng.random_range(0..items.len())].clone())
            }
            (BehaviorPolicy::Weighted(w), FeatureSource::Finite(items)) => {
                if w.len() != items.len() || w.iter().any(|p| *p < 0.0) {
                    return Err(Error::InvalidArgument("weights must match the universe and be nonnegative".into()));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidArgument("weights sum to zero".into()));
                }
                let mut u = rng.random::<f64>() * total;
                for (i, p) in w.iter().enumerate() {
                    if u < *p {
                        return Ok(items[i].clone());
                    }
                    u -= p;
                }
                let last = w.iter().rposition(|p| *p > 0.0).unwrap_or(items.len() - 1);
                Ok(items[last].clone())
            }
        }
    }
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn unit_sphere_feature(d: usize, rng: &mut SimRng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| standard_normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentLinearBandit {
    pub d_a: usize,
    pub d_k: usize,
    pub u_star: DMatrix<f64>,
    pub theta_mean: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    pub noise_std: f64,
    pub reward_bound: f64,
    pub seed: u64,
    pub features: FeatureSource,
}

/// Build the synthetic instance: `U*` entries i.i.d. `Unif(0, 2.5/(d_K d_A))`
/// then orthonormalized, `theta ~ N(0, I / d_K)`, unit-sphere features.
pub fn synth_model(d_a: usize, d_k: usize, noise_std: f64, seed: u64) -> Result<LatentLinearBandit> {
    if d_k == 0 || d_k > d_a {
        return Err(Error::InvalidArgument(format!("need 1 <= d_K <= d_A, got d_K={d_k}, d_A={d_a}")));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = stream_rng(seed, Stream::Model);
    let hi = 2.5 / (d_k as f64 * d_a as f64);
    let raw = DMatrix::from_fn(d_a, d_k, |_, _| rng.random::<f64>() * hi);
    let u_star = linalg::orthonormalize_columns(&raw)?;
    LatentLinearBandit::new(
        u_star,
        DVector::zeros(d_k),
        DMatrix::identity(d_k, d_k) / d_k as f64,
        noise_std,
        noise_std.max(1.0),
        seed,
        FeatureSource::UnitSphere,
    )
}

impl LatentLinearBandit {
    pub fn new(
        u_star: DMatrix<f64>,
        theta_mean: DVector<f64>,
        theta_cov: DMatrix<f64>,
        noise_std: f64,
        reward_bound: f64,
        seed: u64,
        features: FeatureSource,
    ) -> Result<Self> {
        let (d_a, d_k) = u_star.shape();
        let model = Self {
            d_a,
            d_k,
            u_star,
            theta_mean,
            theta_cov,
            noise_std,
            reward_bound,
            seed,
            features,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_k > self.d_a {
            return Err(Error::InvalidArgument("need 1 <= d_K <= d_A".into()));
        }
        let gram = self.u_star.transpose() * &self.u_star;
        if (gram - DMatrix::identity(self.d_k, self.d_k)).amax() > 1e-10 {
            return Err(Error::InvalidArgument("u_star columns are not orthonormal".into()));
        }
        if self.theta_mean.len() != self.d_k || self.theta_cov.shape() != (self.d_k, self.d_k) {
            return Err(Error::InvalidArgument("latent distribution has wrong dimension".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.reward_bound > 0.0) || self.noise_std > self.reward_bound {
            return Err(Error::InvalidArgument("need 0 <= noise_std <= reward_bound".into()));
        }
        if let FeatureSource::Finite(items) = &self.features {
            for f in items {
                if f.len() != self.d_a || f.norm() > 1.0 + 1e-12 {
                    return Err(Error::InvalidArgument("feature outside the unit ball or wrong dim".into()));
                }
            }
        }
        Ok(())
    }

    pub fn beta(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.u_star * theta
    }

    pub fn draw_feature(&self, policy: &BehaviorPolicy, rng: &mut SimRng) -> Result<DVector<f64>> {
        match (&self.features, policy) {
            (FeatureSource::UnitSphere, BehaviorPolicy::Uniform) => Ok(unit_sphere_feature(self.d_a, rng)),
            (source, policy) => policy.draw_feature(source, rng),
        }
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            d_a: self.d_a,
            d_k: self.d_k,
            noise_std: self.noise_std,
            reward_bound: self.reward_bound,
            seed: self.seed,
            u_star: self.u_star.clone(),
        }
    }
}

/// Draw `theta ~ N(theta_mean, theta_cov)`. A singular covariance is fine.
pub fn sample_theta(model: &LatentLinearBandit, rng: &mut SimRng) -> DVector<f64> {
    let eig = SymmetricEigen::new(linalg::symmetrize(&model.theta_cov));
    let z = DVector::from_fn(model.d_k, |_, _| standard_normal(rng));
    let scaled = DVector::from_fn(model.d_k, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
    &model.theta_mean + &eig.eigenvectors * scaled
}

pub fn sample_trajectory(
    model: &LatentLinearBandit,
    theta: &DVector<f64>,
    policy: &BehaviorPolicy,
    h: usize,
    rng: &mut SimRng,
) -> Result<Trajectory> {
    if h < 2 {
        return Err(Error::InvalidArgument(format!("trajectory length must be >= 2, got {h}")));
    }
    let beta = model.beta(theta);
    let mut steps = Vec::with_capacity(h);
    for _ in 0..h {
        let feature = model.draw_feature(policy, rng)?;
        let reward = feature.dot(&beta) + truncated_normal(rng, model.noise_std);
        steps.push(Step { feature, reward });
    }
    Ok(Trajectory::new(steps, theta.clone()))
}

/// Index and value of the best arm under `beta`; lowest index on ties.
pub fn best_arm_value(beta: &DVector<f64>, round: &ActionRound) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in round.features.iter().enumerate() {
        let v = f.dot(beta);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty action round".into()))
}

/// Serialized model: the offline/online handoff for ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_a: usize,
    pub d_k: usize,
    pub noise_std: f64,
    pub reward_bound: f64,
    pub seed: u64,
    #[serde(with = "rows")]
    pub u_star: DMatrix<f64>,
}

impl ModelSpec {
    /// Rebuild the synthetic-style model (isotropic `theta`, unit-sphere features).
    pub fn into_model(self) -> Result<LatentLinearBandit> {
        if self.u_star.shape() != (self.d_a, self.d_k) {
            return Err(Error::InvalidArgument("u_star shape does not match d_a x d_k".into()));
        }
        LatentLinearBandit::new(
            self.u_star,
            DVector::zeros(self.d_k),
            DMatrix::identity(self.d_k, self.d_k) / self.d_k as f64,
            self.noise_std,
            self.reward_bound,
            self.seed,
            FeatureSource::UnitSphere,
        )
    }
}

/// What the experiment harness needs from a simulated world.
pub trait Environment: Send + Sync {
    fn d_a(&self) -> usize;
    fn noise_std(&self) -> f64;
    fn reward_bound(&self) -> f64;
    /// Draw a fresh reward parameter for an online trial.
    fn draw_beta(&self, rng: &mut SimRng) -> DVector<f64>;
    /// One logged trajectory under the environment's uniform behavior policy.
    fn offline_trajectory(&self, h: usize, rng: &mut SimRng) -> Result<Trajectory>;
    fn action_round(&self, k: usize, rng: &mut SimRng) -> Result<ActionRound>;
    /// Orthonormal basis of the true latent subspace, when known.
    fn true_subspace(&self) -> DMatrix<f64>;
}

impl Environment for LatentLinearBandit {
    fn d_a(&self) -> usize {
        self.d_a
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    fn draw_beta(&self, rng: &mut SimRng) -> DVector<f64> {
        let theta = sample_theta(self, rng);
        self.beta(&theta)
    }

    fn offline_trajectory(&self, h: usize, rng: &mut SimRng) -> Result<Trajectory> {
        let theta = sample_theta(self, rng);
        sample_trajectory(self, &theta, &BehaviorPolicy::Uniform, h, rng)
    }

    fn action_round(&self, k: usize, rng: &mut SimRng) -> Result<ActionRound> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one arm per round".into()));
        }
        match &self.features {
            FeatureSource::UnitSphere => {
                ActionRound::new((0..k).map(|_| unit_sphere_feature(self.d_a, rng)).collect())
            }
            FeatureSource::Finite(items) => {
                ActionRound::new((0..k).map(|_| items[rng.random_range(0..items.len())].clone()).collect())
            }
        }
    }

    fn true_subspace(&self) -> DMatrix<f64> {
        self.u_star.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_model_default_setting() {
        let m = synth_model(50, 2, 0.5, 7).unwrap();
        assert_eq!(m.theta_cov, DMatrix::identity(2, 2) * 0.5);
        assert_eq!(m.theta_mean, DVector::zeros(2));
        let g = m.u_star.transpose() * &m.u_star;
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn synth_model_full_rank_is_orthogonal() {
        let m = synth_model(3, 3, 0.0, 1).unwrap();
        let p = &m.u_star * m.u_star.transpose();
        assert!((p - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn synth_model_deterministic() {
        let a = synth_model(10, 2, 0.5, 7).unwrap();
        let b = synth_model(10, 2, 0.5, 7).unwrap();
        assert_eq!(a.u_star, b.u_star);
    }

    #[test]
    fn synth_model_rejects_bad_dims() {
        assert!(matches!(synth_model(3, 4, 0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(synth_model(3, 0, 0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(synth_model(3, 1, -0.1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn degenerate_theta_is_mean() {
        let mut m = synth_model(4, 2, 0.0, 3).unwrap();
        m.theta_cov = DMatrix::zeros(2, 2);
        m.theta_mean = DVector::from_vec(vec![0.3, -1.2]);
        let mut rng = stream_rng(9, Stream::Theta);
        for _ in 0..5 {
            assert_eq!(sample_theta(&m, &mut rng), m.theta_mean);
        }
    }

    #[test]
    fn theta_sample_mean_near_zero() {
        let m = synth_model(5, 2, 0.5, 1).unwrap();
        let mut rng = stream_rng(11, Stream::Theta);
        let n = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += sample_theta(&m, &mut rng);
        }
        acc /= n as f64;
        // std of the mean is sqrt(0.5 / 1e5) ~ 0.0022
        assert!(acc.amax() < 0.02, "{acc}");
    }

    #[test]
    fn theta_same_seed_same_draw() {
        let m = synth_model(5, 2, 0.5, 1).unwrap();
        let a = sample_theta(&m, &mut stream_rng(4, Stream::Theta));
        let b = sample_theta(&m, &mut stream_rng(4, Stream::Theta));
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_rewards_exact() {
        let m = synth_model(6, 2, 0.0, 2).unwrap();
        let theta = DVector::from_vec(vec![0.7, -0.4]);
        let beta = m.beta(&theta);
        let tr = sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 10, &mut stream_rng(1, Stream::Offline)).unwrap();
        for s in tr.steps() {
            assert_eq!(s.reward, s.feature.dot(&beta));
        }
    }

    #[test]
    fn trajectory_from_finite_universe() {
        let items: Vec<DVector<f64>> = (0..4).map(|i| DVector::from_fn(4, |j, _| (i == j) as u8 as f64)).collect();
        let mut m = synth_model(4, 2, 0.5, 2).unwrap();
        m.features = FeatureSource::Finite(items.clone());
        let theta = DVector::from_vec(vec![0.1, 0.2]);
        let tr = sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 20, &mut stream_rng(1, Stream::Offline)).unwrap();
        assert_eq!(tr.len(), 20);
        assert!(tr.steps().iter().all(|s| items.contains(&s.feature)));
        let w = BehaviorPolicy::Weighted(vec![0.0, 1.0, 0.0, 0.0]);
        let tr = sample_trajectory(&m, &theta, &w, 5, &mut stream_rng(1, Stream::Offline)).unwrap();
        assert!(tr.steps().iter().all(|s| s.feature == items[1]));
    }

    #[test]
    fn short_trajectory_rejected() {
        let m = synth_model(4, 2, 0.5, 2).unwrap();
        let theta = DVector::zeros(2);
        let r = sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 1, &mut stream_rng(1, Stream::Offline));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noise_is_mean_zero() {
        let m = synth_model(5, 2, 0.5, 3).unwrap();
        let mut rng = stream_rng(5, Stream::Offline);
        let mut sum = 0.0;
        let mut count = 0;
        while count < 100_000 {
            let theta = sample_theta(&m, &mut rng);
            let beta = m.beta(&theta);
            let tr = sample_trajectory(&m, &theta, &BehaviorPolicy::Uniform, 20, &mut rng).unwrap();
            for s in tr.steps() {
                sum += s.reward - s.feature.dot(&beta);
                count += 1;
            }
        }
        assert!((sum / count as f64).abs() < 0.01);
    }

    #[test]
    fn behavior_policy_ignores_theta() {
        let m = synth_model(8, 2, 0.3, 5).unwrap();
        let t1 = DVector::from_vec(vec![1.0, 0.0]);
        let t2 = DVector::from_vec(vec![-3.0, 2.0]);
        let a = sample_trajectory(&m, &t1, &BehaviorPolicy::Uniform, 12, &mut stream_rng(3, Stream::Offline)).unwrap();
        let b = sample_trajectory(&m, &t2, &BehaviorPolicy::Uniform, 12, &mut stream_rng(3, Stream::Offline)).unwrap();
        for (x, y) in a.steps().iter().zip(b.steps()) {
            assert_eq!(x.feature, y.feature);
        }
    }

    #[test]
    fn best_arm_cases() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        let round = ActionRound::new(vec![e1.clone(), e2]).unwrap();
        assert_eq!(best_arm_value(&e1, &round).unwrap(), (0, 1.0));
        assert_eq!(best_arm_value(&DVector::zeros(2), &round).unwrap(), (0, 0.0));
        let empty = ActionRound { features: vec![] };
        assert!(best_arm_value(&e1, &empty).is_err());
    }

    #[test]
    fn best_arm_matches_scan() {
        let mut rng = stream_rng(21, Stream::Rounds);
        for _ in 0..50 {
            let beta = DVector::from_fn(6, |_, _| standard_normal(&mut rng));
            let round = ActionRound::new((0..20).map(|_| unit_sphere_feature(6, &mut rng)).collect()).unwrap();
            let (idx, val) = best_arm_value(&beta, &round).unwrap();
            let values: Vec<f64> = round.features.iter().map(|f| f.dot(&beta)).collect();
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(val, max);
            assert_eq!(idx, values.iter().position(|v| *v == max).unwrap());
        }
    }

    #[test]
    fn cauchy_schwarz_bound() {
        let m = synth_model(20, 3, 0.5, 4).unwrap();
        let mut rng = stream_rng(8, Stream::Theta);
        for _ in 0..1000 {
            let theta = sample_theta(&m, &mut rng);
            let phi = unit_sphere_feature(20, &mut rng);
            assert!(phi.dot(&m.beta(&theta)).abs() <= theta.norm() + 1e-12);
        }
    }

    #[test]
    fn spec_roundtrip() {
        let m = synth_model(5, 2, 0.25, 9).unwrap();
        let json = serde_json::to_string(&m.to_spec()).unwrap();
        assert!(json.contains("\"u_star\":[["));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        let m2 = back.into_model().unwrap();
        assert_eq!(m.u_star, m2.u_star);
        assert_eq!(m.noise_std, m2.noise_std);
    }
}
