//! Experiment orchestration: config parsing, the offline and online phases,
//! multi-trial aggregation and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, FactorModel, RatingsSource, SyntheticRatingsConfig};
use crate::error::{Error, Result};
use crate::model::{best_arm_value, synth_model, Environment, LatentLinearBandit, Trajectory};
use crate::offline::{sold, BoundKind, SoldConfig, SubspaceEstimate, Variant};
use crate::online::{Alpha1Form, BonusSchedule, Branch, Learner, PolicyId, ScheduleStyle};
use crate::rng::{stream_rng, truncated_normal, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Synthetic,
    Ratings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d_a: usize,
    pub d_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Seed of the ground-truth model, separate from the trial seeds.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            noise_std: default_noise(),
            seed: 0,
        }
    }
}

fn default_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundChoice {
    Hoeffding,
    EmpiricalBernstein,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub n: usize,
    /// Trajectory length; 20 for synthetic and 50 for ratings when omitted.
    #[serde(default)]
    pub h: Option<usize>,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_bound")]
    pub bound_kind: BoundChoice,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Drop `Delta_D` from `Delta_off`; on for ratings and off for synthetic when omitted.
    #[serde(default)]
    pub simplified_delta_off: Option<bool>,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

fn default_bound() -> BoundChoice {
    BoundChoice::EmpiricalBernstein
}

fn default_variant() -> Variant {
    Variant::Pseudoinverse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyList {
    One(PolicyId),
    Many(Vec<PolicyId>),
}

impl PolicyList {
    pub fn to_vec(&self) -> Vec<PolicyId> {
        match self {
            PolicyList::One(p) => vec![*p],
            PolicyList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    /// Horizon `T`; 1000 for synthetic and 200 for ratings when omitted.
    #[serde(default)]
    pub horizon: Option<usize>,
    pub policy: PolicyList,
    #[serde(default = "default_style")]
    pub schedule: ScheduleStyle,
    /// 5 for synthetic and 0.1 for ratings when omitted.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub tau_prime: f64,
    #[serde(default = "default_budget")]
    pub solver_budget: usize,
    /// Arms per round.
    #[serde(default = "default_arms")]
    pub arms: usize,
    #[serde(default = "one")]
    pub c_mult: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_alpha1_form")]
    pub alpha1_form: Alpha1Form,
    /// Hand ProBALL the true subspace with `Delta_off = 0` instead of SOLD's estimate.
    #[serde(default)]
    pub oracle_subspace: bool,
}

fn default_style() -> ScheduleStyle {
    ScheduleStyle::Practical
}

fn default_budget() -> usize {
    16
}

fn default_arms() -> usize {
    20
}

fn default_alpha1_form() -> Alpha1Form {
    Alpha1Form::Theorem
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingsConfig {
    #[serde(default = "default_min_count")]
    pub min_per_item: usize,
    #[serde(default = "default_min_count")]
    pub min_per_user: usize,
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    /// Used when no ratings file is configured.
    #[serde(default)]
    pub synthetic: SyntheticRatingsConfig,
}

impl Default for RatingsConfig {
    fn default() -> Self {
        Self {
            min_per_item: default_min_count(),
            min_per_user: default_min_count(),
            reg: default_reg(),
            sweeps: default_sweeps(),
            synthetic: SyntheticRatingsConfig::default(),
        }
    }
}

fn default_min_count() -> usize {
    200
}

fn default_reg() -> f64 {
    0.1
}

fn default_sweeps() -> usize {
    15
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub subspace_in: Option<PathBuf>,
    #[serde(default)]
    pub subspace_out: Option<PathBuf>,
    /// `ratings.dat`; the synthetic fallback is used when absent.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    /// Pre-built factor model from `ingest`.
    #[serde(default)]
    pub factors: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub dims: Dims,
    #[serde(default)]
    pub model: ModelConfig,
    pub offline: OfflineConfig,
    pub online: OnlineConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub ratings: RatingsConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_trials() -> usize {
    30
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::validation("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::validation(field, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("dims.d_a", self.dims.d_a)?;
        positive("dims.d_k", self.dims.d_k)?;
        if self.dims.d_k > self.dims.d_a {
            return Err(Error::validation("dims.d_k", "must not exceed dims.d_a"));
        }
        positive("offline.n", self.offline.n)?;
        if self.h() < 2 {
            return Err(Error::validation("offline.h", "must be >= 2"));
        }
        if !(self.offline.mu > 0.0) {
            return Err(Error::validation("offline.mu", "must be > 0"));
        }
        if !(self.offline.delta > 0.0 && self.offline.delta < 1.0) {
            return Err(Error::validation("offline.delta", "must be in (0, 1)"));
        }
        if !(self.model.noise_std >= 0.0) {
            return Err(Error::validation("model.noise_std", "must be >= 0"));
        }
        positive("online.horizon", self.horizon())?;
        positive("online.arms", self.online.arms)?;
        positive("online.solver_budget", self.online.solver_budget)?;
        positive("trials", self.trials)?;
        if !(self.tau() >= 0.0) {
            return Err(Error::validation("online.tau", "must be >= 0"));
        }
        if !(self.online.tau_prime >= 0.0) {
            return Err(Error::validation("online.tau_prime", "must be >= 0"));
        }
        if !(self.online.c_mult > 0.0) {
            return Err(Error::validation("online.c_mult", "must be > 0"));
        }
        if !(self.online.delta > 0.0 && self.online.delta < 1.0) {
            return Err(Error::validation("online.delta", "must be in (0, 1)"));
        }
        if self.policies().is_empty() {
            return Err(Error::validation("online.policy", "at least one policy is required"));
        }
        if self.ratings.sweeps == 0 {
            return Err(Error::validation("ratings.sweeps", "must be >= 1"));
        }
        if !(self.ratings.reg >= 0.0) {
            return Err(Error::validation("ratings.reg", "must be >= 0"));
        }
        if self.online.oracle_subspace && self.paths.subspace_in.is_some() {
            return Err(Error::validation(
                "online.oracle_subspace",
                "conflicts with paths.subspace_in",
            ));
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.offline.h.unwrap_or(match self.scenario {
            Scenario::Synthetic => 20,
            Scenario::Ratings => 50,
        })
    }

    pub fn horizon(&self) -> usize {
        self.online.horizon.unwrap_or(match self.scenario {
            Scenario::Synthetic => 1000,
            Scenario::Ratings => 200,
        })
    }

    pub fn tau(&self) -> f64 {
        self.online.tau.unwrap_or(match self.scenario {
            Scenario::Synthetic => 5.0,
            Scenario::Ratings => 0.1,
        })
    }

    pub fn simplified_delta_off(&self) -> bool {
        self.offline
            .simplified_delta_off
            .unwrap_or(self.scenario == Scenario::Ratings)
    }

    pub fn policies(&self) -> Vec<PolicyId> {
        self.online.policy.to_vec()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn schedule(&self, r: f64) -> BonusSchedule {
        BonusSchedule {
            r,
            mu: 1.0,
            c_mult: self.online.c_mult,
            delta: self.online.delta,
            tau: self.tau(),
            tau_prime: self.online.tau_prime,
            horizon: self.horizon().max(1),
            style: self.online.schedule,
            alpha1_form: self.online.alpha1_form,
        }
    }

    pub fn sold_config(&self, reward_bound: f64) -> SoldConfig {
        SoldConfig {
            d_k: self.dims.d_k,
            mu: self.offline.mu,
            delta: self.offline.delta,
            bound_kind: match self.offline.bound_kind {
                BoundChoice::Hoeffding => BoundKind::Hoeffding,
                BoundChoice::EmpiricalBernstein => BoundKind::EmpiricalBernstein,
            },
            variant: self.offline.variant,
            reward_bound,
            simplified_delta_off: self.simplified_delta_off(),
        }
    }
}

/// The simulated environment behind an experiment.
#[derive(Debug, Clone)]
pub enum World {
    Synthetic(LatentLinearBandit),
    Ratings(FactorModel),
}

impl World {
    pub fn env(&self) -> &dyn Environment {
        match self {
            World::Synthetic(m) => m,
            World::Ratings(f) => f,
        }
    }

    pub fn source(&self) -> &'static str {
        match self {
            World::Synthetic(_) => "synthetic-model",
            World::Ratings(f) => match f.source {
                RatingsSource::Movielens => "movielens",
                RatingsSource::Synthetic => "synthetic-ratings",
            },
        }
    }
}

/// Load or build the factor model for the ratings scenario.
pub fn build_factor_model(cfg: &ExperimentConfig) -> Result<FactorModel> {
    if let Some(path) = &cfg.paths.factors {
        let f = FactorModel::from_json(&fs::read_to_string(path)?)?;
        if f.d_a != cfg.dims.d_a || f.d_k != cfg.dims.d_k {
            return Err(Error::validation("paths.factors", "factor model dims differ from config dims"));
        }
        return Ok(f.with_noise(cfg.model.noise_std));
    }
    ingest(
        cfg.paths.ratings.as_deref(),
        &cfg.ratings,
        cfg.dims.d_a,
        Some(cfg.dims.d_k),
        cfg.model.noise_std,
        cfg.model.seed,
    )
}

/// Ratings file (or synthetic fallback) to a filtered, factorized and
/// rank-truncated ground truth. With `d_k = None` the latent rank is placed
/// at the largest drop in the singular-value profile.
pub fn ingest(
    ratings: Option<&Path>,
    rc: &RatingsConfig,
    d_a: usize,
    d_k: Option<usize>,
    noise_std: f64,
    seed: u64,
) -> Result<FactorModel> {
    let (raw, source) = match ratings {
        Some(p) => (data::load_ratings(p)?, RatingsSource::Movielens),
        None => (data::synthetic_ratings(&rc.synthetic)?, RatingsSource::Synthetic),
    };
    let table = data::filter_min_counts(&raw, rc.min_per_item, rc.min_per_user)?;
    log::info!(
        "ratings: {} triples, {} users x {} items after filtering",
        table.len(),
        table.user_count(),
        table.item_count()
    );
    let mut f = data::als_factorize(&table, d_a, rc.reg, rc.sweeps, seed)?;
    f.source = source;
    let d_k = match d_k {
        Some(k) => k,
        None => {
            // The leading direction carries the global rating level and
            // always dominates, so the search starts past it.
            crate::offline::largest_gap_rank(&f.singular_values, 2)
        }
    };
    Ok(f.with_noise(noise_std).truncate_latent(d_k)?)
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    match cfg.scenario {
        Scenario::Synthetic => Ok(World::Synthetic(synth_model(
            cfg.dims.d_a,
            cfg.dims.d_k,
            cfg.model.noise_std,
            cfg.model.seed,
        )?)),
        Scenario::Ratings => Ok(World::Ratings(build_factor_model(cfg)?)),
    }
}

/// `n` offline trajectories from one seeded stream.
pub fn generate_offline(env: &dyn Environment, n: usize, h: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut rng = stream_rng(seed, Stream::Offline);
    (0..n).map(|_| env.offline_trajectory(h, &mut rng)).collect()
}

/// Generate the offline dataset, run SOLD and persist the estimate when an
/// output path is configured.
pub fn run_offline_phase(cfg: &ExperimentConfig, world: &World) -> Result<SubspaceEstimate> {
    cfg.validate()?;
    let env = world.env();
    if env.d_a() != cfg.dims.d_a {
        return Err(Error::validation("dims.d_a", "does not match the environment"));
    }
    let data = generate_offline(env, cfg.offline.n, cfg.h(), cfg.base_seed)?;
    let est = sold(&data, &cfg.sold_config(env.reward_bound()))?;
    if let Some(path) = &cfg.paths.subspace_out {
        write_estimate(&est, path)?;
    }
    Ok(est)
}

pub fn write_estimate(est: &SubspaceEstimate, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(est)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_estimate(path: &Path) -> Result<SubspaceEstimate> {
    let est: SubspaceEstimate = serde_json::from_str(&fs::read_to_string(path)?)?;
    est.validate()?;
    Ok(est)
}

/// The estimate an online run should use: the configured input file, the
/// true subspace, or a fresh offline phase.
pub fn resolve_estimate(cfg: &ExperimentConfig, world: &World) -> Result<SubspaceEstimate> {
    if cfg.online.oracle_subspace {
        return SubspaceEstimate::from_basis(world.env().true_subspace(), 0.0);
    }
    if let Some(path) = &cfg.paths.subspace_in {
        return read_estimate(path);
    }
    run_offline_phase(cfg, world)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub t: usize,
    pub arm: usize,
    pub branch: Branch,
    pub inst_regret: f64,
    pub cum_regret: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub config_hash: String,
    pub policy: PolicyId,
    #[serde(with = "crate::linalg::maybe_inf")]
    pub delta_off: f64,
    /// First step played on the full-rank branch by a subspace policy.
    pub switch_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLog {
    pub rows: Vec<RegretRow>,
    pub trial_seed: u64,
    pub metadata: LogMetadata,
}

impl RegretLog {
    pub fn final_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }
}

/// One online trial: a fresh reward parameter, then `T` rounds of
/// select, reveal, update and regret bookkeeping against the best arm.
pub fn run_online_trial(
    cfg: &ExperimentConfig,
    world: &World,
    estimate: Option<&SubspaceEstimate>,
    policy: PolicyId,
    trial_index: usize,
) -> Result<RegretLog> {
    let env = world.env();
    let d_a = env.d_a();
    if let Some(e) = estimate {
        if e.d_a != d_a {
            return Err(Error::validation("dims.d_a", "subspace estimate does not match the environment"));
        }
    }
    let seed = cfg.base_seed.wrapping_add(trial_index as u64);
    let mut theta_rng = stream_rng(seed, Stream::Theta);
    let mut round_rng = stream_rng(seed, Stream::Rounds);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let beta = env.draw_beta(&mut theta_rng);
    let subspace = if policy.uses_subspace() { estimate.cloned() } else { None };
    let mut learner = match policy {
        PolicyId::Oracle => None,
        _ => Some(Learner::new(
            policy,
            d_a,
            subspace,
            cfg.schedule(env.reward_bound()),
            cfg.online.solver_budget,
            stream_rng(seed, Stream::Policy),
        )?),
    };
    let horizon = cfg.horizon();
    let mut rows = Vec::with_capacity(horizon);
    let mut cum = 0.0;
    let mut switch_step = None;
    for t in 1..=horizon {
        let round = env.action_round(cfg.online.arms, &mut round_rng)?;
        let (best, best_value) = best_arm_value(&beta, &round)?;
        let (arm, branch) = match learner.as_mut() {
            Some(l) => {
                let c = l.select(&round)?;
                (c.index, c.branch)
            }
            None => (best, Branch::Fullrank),
        };
        let phi = &round.features[arm];
        let mean = phi.dot(&beta);
        let reward = mean + truncated_normal(&mut noise_rng, env.noise_std());
        let inst = best_value - mean;
        cum += inst;
        let mut kappa = 0.0;
        if let Some(l) = learner.as_mut() {
            l.observe(phi, reward)?;
            kappa = l.state.kappa;
        }
        if switch_step.is_none() && branch == Branch::Fullrank && matches!(policy, PolicyId::ProballUcb | PolicyId::ProballTs) {
            switch_step = Some(t);
        }
        rows.push(RegretRow {
            t,
            arm,
            branch,
            inst_regret: inst,
            cum_regret: cum,
            kappa,
        });
    }
    Ok(RegretLog {
        rows,
        trial_seed: seed,
        metadata: LogMetadata {
            config_hash: cfg.hash(),
            policy,
            delta_off: estimate.map_or(f64::INFINITY, |e| e.delta_off),
            switch_step,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyId,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub final_regrets: Vec<f64>,
}

impl PolicySummary {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_se(&self) -> f64 {
        self.se.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub policies: Vec<PolicySummary>,
    pub config_hash: String,
    #[serde(with = "crate::linalg::maybe_inf")]
    pub delta_off: f64,
    pub source: String,
}

impl SuiteSummary {
    pub fn get(&self, policy: PolicyId) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == policy)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub summary: SuiteSummary,
    pub estimate: SubspaceEstimate,
    /// Per policy, the trial logs in trial order.
    pub logs: Vec<Vec<RegretLog>>,
}

/// Per-step mean and standard error of cumulative regret across logs.
pub fn summarize(policy: PolicyId, logs: &[RegretLog]) -> PolicySummary {
    let n = logs.len();
    let steps = logs.first().map_or(0, |l| l.rows.len());
    let mut mean = vec![0.0; steps];
    let mut se = vec![0.0; steps];
    for t in 0..steps {
        let m = logs.iter().map(|l| l.rows[t].cum_regret).sum::<f64>() / n as f64;
        mean[t] = m;
        if n > 1 {
            let var = logs.iter().map(|l| (l.rows[t].cum_regret - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            se[t] = (var / n as f64).sqrt();
        }
    }
    PolicySummary {
        policy,
        mean,
        se,
        final_regrets: logs.iter().map(RegretLog::final_regret).collect(),
    }
}

/// Run every configured policy over all trials. Trials run in parallel and
/// are reduced in trial order.
pub fn run_suite_in(cfg: &ExperimentConfig, world: &World, estimate: SubspaceEstimate) -> Result<SuiteOutcome> {
    let mut summaries = Vec::new();
    let mut all_logs = Vec::new();
    for policy in cfg.policies() {
        let logs = (0..cfg.trials)
            .into_par_iter()
            .map(|i| run_online_trial(cfg, world, Some(&estimate), policy, i))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(summarize(policy, &logs));
        all_logs.push(logs);
    }
    Ok(SuiteOutcome {
        summary: SuiteSummary {
            policies: summaries,
            config_hash: cfg.hash(),
            delta_off: estimate.delta_off,
            source: world.source().to_string(),
        },
        estimate,
        logs: all_logs,
    })
}

pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let estimate = resolve_estimate(cfg, &world)?;
    run_suite_in(cfg, &world, estimate)
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v == 0.0 { "0".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub trait CsvTable {
    fn header(&self) -> String;
    fn lines(&self) -> Vec<String>;
}

impl CsvTable for RegretLog {
    fn header(&self) -> String {
        "t,arm,branch,inst_regret,cum_regret,kappa".into()
    }

    fn lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{}",
                    r.t,
                    r.arm,
                    r.branch.as_str(),
                    fmt_sig9(r.inst_regret),
                    fmt_sig9(r.cum_regret),
                    fmt_sig9(r.kappa)
                )
            })
            .collect()
    }
}

impl CsvTable for SuiteSummary {
    fn header(&self) -> String {
        if self.policies.len() > 1 {
            "t,mean_regret,se_regret,policy".into()
        } else {
            "t,mean_regret,se_regret".into()
        }
    }

    fn lines(&self) -> Vec<String> {
        let multi = self.policies.len() > 1;
        let mut out = Vec::new();
        for p in &self.policies {
            for (i, (m, s)) in p.mean.iter().zip(&p.se).enumerate() {
                let mut line = format!("{},{},{}", i + 1, fmt_sig9(*m), fmt_sig9(*s));
                if multi {
                    line.push(',');
                    line.push_str(p.policy.as_str());
                }
                out.push(line);
            }
        }
        out
    }
}

pub fn csv_string(table: &impl CsvTable) -> String {
    let mut s = table.header();
    s.push('\n');
    for line in table.lines() {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn emit_csv(table: &impl CsvTable, path: &Path) -> Result<()> {
    fs::write(path, csv_string(table))?;
    Ok(())
}

/// Write the summary CSV, one CSV per trial log, the estimate and a JSON
/// metadata file into `dir`.
pub fn write_suite_outputs(outcome: &SuiteOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    emit_csv(&outcome.summary, &dir.join("summary.csv"))?;
    for logs in &outcome.logs {
        for (i, log) in logs.iter().enumerate() {
            emit_csv(log, &dir.join(format!("{}_trial{:03}.csv", log.metadata.policy.as_str(), i)))?;
        }
    }
    write_estimate(&outcome.estimate, &dir.join("subspace.json"))?;
    let mut meta = serde_json::to_string_pretty(&outcome.summary)?;
    meta.push('\n');
    fs::write(dir.join("summary.json"), meta)?;
    Ok(())
}

/// Largest principal-angle gap between two bases, as a projector distance.
pub fn subspace_error(estimate: &SubspaceEstimate, truth: &DMatrix<f64>) -> f64 {
    crate::linalg::projector_distance(&estimate.u_hat, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(json).unwrap()
    }

    fn small() -> ExperimentConfig {
        config(
            r#"{"scenario":"synthetic","dims":{"d_a":6,"d_k":2},
                "offline":{"n":200},
                "online":{"horizon":50,"policy":["linucb","proball-ucb","oracle"],"arms":5},
                "trials":3,"base_seed":11}"#,
        )
    }

    #[test]
    fn unknown_field_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{"scenario":"synthetic","dims":{"d_a":6,"d_k":2},"offline":{"n":10,"tua":1},
                "online":{"policy":"linucb"}}"#,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn zero_n_rejected_with_path() {
        let err = ExperimentConfig::from_json(
            r#"{"scenario":"synthetic","dims":{"d_a":6,"d_k":2},"offline":{"n":0},"online":{"policy":"linucb"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "offline.n"));
    }

    #[test]
    fn scenario_defaults() {
        let c = config(r#"{"scenario":"ratings","dims":{"d_a":6,"d_k":2},"offline":{"n":1},"online":{"policy":"linucb"}}"#);
        assert_eq!((c.h(), c.horizon(), c.tau(), c.simplified_delta_off()), (50, 200, 0.1, true));
        let c = config(r#"{"scenario":"synthetic","dims":{"d_a":6,"d_k":2},"offline":{"n":1},"online":{"policy":"linucb"}}"#);
        assert_eq!((c.h(), c.horizon(), c.tau(), c.simplified_delta_off()), (20, 1000, 5.0, false));
    }

    #[test]
    fn trial_invariants() {
        let cfg = small();
        let out = run_suite(&cfg).unwrap();
        for logs in &out.logs {
            for log in logs {
                let mut cum = 0.0;
                for row in &log.rows {
                    assert!(row.inst_regret >= -1e-12);
                    cum += row.inst_regret;
                    assert!((cum - row.cum_regret).abs() < 1e-9);
                }
            }
        }
        let oracle = out.summary.get(PolicyId::Oracle).unwrap();
        assert!(oracle.mean.iter().all(|m| *m == 0.0));
        for p in &out.summary.policies {
            let mean_final = p.final_regrets.iter().sum::<f64>() / p.final_regrets.len() as f64;
            assert!((mean_final - p.final_mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_horizon_empty_log() {
        let mut cfg = small();
        cfg.online.horizon = Some(0);
        let world = build_world(&cfg).unwrap();
        let log = run_online_trial(&cfg, &world, None, PolicyId::LinUcb, 0).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(csv_string(&log), "t,arm,branch,inst_regret,cum_regret,kappa\n");
    }

    #[test]
    fn single_trial_zero_se() {
        let mut cfg = small();
        cfg.trials = 1;
        let out = run_suite(&cfg).unwrap();
        assert!(out.summary.policies.iter().all(|p| p.se.iter().all(|s| *s == 0.0)));
    }

    #[test]
    fn sig9_format() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(1234.5678912345), "1234.56789");
        assert_eq!(fmt_sig9(-0.000123456789123), "-0.000123456789");
        assert_eq!(fmt_sig9(1.5e-7), "1.5e-07");
        assert_eq!(fmt_sig9(123456789012.0), "1.23456789e+11");
        for v in [0.1, 2.0 / 3.0, 98765.4321, 1e-300, 7.0e20] {
            let back: f64 = fmt_sig9(v).parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-9);
        }
    }
}
