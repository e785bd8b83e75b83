//! Ratings ingestion, filtering, factorization and round construction for
//! the movie-recommendation scenario.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, rows};
use crate::model::{ActionRound, Environment, Step, Trajectory};
use crate::rng::{standard_normal, stream_rng, truncated_normal, SimRng, Stream};

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsTable {
    triples: Vec<Rating>,
    user_count: usize,
    item_count: usize,
    /// Lines skipped while parsing.
    pub malformed: usize,
    /// Repeated (user, item) pairs dropped while parsing; the first wins.
    pub duplicates: usize,
}

impl RatingsTable {
    pub fn new(triples: Vec<Rating>, user_count: usize, item_count: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for r in &triples {
            if r.user >= user_count || r.item >= item_count {
                return Err(Error::InvalidArgument(format!("rating ({}, {}) out of range", r.user, r.item)));
            }
            if !(MIN_RATING..=MAX_RATING).contains(&r.value) {
                return Err(Error::InvalidArgument(format!("rating value {} outside [0.5, 5]", r.value)));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::InvalidArgument(format!("duplicate rating for ({}, {})", r.user, r.item)));
            }
        }
        Ok(Self {
            triples,
            user_count,
            item_count,
            malformed: 0,
            duplicates: 0,
        })
    }

    pub fn triples(&self) -> &[Rating] {
        &self.triples
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

fn parse_line(line: &str) -> Option<(u64, u64, f64)> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return None;
    }
    let user = fields[0].trim().parse().ok()?;
    let item = fields[1].trim().parse().ok()?;
    let value: f64 = fields[2].trim().parse().ok()?;
    fields[3].trim().parse::<i64>().ok()?;
    (MIN_RATING..=MAX_RATING).contains(&value).then_some((user, item, value))
}

/// Parse `UserID::MovieID::Rating::Timestamp` text. Ids are reindexed densely
/// in increasing order of the original id.
pub fn parse_ratings(text: &str) -> Result<RatingsTable> {
    let mut raw = Vec::new();
    let mut malformed = 0usize;
    let mut lines = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(line) {
            Some(t) => raw.push(t),
            None => malformed += 1,
        }
    }
    if lines > 0 && malformed as f64 > 0.01 * lines as f64 {
        return Err(Error::Format(format!("{malformed} of {lines} lines are malformed")));
    }
    let users: BTreeMap<u64, usize> = dense_ids(raw.iter().map(|t| t.0));
    let items: BTreeMap<u64, usize> = dense_ids(raw.iter().map(|t| t.1));
    let mut seen = HashSet::with_capacity(raw.len());
    let mut triples = Vec::with_capacity(raw.len());
    let mut duplicates = 0usize;
    for (u, i, value) in raw {
        let (user, item) = (users[&u], items[&i]);
        if seen.insert((user, item)) {
            triples.push(Rating { user, item, value });
        } else {
            duplicates += 1;
        }
    }
    let mut table = RatingsTable::new(triples, users.len(), items.len())?;
    table.malformed = malformed;
    table.duplicates = duplicates;
    Ok(table)
}

fn dense_ids(ids: impl Iterator<Item = u64>) -> BTreeMap<u64, usize> {
    let mut map: BTreeMap<u64, usize> = ids.map(|id| (id, 0)).collect();
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    map
}

pub fn load_ratings(path: &Path) -> Result<RatingsTable> {
    let bytes = fs::read(path)?;
    parse_ratings(&String::from_utf8_lossy(&bytes))
}

/// Write a table back out in the `::` format with ids starting at 1.
pub fn write_ratings(table: &RatingsTable, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in &table.triples {
        writeln!(out, "{}::{}::{}::0", r.user + 1, r.item + 1, r.value)?;
    }
    out.flush()?;
    Ok(())
}

/// Drop users and items below the rating-count thresholds, repeating until
/// nothing changes, then reindex.
pub fn filter_min_counts(table: &RatingsTable, min_per_item: usize, min_per_user: usize) -> Result<RatingsTable> {
    let mut keep_user = vec![true; table.user_count];
    let mut keep_item = vec![true; table.item_count];
    loop {
        let mut user_n = vec![0usize; table.user_count];
        let mut item_n = vec![0usize; table.item_count];
        for r in &table.triples {
            if keep_user[r.user] && keep_item[r.item] {
                user_n[r.user] += 1;
                item_n[r.item] += 1;
            }
        }
        let mut changed = false;
        for (k, n) in keep_user.iter_mut().zip(&user_n) {
            if *k && *n < min_per_user {
                *k = false;
                changed = true;
            }
        }
        for (k, n) in keep_item.iter_mut().zip(&item_n) {
            if *k && *n < min_per_item {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let remap = |keep: &[bool]| {
        let mut next = 0;
        keep.iter()
            .map(|k| {
                k.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect::<Vec<Option<usize>>>()
    };
    let users = remap(&keep_user);
    let items = remap(&keep_item);
    let user_count = users.iter().flatten().count();
    let item_count = items.iter().flatten().count();
    let triples: Vec<Rating> = table
        .triples
        .iter()
        .filter_map(|r| {
            Some(Rating {
                user: users[r.user]?,
                item: items[r.item]?,
                value: r.value,
            })
        })
        .collect();
    if user_count == 0 || item_count == 0 {
        return Err(Error::EmptyAfterFilter);
    }
    let mut out = RatingsTable::new(triples, user_count, item_count)?;
    out.malformed = table.malformed;
    out.duplicates = table.duplicates;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingsSource {
    Movielens,
    Synthetic,
}

/// Ground truth for the recommendation bandit. The first six fields share
/// their layout with the synthetic model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorModel {
    pub d_a: usize,
    pub d_k: usize,
    pub noise_std: f64,
    pub reward_bound: f64,
    pub seed: u64,
    /// Orthonormal basis of the row space of `user_factors`.
    #[serde(with = "rows")]
    pub u_star: DMatrix<f64>,
    /// `n_users x d_A`; row `i` is user `i`'s reward parameter.
    #[serde(with = "rows")]
    pub user_factors: DMatrix<f64>,
    /// `d_A x n_items`; column `j` is item `j`'s feature.
    #[serde(with = "rows")]
    pub item_factors: DMatrix<f64>,
    pub rank_used: usize,
    /// Singular values of the untruncated user factors, descending.
    pub singular_values: Vec<f64>,
    /// Observed-entry RMSE after each sweep.
    pub rmse_history: Vec<f64>,
    pub reg: f64,
    pub source: RatingsSource,
}

impl FactorModel {
    pub fn n_users(&self) -> usize {
        self.user_factors.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item_factors.ncols()
    }

    pub fn user_beta(&self, i: usize) -> DVector<f64> {
        self.user_factors.row(i).transpose()
    }

    pub fn item_feature(&self, j: usize) -> DVector<f64> {
        self.item_factors.column(j).clone_owned()
    }

    /// Replace user factors by their best rank-`d_k` approximation, so that
    /// every reward parameter lies in a `d_k`-dimensional subspace.
    pub fn truncate_latent(mut self, d_k: usize) -> Result<Self> {
        if d_k == 0 || d_k > self.d_a.min(self.n_users()) {
            return Err(Error::InvalidArgument(format!("latent rank {d_k} out of range")));
        }
        let gram = self.user_factors.transpose() * &self.user_factors;
        let (_, vecs) = linalg::sym_eigen_desc(&gram);
        let q = vecs.columns(0, d_k).clone_owned();
        self.user_factors = &self.user_factors * &q * q.transpose();
        self.u_star = q;
        self.d_k = d_k;
        self.reward_bound = self.max_user_norm().max(self.noise_std);
        Ok(self)
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self.reward_bound = self.max_user_norm().max(noise_std);
        self
    }

    pub fn max_user_norm(&self) -> f64 {
        self.user_factors.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let (nu, da) = self.user_factors.shape();
        if da != self.d_a || self.item_factors.nrows() != self.d_a {
            return Err(Error::validation("d_a", "factor shapes disagree with d_a"));
        }
        if nu == 0 || self.n_items() == 0 {
            return Err(Error::validation("user_factors", "empty factor matrix"));
        }
        if self.u_star.shape() != (self.d_a, self.d_k) {
            return Err(Error::validation("u_star", "shape must be d_a x d_k"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std", "must be >= 0"));
        }
        if self.item_factors.column_iter().any(|c| c.norm() > 1.0 + 1e-9) {
            return Err(Error::validation("item_factors", "item columns must have norm <= 1"));
        }
        if self.user_factors.iter().chain(self.item_factors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("user_factors", "non-finite entry"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FactorModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

fn ridge_rows(
    fixed: &DMatrix<f64>,
    groups: &[Vec<(usize, f64)>],
    rank: usize,
    reg: f64,
) -> Result<Vec<DVector<f64>>> {
    groups
        .par_iter()
        .map(|obs| {
            let mut a = DMatrix::<f64>::identity(rank, rank) * reg;
            let mut b = DVector::<f64>::zeros(rank);
            for &(j, r) in obs {
                let f = fixed.column(j);
                a.ger(1.0, &f, &f, 1.0);
                b.axpy(r, &f, 1.0);
            }
            if obs.is_empty() {
                return Ok(b);
            }
            let chol = linalg::cholesky(&a, "ALS normal equations")?;
            Ok(chol.solve(&b))
        })
        .collect()
}

fn als_objective(table: &RatingsTable, users: &DMatrix<f64>, items: &DMatrix<f64>, reg: f64) -> (f64, f64) {
    let sse: f64 = table
        .triples
        .iter()
        .map(|r| {
            let e = r.value - users.column(r.user).dot(&items.column(r.item));
            e * e
        })
        .sum();
    let rmse = (sse / table.len().max(1) as f64).sqrt();
    (sse + reg * (users.norm_squared() + items.norm_squared()), rmse)
}

/// L2-regularized alternating least squares on the observed entries.
///
/// Minimizes `sum (r_ij - u_i^T v_j)^2 + reg (||U||_F^2 + ||V||_F^2)`. Each
/// half-sweep is an exact block minimization, so the objective is checked
/// to be nonincreasing. At the end item columns are scaled so the largest
/// has norm 1 and user rows absorb the inverse scale.
pub fn als_factorize(table: &RatingsTable, rank: usize, reg: f64, sweeps: usize, seed: u64) -> Result<FactorModel> {
    if rank == 0 || rank > table.user_count.min(table.item_count) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} must be in 1..={}",
            table.user_count.min(table.item_count)
        )));
    }
    if sweeps == 0 {
        return Err(Error::InvalidArgument("sweeps must be >= 1".into()));
    }
    if !(reg >= 0.0) {
        return Err(Error::InvalidArgument("reg must be >= 0".into()));
    }
    if table.is_empty() {
        return Err(Error::InvalidArgument("no ratings to factorize".into()));
    }
    let mut by_user = vec![Vec::new(); table.user_count];
    let mut by_item = vec![Vec::new(); table.item_count];
    for r in &table.triples {
        by_user[r.user].push((r.item, r.value));
        by_item[r.item].push((r.user, r.value));
    }
    let mut rng = stream_rng(seed, Stream::Ratings);
    let scale = 1.0 / (rank as f64).sqrt();
    let mut items = DMatrix::from_fn(rank, table.item_count, |_, _| scale * standard_normal(&mut rng));
    let mut users = DMatrix::zeros(rank, table.user_count);
    let mut last = f64::INFINITY;
    let mut rmse_history = Vec::with_capacity(sweeps);
    for sweep in 0..sweeps {
        for (i, col) in ridge_rows(&items, &by_user, rank, reg)?.into_iter().enumerate() {
            users.set_column(i, &col);
        }
        for (j, col) in ridge_rows(&users, &by_item, rank, reg)?.into_iter().enumerate() {
            items.set_column(j, &col);
        }
        if users.iter().chain(items.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite factor after sweep {}", sweep + 1)));
        }
        let (obj, rmse) = als_objective(table, &users, &items, reg);
        if obj > last + 1e-9 * last.abs().max(1.0) {
            return Err(Error::Numerical(format!(
                "ALS objective increased from {last} to {obj} at sweep {}",
                sweep + 1
            )));
        }
        last = obj;
        rmse_history.push(rmse);
    }
    let max_norm = items.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if max_norm > 0.0 {
        items /= max_norm;
        users *= max_norm;
    }
    let user_factors = users.transpose();
    let gram = &users * &user_factors;
    let (eigs, vecs) = linalg::sym_eigen_desc(&gram);
    let singular_values = eigs.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut model = FactorModel {
        d_a: rank,
        d_k: rank,
        noise_std: 0.0,
        reward_bound: 0.0,
        seed,
        u_star: vecs,
        user_factors,
        item_factors: items,
        rank_used: rank,
        singular_values,
        rmse_history,
        reg,
        source: RatingsSource::Movielens,
    };
    model.reward_bound = model.max_user_norm();
    Ok(model)
}

/// `t_rounds` rounds of `k` distinct items drawn uniformly without replacement.
pub fn build_rounds(factors: &FactorModel, k: usize, t_rounds: usize, seed: u64) -> Result<Vec<ActionRound>> {
    let mut rng = stream_rng(seed, Stream::Rounds);
    (0..t_rounds).map(|_| factors.action_round(k, &mut rng)).collect()
}

/// Shape of a low-rank synthetic ratings corpus used when the real dataset is
/// absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRatingsConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub true_rank: usize,
    /// Expected fraction of observed (user, item) pairs.
    pub density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticRatingsConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 800,
            true_rank: 5,
            density: 0.1,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

/// Low-rank ratings with skewed user activity and item popularity, clipped to
/// `[0.5, 5]` and rounded to half stars.
pub fn synthetic_ratings(cfg: &SyntheticRatingsConfig) -> Result<RatingsTable> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.true_rank == 0 {
        return Err(Error::InvalidArgument("synthetic ratings dimensions must be positive".into()));
    }
    if !(cfg.density > 0.0 && cfg.density <= 1.0) {
        return Err(Error::InvalidArgument("density must be in (0, 1]".into()));
    }
    let mut rng = stream_rng(cfg.seed, Stream::Ratings);
    let k = cfg.true_rank;
    let spread = 1.0 / (k as f64).sqrt();
    let users = DMatrix::from_fn(k, cfg.n_users, |_, _| spread * standard_normal(&mut rng));
    let items = DMatrix::from_fn(k, cfg.n_items, |_, _| spread * standard_normal(&mut rng));
    let activity: Vec<f64> = (0..cfg.n_users).map(|_| (0.75 * standard_normal(&mut rng)).exp()).collect();
    let popularity: Vec<f64> = (0..cfg.n_items).map(|_| (0.75 * standard_normal(&mut rng)).exp()).collect();
    let mean_a = activity.iter().sum::<f64>() / cfg.n_users as f64;
    let mean_p = popularity.iter().sum::<f64>() / cfg.n_items as f64;
    let mut triples = Vec::new();
    for i in 0..cfg.n_users {
        for j in 0..cfg.n_items {
            let p = (cfg.density * activity[i] / mean_a * popularity[j] / mean_p).min(1.0);
            if rng.random::<f64>() < p {
                let raw = 3.5 + users.column(i).dot(&items.column(j)) + cfg.noise_std * standard_normal(&mut rng);
                let value = ((raw * 2.0).round() / 2.0).clamp(MIN_RATING, MAX_RATING);
                triples.push(Rating { user: i, item: j, value });
            }
        }
    }
    RatingsTable::new(triples, cfg.n_users, cfg.n_items)
}

impl Environment for FactorModel {
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
        self.user_beta(rng.random_range(0..self.n_users()))
    }

    fn offline_trajectory(&self, h: usize, rng: &mut SimRng) -> Result<Trajectory> {
        if h < 2 {
            return Err(Error::InvalidArgument(format!("trajectory length must be >= 2, got {h}")));
        }
        let user = rng.random_range(0..self.n_users());
        let beta = self.user_beta(user);
        let steps = (0..h)
            .map(|_| {
                let feature = self.item_feature(rng.random_range(0..self.n_items()));
                let reward = feature.dot(&beta) + truncated_normal(rng, self.noise_std);
                Step { feature, reward }
            })
            .collect();
        let theta = self.u_star.transpose() * beta;
        Ok(Trajectory::new(steps, theta))
    }

    fn action_round(&self, k: usize, rng: &mut SimRng) -> Result<ActionRound> {
        if k == 0 || k > self.n_items() {
            return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={}", self.n_items())));
        }
        let picks = index::sample(rng, self.n_items(), k);
        ActionRound::new(picks.into_iter().map(|j| self.item_feature(j)).collect())
    }

    fn true_subspace(&self) -> DMatrix<f64> {
        self.u_star.clone()
    }
}
