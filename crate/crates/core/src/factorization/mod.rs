//! Latent factor estimation.
//!
//! The objective is the squared rating error plus a BPR ranking term and L2
//! penalties:
//!
//! ```text
//! L(U, V, O) - lambda_b * sum_i B(u_i, V, D_i) + lambda_u ||U||^2 + lambda_v ||V||^2
//! ```
//!
//! The norms are squared Frobenius norms so the penalty is differentiable.
//! All fits, from plain matrix factorization to a tree node's three child
//! residuals, go through the same grouped SGD solver in [`solver`].

mod loss;
pub mod solver;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{
    bpr_loss, log_sigmoid, objective, objective_gradient, pointwise_loss, sigmoid, Gradient,
};
pub use solver::{FitOutcome, GroupProblem, Member, Slot};

use crate::error::Result;
use crate::ingest::{Observation, Side};
use crate::seed;

/// Dense row-major matrix, one `dim`-vector per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        FactorMatrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * dim, "factor data has wrong length");
        FactorMatrix { rows, dim, data }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        FactorMatrix {
            rows: rows.len(),
            dim,
            data,
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform(rows: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * dim)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        FactorMatrix { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn set_row(&mut self, i: usize, v: &[f64]) {
        self.row_mut(i).copy_from_slice(v);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    rows: usize,
    dim: usize,
    #[serde(with = "crate::persist::b64")]
    data: Vec<f64>,
}

impl Serialize for FactorMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StoredMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FactorMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = StoredMatrix::deserialize(d)?;
        if m.data.len() != m.rows * m.dim {
            return Err(serde::de::Error::custom(format!(
                "matrix {}x{} carries {} values",
                m.rows,
                m.dim,
                m.data.len()
            )));
        }
        Ok(FactorMatrix {
            rows: m.rows,
            dim: m.dim,
            data: m.data,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Latent dimension.
    pub d: usize,
    pub lambda_b: f64,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub lr: f64,
    /// SGD passes per fit.
    pub epochs: usize,
    /// BPR pairs sampled per pass; 0 means every pair each pass.
    pub n_bpr: usize,
    /// Sampled unobserved items per observed item when building pair sets.
    pub negatives_per_positive: usize,
    /// Cap on materialised BPR pairs per user, drawn uniformly without
    /// replacement when exceeded; 0 keeps all.
    pub max_pairs_per_user: usize,
    pub seed: u64,
    /// Relative objective change below which a fit stops early.
    pub tol: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d: 20,
            lambda_b: 0.1,
            lambda_u: 0.05,
            lambda_v: 0.05,
            lr: 0.01,
            epochs: 30,
            n_bpr: 2000,
            negatives_per_positive: 1,
            max_pairs_per_user: 30,
            seed: 42,
            tol: 1e-6,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, v) in [
            ("lambda_b", self.lambda_b),
            ("lambda_u", self.lambda_u),
            ("lambda_v", self.lambda_v),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        Ok(())
    }

    /// Regularisation weight for factors on `side`.
    pub fn lambda(&self, side: Side) -> f64 {
        match side {
            Side::User => self.lambda_u,
            Side::Item => self.lambda_v,
        }
    }
}

/// Relative normalised BPR weight `lambda_b * N_bpr * T_iter / (m * n^2)`,
/// with `T_iter` taken as the number of SGD passes per fit.
pub fn relative_bpr_weight(hp: &Hyperparams, m: usize, n: usize) -> f64 {
    hp.lambda_b * hp.n_bpr as f64 * hp.epochs as f64 / (m as f64 * (n as f64).powi(2))
}

/// The `lambda_b` that yields relative weight `phi`.
pub fn lambda_b_for_weight(phi: f64, hp: &Hyperparams, m: usize, n: usize) -> f64 {
    let denom = hp.n_bpr as f64 * hp.epochs as f64;
    if denom == 0.0 {
        return 0.0;
    }
    phi * m as f64 * (n as f64).powi(2) / denom
}

/// Observed ratings, sorted by `(user, item)`, with per-entity indices.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    entries: Vec<Observation>,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
}

impl ObservationSet {
    pub fn new(mut entries: Vec<Observation>, n_users: usize, n_items: usize) -> Self {
        entries.sort_by_key(|o| (o.user, o.item));
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        for (k, o) in entries.iter().enumerate() {
            by_user[o.user].push(k);
            by_item[o.item].push(k);
        }
        ObservationSet {
            entries,
            by_user,
            by_item,
        }
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn n_entities(&self, side: Side) -> usize {
        match side {
            Side::User => self.n_users(),
            Side::Item => self.n_items(),
        }
    }

    pub fn of_user(&self, user: usize) -> impl Iterator<Item = &Observation> + '_ {
        self.by_user[user].iter().map(move |&k| &self.entries[k])
    }

    pub fn of_item(&self, item: usize) -> impl Iterator<Item = &Observation> + '_ {
        self.by_item[item].iter().map(move |&k| &self.entries[k])
    }

    pub fn count(&self, side: Side, entity: usize) -> usize {
        match side {
            Side::User => self.by_user[entity].len(),
            Side::Item => self.by_item[entity].len(),
        }
    }
}

/// Per-user ordered item pairs `(j, l)`: `j` should rank above `l`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BprPairSet {
    per_user: Vec<Vec<(usize, usize)>>,
}

impl BprPairSet {
    pub fn empty(n_users: usize) -> Self {
        BprPairSet {
            per_user: vec![Vec::new(); n_users],
        }
    }

    pub fn from_per_user(per_user: Vec<Vec<(usize, usize)>>) -> Self {
        BprPairSet { per_user }
    }

    pub fn of_user(&self, user: usize) -> &[(usize, usize)] {
        self.per_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn len(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pair set for one user: every strictly rating-ordered pair of observed
/// items, then for each observed item `negatives_per_positive` distinct
/// unobserved items sampled without replacement. With `max_per_user > 0`
/// a uniform subset of that size is kept, in the original order.
pub fn build_bpr_pairs(
    obs: &ObservationSet,
    user: usize,
    negatives_per_positive: usize,
    max_per_user: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let rated: Vec<&Observation> = obs.of_user(user).collect();
    let mut pairs = Vec::new();
    for a in &rated {
        for b in &rated {
            if a.rating > b.rating {
                pairs.push((a.item, b.item));
            }
        }
    }
    if negatives_per_positive > 0 {
        let mut seen = vec![false; obs.n_items()];
        for o in &rated {
            seen[o.item] = true;
        }
        let unobserved: Vec<usize> = (0..obs.n_items()).filter(|&j| !seen[j]).collect();
        if !unobserved.is_empty() {
            let take = negatives_per_positive.min(unobserved.len());
            for o in &rated {
                for k in index::sample(rng, unobserved.len(), take) {
                    pairs.push((o.item, unobserved[k]));
                }
            }
        }
    }
    if max_per_user > 0 && pairs.len() > max_per_user {
        let mut keep = index::sample(rng, pairs.len(), max_per_user).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

/// Pair sets for every user, each drawn from its own seeded stream.
pub fn build_all_pairs(
    obs: &ObservationSet,
    negatives_per_positive: usize,
    max_per_user: usize,
    base_seed: u64,
) -> BprPairSet {
    let per_user = (0..obs.n_users())
        .into_par_iter()
        .map(|u| {
            let mut rng = seed::rng(seed::derive(base_seed, &[seed::tag::PAIRS, u as u64]));
            build_bpr_pairs(obs, u, negatives_per_positive, max_per_user, &mut rng)
        })
        .collect();
    BprPairSet { per_user }
}

/// Fits the factors of `side` with the counterpart held fixed: every entity
/// is its own group, warm-started from `init`. Returns the best iterate.
pub fn fit_factors(
    side: Side,
    counterpart: &FactorMatrix,
    obs: &ObservationSet,
    pairs: &BprPairSet,
    hp: &Hyperparams,
    init: &FactorMatrix,
) -> Result<FactorMatrix> {
    let n = obs.n_entities(side);
    assert_eq!(init.rows(), n, "init has wrong row count");
    let slots: Vec<Slot> = (0..n).map(Slot::Group).collect();
    let problem = GroupProblem::build(
        side,
        counterpart,
        None,
        &slots,
        FactorMatrix::zeros(n, hp.d),
        obs,
        pairs,
        hp.lambda(side),
        hp.lambda_b,
    );
    let outcome = solver::fit(&problem, init.as_slice(), hp, hp.seed)?;
    Ok(FactorMatrix::from_vec(n, hp.d, outcome.residuals))
}

/// Plain matrix factorization: free per-entity factors for both sides,
/// fitted by alternating [`fit_factors`] for `rounds` rounds (items first).
/// Users start uniform in `[-0.1, 0.1]` from a stream keyed by `hp.seed`;
/// items start at zero, so an all-zero rating matrix yields `V = 0`.
pub fn fit_mf(
    obs: &ObservationSet,
    pairs: &BprPairSet,
    hp: &Hyperparams,
    rounds: usize,
) -> Result<(FactorMatrix, FactorMatrix)> {
    let mut u = FactorMatrix::uniform(
        obs.n_users(),
        hp.d,
        0.1,
        &mut seed::rng(seed::derive(hp.seed, &[seed::tag::INIT, 0])),
    );
    let mut v = FactorMatrix::zeros(obs.n_items(), hp.d);
    for round in 0..rounds as u64 {
        let step = |side: u64| Hyperparams {
            seed: seed::derive(hp.seed, &[seed::tag::MF, round, side]),
            ..hp.clone()
        };
        v = fit_factors(Side::Item, &u, obs, pairs, &step(1), &v)?;
        u = fit_factors(Side::User, &v, obs, pairs, &step(0), &u)?;
    }
    Ok((u, v))
}
