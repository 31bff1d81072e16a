use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_at_k, Gain};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::recommend::{cold_start_profile, rank_items};
use crate::seed::{self, tag};
use crate::train::{alternate, FacTModel, TrainConfig};
use crate::tree::route;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartPoint {
    pub k: usize,
    /// Mean NDCG over evaluated users; `None` when nobody had more than
    /// `k` reviews.
    pub ndcg: Option<f64>,
    pub users: usize,
    /// Test users with at most `k` reviews.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub cutoff: usize,
    pub test_users: Vec<usize>,
    pub points: Vec<ColdStartPoint>,
}

impl ColdStartReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).and_then(|p| p.ndcg)
    }
}

/// Seeded user-level split; returns `(train users, test users)`, each
/// sorted, with `test_fraction` of the users (at least one) held out.
pub fn split_users(n_users: usize, test_fraction: f64, base_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut users: Vec<usize> = (0..n_users).collect();
    users.shuffle(&mut seed::rng(seed::derive(base_seed, &[tag::SPLIT])));
    let n_test = ((n_users as f64 * test_fraction).round() as usize).clamp(1, n_users.saturating_sub(1).max(1));
    let mut test = users.split_off(n_users - n_test);
    users.sort_unstable();
    test.sort_unstable();
    (users, test)
}

/// Scores held-out users from their first `k` reviews against an already
/// trained model.
///
/// Each user is scored against one fixed target for every `k`: with `K` the
/// largest requested `k` below the user's review count, reviews `K..` are the
/// ground truth and reviews `..K` are excluded from the ranking. Only the
/// routed profile changes with `k`.
pub fn evaluate_cold_users(
    model: &FacTModel,
    ds: &Dataset,
    test_users: &[usize],
    k_values: &[usize],
    cutoff: usize,
    gain: Gain,
) -> Result<Vec<ColdStartPoint>> {
    let items = model.item_factors();
    let mut totals = vec![(0.0, 0, 0); k_values.len()];
    for &u in test_users {
        let history = ds.user_history(u);
        let Some(held) = k_values.iter().copied().filter(|&k| k < history.len()).max() else {
            for t in &mut totals {
                t.2 += 1;
            }
            continue;
        };
        let mut known: Vec<usize> = history[..held].iter().map(|r| r.item).collect();
        known.sort_unstable();
        let relevance: BTreeMap<usize, f64> = history[held..]
            .iter()
            .map(|r| (r.item, gain.of(r.rating)))
            .collect();
        for (t, &k) in totals.iter_mut().zip(k_values) {
            if history.len() <= k {
                t.2 += 1;
                continue;
            }
            let profile = model.normalize_user_profile(&cold_start_profile(&history, k))?;
            let leaf = *route(&model.user_tree, &profile).last().expect("path");
            let factor = &model.user_tree.node(leaf).accumulated;
            let ranked: Vec<usize> = rank_items(factor, &items, cutoff, &known)
                .into_iter()
                .map(|s| s.item)
                .collect();
            t.0 += ndcg_at_k(&ranked, &relevance, cutoff);
            t.1 += 1;
        }
    }
    Ok(k_values
        .iter()
        .zip(totals)
        .map(|(&k, (total, users, skipped))| ColdStartPoint {
            k,
            ndcg: (users > 0).then(|| total / users as f64),
            users,
            skipped,
        })
        .collect())
}

/// Trains on 95% of users and, for each held-out user and each `k`, routes
/// the profile built from their first `k` reviews and ranks the rest.
pub fn cold_start_eval(
    ds: &Dataset,
    cfg: &TrainConfig,
    k_values: &[usize],
    cutoff: usize,
    gain: Gain,
    base_seed: u64,
) -> Result<ColdStartReport> {
    if ds.n_users() < 2 {
        return Err(Error::Validation("cold-start evaluation needs at least two users".into()));
    }
    let (_, test_users) = split_users(ds.n_users(), 0.05, base_seed);
    let train: Vec<_> = ds
        .reviews
        .iter()
        .filter(|r| test_users.binary_search(&r.user).is_err())
        .cloned()
        .collect();
    let model = alternate(&ds.with_reviews(train), cfg)?;
    let points = evaluate_cold_users(&model, ds, &test_users, k_values, cutoff, gain)?;
    Ok(ColdStartReport {
        cutoff,
        test_users,
        points,
    })
}
