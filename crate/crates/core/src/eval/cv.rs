use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_flat_mf, FactRanker, MostPopular, Ranker};
use super::metrics::{mean_std, ndcg_at_k, Gain};
use crate::error::{Error, Result};
use crate::factorization::Hyperparams;
use crate::ingest::{Dataset, Review};
use crate::recommend::rank_scores;
use crate::seed::{self, tag};
use crate::train::{alternate, TrainConfig};

/// What to train on each fold.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Fact(TrainConfig),
    MostPopular,
    FlatMf {
        hp: Hyperparams,
        with_bpr: bool,
        rounds: usize,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fact(_) => "fact",
            Method::MostPopular => "most-popular",
            Method::FlatMf { with_bpr: true, .. } => "bpr-mf",
            Method::FlatMf { with_bpr: false, .. } => "mf",
        }
    }
}

/// Fold of every review (indexed like `ds.reviews`); `None` keeps the
/// review in training for every fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldAssignment {
    pub folds: usize,
    pub fold_of: Vec<Option<usize>>,
    /// Users with fewer reviews than folds, kept in training only.
    pub sparse_users: usize,
}

/// User-stratified assignment: each eligible user's reviews are shuffled
/// on their own seeded stream and dealt round robin across the folds.
pub fn assign_folds(ds: &Dataset, folds: usize, base_seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::Validation(format!("cross validation needs at least 2 folds, got {folds}")));
    }
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users()];
    for (k, r) in ds.reviews.iter().enumerate() {
        per_user[r.user].push(k);
    }
    let mut fold_of = vec![None; ds.reviews.len()];
    let mut sparse_users = 0;
    for (u, mut idx) in per_user.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < folds {
            sparse_users += 1;
            continue;
        }
        idx.shuffle(&mut seed::rng(seed::derive(base_seed, &[tag::FOLDS, u as u64])));
        for (pos, k) in idx.into_iter().enumerate() {
            fold_of[k] = Some(pos % folds);
        }
    }
    Ok(FoldAssignment {
        folds,
        fold_of,
        sparse_users,
    })
}

impl FoldAssignment {
    /// `(train, test)` reviews of fold `f`.
    pub fn split<'a>(&self, ds: &'a Dataset, f: usize) -> (Vec<Review>, Vec<&'a Review>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (r, fold) in ds.reviews.iter().zip(&self.fold_of) {
            if *fold == Some(f) {
                test.push(r);
            } else {
                train.push(r.clone());
            }
        }
        (train, test)
    }
}

/// Mean NDCG@K over users with held-out items. Training items are removed
/// from each user's ranking. Returns one value per cutoff.
pub fn evaluate_ranker(
    ranker: &dyn Ranker,
    train: &Dataset,
    test: &[&Review],
    ks: &[usize],
    gain: Gain,
) -> Vec<f64> {
    let mut relevance: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in test {
        relevance.entry(r.user).or_default().insert(r.item, gain.of(r.rating));
    }
    let mut seen = vec![Vec::new(); train.n_users()];
    for r in &train.reviews {
        seen[r.user].push(r.item);
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let per_user: Vec<Vec<f64>> = relevance
        .par_iter()
        .map(|(&u, rel)| {
            let mut exclude = seen[u].clone();
            exclude.sort_unstable();
            let ranked: Vec<usize> = rank_scores(&ranker.scores(u), max_k, &exclude)
                .into_iter()
                .map(|s| s.item)
                .collect();
            ks.iter().map(|&k| ndcg_at_k(&ranked, rel, k)).collect()
        })
        .collect();
    let n = per_user.len().max(1) as f64;
    (0..ks.len())
        .map(|c| per_user.iter().map(|v| v[c]).sum::<f64>() / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: String,
    pub ks: Vec<usize>,
    /// `per_fold[f][c]` is NDCG@`ks[c]` on fold `f`.
    pub per_fold: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sparse_users: usize,
    /// Final training objective per fold (tree models only).
    pub objectives: Vec<f64>,
}

impl CvReport {
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|c| self.mean[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// NDCG per requested cutoff.
    pub ndcg: Vec<f64>,
    /// Final training objective (tree models only).
    pub objective: Option<f64>,
}

/// Trains `method` on everything outside fold `f` and scores fold `f`.
pub fn evaluate_fold(
    ds: &Dataset,
    assignment: &FoldAssignment,
    f: usize,
    method: &Method,
    ks: &[usize],
    gain: Gain,
) -> Result<FoldResult> {
    if f >= assignment.folds {
        return Err(Error::Validation(format!("fold {f} out of range")));
    }
    let (train, test) = assignment.split(ds, f);
    let train = ds.with_reviews(train);
    let (ranker, objective): (Box<dyn Ranker>, Option<f64>) = match method {
        Method::Fact(cfg) => {
            let model = alternate(&train, cfg)?;
            let obj = model.report.final_objective();
            (Box::new(FactRanker::new(&model)), Some(obj))
        }
        Method::MostPopular => (Box::new(MostPopular::fit(&train)), None),
        Method::FlatMf { hp, with_bpr, rounds } => (Box::new(baseline_flat_mf(&train, hp, *with_bpr, *rounds)?), None),
    };
    Ok(FoldResult {
        ndcg: evaluate_ranker(ranker.as_ref(), &train, &test, ks, gain),
        objective,
    })
}

/// Trains and evaluates `method` on every fold. Folds run in parallel and
/// are merged in fold order.
pub fn cross_validate(
    ds: &Dataset,
    method: &Method,
    folds: usize,
    ks: &[usize],
    gain: Gain,
    base_seed: u64,
) -> Result<CvReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Validation("cutoffs must be positive".into()));
    }
    let assignment = assign_folds(ds, folds, base_seed)?;
    let results: Vec<Result<FoldResult>> = (0..folds)
        .into_par_iter()
        .map(|f| evaluate_fold(ds, &assignment, f, method, ks, gain))
        .collect();
    let mut per_fold = Vec::new();
    let mut objectives = Vec::new();
    for r in results {
        let r = r?;
        per_fold.push(r.ndcg);
        objectives.extend(r.objective);
    }
    let (mean, std) = (0..ks.len())
        .map(|c| mean_std(&per_fold.iter().map(|v| v[c]).collect::<Vec<_>>()))
        .unzip();
    Ok(CvReport {
        method: method.name().into(),
        ks: ks.to_vec(),
        per_fold,
        mean,
        std,
        sparse_users: assignment.sparse_users,
        objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RatingScale;

    fn ds() -> Dataset {
        let mut reviews = Vec::new();
        for u in 0..6 {
            let n = if u == 5 { 2 } else { 7 };
            for j in 0..n {
                reviews.push(Review { user: u, item: j, rating: 3.0, timestamp: 0, mentions: Vec::new() });
            }
        }
        Dataset {
            users: (0..6).map(|u| format!("u{u}")).collect(),
            items: (0..8).map(|j| format!("i{j}")).collect(),
            features: Vec::new(),
            reviews,
            scale: RatingScale::default(),
        }
    }

    #[test]
    fn folds_partition_eligible_reviews() {
        let data = ds();
        assert!(assign_folds(&data, 1, 0).is_err());
        let a = assign_folds(&data, 3, 4).unwrap();
        assert_eq!(a, assign_folds(&data, 3, 4).unwrap());
        assert_eq!(a.sparse_users, 1);
        let mut covered = 0;
        for f in 0..3 {
            let (train, test) = a.split(&data, f);
            assert_eq!(train.len() + test.len(), data.reviews.len());
            covered += test.len();
            assert!(test.iter().all(|r| r.user != 5));
        }
        assert_eq!(covered, 35);
    }
}
