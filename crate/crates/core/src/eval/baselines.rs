use crate::error::Result;
use crate::factorization::{build_all_pairs, dot, fit_mf, BprPairSet, FactorMatrix, Hyperparams, ObservationSet};
use crate::ingest::Dataset;
use crate::seed::{self, tag};
use crate::train::FacTModel;

/// Anything that scores every item for a training user.
pub trait Ranker: Sync {
    fn scores(&self, user: usize) -> Vec<f64>;
}

/// Items ranked by how often they occur in training data.
#[derive(Clone, Debug, PartialEq)]
pub struct MostPopular {
    pub counts: Vec<usize>,
}

impl MostPopular {
    pub fn fit(ds: &Dataset) -> Self {
        let mut counts = vec![0; ds.n_items()];
        for r in &ds.reviews {
            counts[r.item] += 1;
        }
        MostPopular { counts }
    }

    /// Full static ranking: frequency descending, ties by item id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        order
    }
}

impl Ranker for MostPopular {
    fn scores(&self, _user: usize) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Free per-entity factors with no trees.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatMf {
    pub users: FactorMatrix,
    pub items: FactorMatrix,
}

impl Ranker for FlatMf {
    fn scores(&self, user: usize) -> Vec<f64> {
        let u = self.users.row(user);
        (0..self.items.rows()).map(|j| dot(u, self.items.row(j))).collect()
    }
}

/// Plain MF (`with_bpr = false`, which forces `lambda_b = 0`) or BPR-MF.
pub fn baseline_flat_mf(ds: &Dataset, hp: &Hyperparams, with_bpr: bool, rounds: usize) -> Result<FlatMf> {
    hp.validate()?;
    let hp = Hyperparams {
        lambda_b: if with_bpr { hp.lambda_b } else { 0.0 },
        ..hp.clone()
    };
    let obs = ObservationSet::new(ds.observations(), ds.n_users(), ds.n_items());
    let pairs = if hp.lambda_b == 0.0 {
        BprPairSet::empty(ds.n_users())
    } else {
        build_all_pairs(&obs, hp.negatives_per_positive, hp.max_pairs_per_user, seed::derive(hp.seed, &[tag::PAIRS]))
    };
    let mf_hp = Hyperparams {
        seed: seed::derive(hp.seed, &[tag::MF]),
        ..hp
    };
    let (users, items) = fit_mf(&obs, &pairs, &mf_hp, rounds)?;
    Ok(FlatMf { users, items })
}

/// A trained model as a ranker over its training users.
pub struct FactRanker {
    users: FactorMatrix,
    items: FactorMatrix,
}

impl FactRanker {
    pub fn new(model: &FacTModel) -> Self {
        FactRanker {
            users: model.user_factors(),
            items: model.item_factors(),
        }
    }
}

impl Ranker for FactRanker {
    fn scores(&self, user: usize) -> Vec<f64> {
        let u = self.users.row(user);
        (0..self.items.rows()).map(|j| dot(u, self.items.row(j))).collect()
    }
}
