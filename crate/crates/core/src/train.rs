//! Alternating optimisation of the user and item trees.
//!
//! Item factors are initialised by plain matrix factorization. Each
//! alternation then grows a fresh user tree against the current item
//! factors, harvests per-user factors from its leaves (plus personal
//! residuals when enabled), grows a fresh item tree against those, and
//! harvests item factors the same way. The joint objective is evaluated on
//! the harvested factors after every alternation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{
    self, build_all_pairs, BprPairSet, FactorMatrix, Hyperparams, ObservationSet,
};
use crate::ingest::{
    build_item_profiles, build_user_profiles, candidate_thresholds, normalize_profile,
    normalize_profiles, Dataset, DiscretizationSpec, FeatureProfile, Normalization, Side,
};
use crate::seed::{self, tag};
use crate::tree::{self, FactorTree, GrowOptions, TreeContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Maximum tree depth in levels; 1 is a single shared vector per side.
    pub h: usize,
    pub max_alternations: usize,
    /// Relative change of the joint objective that ends the alternation.
    pub alt_tol: f64,
    pub use_parent_factors: bool,
    pub use_personal_residuals: bool,
    /// Candidate thresholds per feature.
    pub bins: usize,
    pub normalization: Normalization,
    pub min_node_size: usize,
    /// Matrix factorization rounds used for the initial item factors.
    pub init_rounds: usize,
    pub hp: Hyperparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            h: 6,
            max_alternations: 5,
            alt_tol: 1e-3,
            use_parent_factors: true,
            use_personal_residuals: true,
            bins: 5,
            normalization: Normalization::PerEntityTotal,
            min_node_size: 1,
            init_rounds: 5,
            hp: Hyperparams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.h == 0 {
            return Err(Error::Config("h must be at least 1".into()));
        }
        if self.max_alternations == 0 {
            return Err(Error::Config("max_alternations must be at least 1".into()));
        }
        if !(self.alt_tol > 0.0) {
            return Err(Error::Config("alt_tol must be positive".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxAlternations,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub user_tree_secs: f64,
    pub item_tree_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Joint objective of the matrix factorization start.
    pub initial_objective: f64,
    /// Joint objective after each alternation.
    pub objectives: Vec<f64>,
    pub stop_reason: StopReason,
    /// Wall clock per alternation. Not persisted, so model files stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub timings: Vec<PhaseTiming>,
}

impl ConvergenceReport {
    pub fn final_objective(&self) -> f64 {
        self.objectives.last().copied().unwrap_or(self.initial_objective)
    }
}

/// Per-entity residuals on top of the leaf vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalResiduals {
    pub users: FactorMatrix,
    pub items: FactorMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideSpecs {
    pub user: DiscretizationSpec,
    pub item: DiscretizationSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FacTModel {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub spec: SideSpecs,
    pub user_tree: FactorTree,
    pub item_tree: FactorTree,
    pub personal: Option<PersonalResiduals>,
    /// Training items of each user, sorted.
    pub seen: Vec<Vec<usize>>,
    pub report: ConvergenceReport,
}

impl FacTModel {
    pub fn hp(&self) -> &Hyperparams {
        &self.config.hp
    }

    pub fn dim(&self) -> usize {
        self.user_tree.dim
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, name: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(name)).ok()
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.items.binary_search_by(|u| u.as_str().cmp(name)).ok()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.vocab.iter().position(|f| f == name)
    }

    fn factor(&self, side: Side, e: usize) -> Vec<f64> {
        let (tree, personal) = match side {
            Side::User => (&self.user_tree, self.personal.as_ref().map(|p| &p.users)),
            Side::Item => (&self.item_tree, self.personal.as_ref().map(|p| &p.items)),
        };
        let mut v = tree.node(tree.leaf_of(e)).accumulated.clone();
        if let Some(p) = personal {
            for (x, r) in v.iter_mut().zip(p.row(e)) {
                *x += r;
            }
        }
        v
    }

    /// Leaf vector plus personal residual.
    pub fn user_factor(&self, user: usize) -> Vec<f64> {
        self.factor(Side::User, user)
    }

    pub fn item_factor(&self, item: usize) -> Vec<f64> {
        self.factor(Side::Item, item)
    }

    pub fn user_factors(&self) -> FactorMatrix {
        harvest(&self.user_tree, self.personal.as_ref().map(|p| &p.users))
    }

    pub fn item_factors(&self) -> FactorMatrix {
        harvest(&self.item_tree, self.personal.as_ref().map(|p| &p.items))
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        factorization::dot(&self.user_factor(user), &self.item_factor(item))
    }

    /// Normalises a raw user profile the way training profiles were.
    pub fn normalize_user_profile(&self, profile: &FeatureProfile) -> Result<FeatureProfile> {
        normalize_profile(profile, self.spec.user.normalization)
    }
}

/// Leaf vectors, plus personal residuals when given.
pub fn harvest(tree: &FactorTree, personal: Option<&FactorMatrix>) -> FactorMatrix {
    let mut m = tree.entity_factors();
    if let Some(p) = personal {
        for (x, r) in m.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *x += r;
        }
    }
    m
}

/// Everything derived from a dataset that training needs.
pub struct Prepared {
    pub obs: ObservationSet,
    pub pairs: BprPairSet,
    pub user_profiles: Vec<FeatureProfile>,
    pub item_profiles: Vec<FeatureProfile>,
    pub spec: SideSpecs,
}

pub fn prepare(ds: &Dataset, cfg: &TrainConfig) -> Result<Prepared> {
    if ds.reviews.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs = ObservationSet::new(ds.observations(), ds.n_users(), ds.n_items());
    let pairs = if cfg.hp.lambda_b == 0.0 {
        BprPairSet::empty(ds.n_users())
    } else {
        build_all_pairs(
            &obs,
            cfg.hp.negatives_per_positive,
            cfg.hp.max_pairs_per_user,
            seed::derive(cfg.hp.seed, &[tag::PAIRS]))
    };
    let user_profiles = normalize_profiles(&build_user_profiles(ds), cfg.normalization)?;
    let item_profiles = normalize_profiles(&build_item_profiles(ds), cfg.normalization)?;
    let spec = SideSpecs {
        user: candidate_thresholds(&user_profiles, ds.n_features(), cfg.bins, cfg.normalization),
        item: candidate_thresholds(&item_profiles, ds.n_features(), cfg.bins, cfg.normalization),
    };
    Ok(Prepared {
        obs,
        pairs,
        user_profiles,
        item_profiles,
        spec,
    })
}

/// Initial `(U, V)` from plain matrix factorization.
pub fn init_factors(obs: &ObservationSet, pairs: &BprPairSet, cfg: &TrainConfig) -> Result<(FactorMatrix, FactorMatrix)> {
    let hp = Hyperparams {
        seed: seed::derive(cfg.hp.seed, &[tag::MF]),
        ..cfg.hp.clone()
    };
    factorization::fit_mf(obs, pairs, &hp, cfg.init_rounds)
}

/// Initial item factors `V_0`.
pub fn init_item_factors(ds: &Dataset, cfg: &TrainConfig) -> Result<FactorMatrix> {
    let prep = prepare(ds, cfg)?;
    Ok(init_factors(&prep.obs, &prep.pairs, cfg)?.1)
}

/// Trains a full model.
pub fn alternate(ds: &Dataset, cfg: &TrainConfig) -> Result<FacTModel> {
    cfg.validate()?;
    let prep = prepare(ds, cfg)?;
    let hp = &cfg.hp;
    let (u0, mut v) = init_factors(&prep.obs, &prep.pairs, cfg)?;
    let initial = factorization::objective(&u0, &v, prep.obs.entries(), &prep.pairs, hp);
    log::info!("initial objective {initial:.6}");

    let opts = GrowOptions {
        max_depth: cfg.h,
        min_node_size: cfg.min_node_size,
    };
    let users: Vec<usize> = (0..ds.n_users()).collect();
    let items: Vec<usize> = (0..ds.n_items()).collect();
    let mut objectives = Vec::new();
    let mut timings = Vec::new();
    let mut prev = initial;
    let mut stop_reason = StopReason::MaxAlternations;
    let mut last = None;

    for t in 0..cfg.max_alternations as u64 {
        let started = Instant::now();
        let user_ctx = TreeContext {
            side: Side::User,
            profiles: &prep.user_profiles,
            counterpart: &v,
            obs: &prep.obs,
            pairs: &prep.pairs,
            hp,
            use_parent_factors: cfg.use_parent_factors,
        };
        let user_seed = seed::derive(hp.seed, &[tag::ALTERNATION, t, 0]);
        let user_tree = tree::grow(&user_ctx, &users, &prep.spec.user, &opts, user_seed)?;
        let user_personal = if cfg.use_personal_residuals {
            Some(tree::fit_personal_residuals(&user_tree, &user_ctx, user_seed)?)
        } else {
            None
        };
        let u = harvest(&user_tree, user_personal.as_ref());
        let user_secs = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let item_ctx = TreeContext {
            side: Side::Item,
            profiles: &prep.item_profiles,
            counterpart: &u,
            obs: &prep.obs,
            pairs: &prep.pairs,
            hp,
            use_parent_factors: cfg.use_parent_factors,
        };
        let item_seed = seed::derive(hp.seed, &[tag::ALTERNATION, t, 1]);
        let item_tree = tree::grow(&item_ctx, &items, &prep.spec.item, &opts, item_seed)?;
        let item_personal = if cfg.use_personal_residuals {
            Some(tree::fit_personal_residuals(&item_tree, &item_ctx, item_seed)?)
        } else {
            None
        };
        v = harvest(&item_tree, item_personal.as_ref());
        timings.push(PhaseTiming {
            user_tree_secs: user_secs,
            item_tree_secs: started.elapsed().as_secs_f64(),
        });

        let obj = factorization::objective(&u, &v, prep.obs.entries(), &prep.pairs, hp);
        if !obj.is_finite() {
            return Err(Error::Divergence {
                epoch: t as usize,
                objective: obj,
            });
        }
        log::info!(
            "alternation {}: objective {obj:.6}, user tree {} nodes, item tree {} nodes",
            t + 1,
            user_tree.nodes.len(),
            item_tree.nodes.len()
        );
        objectives.push(obj);
        let personal = match (user_personal, item_personal) {
            (Some(users), Some(items)) => Some(PersonalResiduals { users, items }),
            _ => None,
        };
        last = Some((user_tree, item_tree, personal));
        let rel = (prev - obj).abs() / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.alt_tol {
            stop_reason = StopReason::Tolerance;
            break;
        }
        prev = obj;
    }

    let (user_tree, item_tree, personal) = last.expect("at least one alternation");
    let mut seen = vec![Vec::new(); ds.n_users()];
    for r in &ds.reviews {
        seen[r.user].push(r.item);
    }
    Ok(FacTModel {
        config: cfg.clone(),
        vocab: ds.features.clone(),
        users: ds.users.clone(),
        items: ds.items.clone(),
        spec: prep.spec,
        user_tree,
        item_tree,
        personal,
        seen,
        report: ConvergenceReport {
            initial_objective: initial,
            objectives,
            stop_reason,
            timings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{RatingScale, Review, SentimentMention};

    fn block_dataset() -> Dataset {
        // two user groups, two item groups, one telling feature per group
        let mut reviews = Vec::new();
        for u in 0..8 {
            for j in 0..6 {
                if (u + j) % 3 == 0 {
                    continue;
                }
                let same = (u < 4) == (j < 3);
                let feature = if u < 4 { 0 } else { 1 };
                let item_feature = if j < 3 { 2 } else { 3 };
                reviews.push(Review {
                    user: u,
                    item: j,
                    rating: if same { 5.0 } else { 1.0 },
                    timestamp: j as i64,
                    mentions: vec![
                        SentimentMention { feature, polarity: 1, opinion: None },
                        SentimentMention { feature: item_feature, polarity: 1, opinion: None },
                    ],
                });
            }
        }
        Dataset {
            users: (0..8).map(|u| format!("u{u}")).collect(),
            items: (0..6).map(|j| format!("i{j}")).collect(),
            features: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            reviews,
            scale: RatingScale::default(),
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            h: 2,
            max_alternations: 2,
            hp: Hyperparams {
                d: 2,
                epochs: 20,
                lr: 0.02,
                n_bpr: 0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn one_alternation_builds_both_trees() {
        let cfg = TrainConfig {
            max_alternations: 1,
            ..small_cfg()
        };
        let model = alternate(&block_dataset(), &cfg).unwrap();
        assert_eq!(model.report.objectives.len(), 1);
        assert_eq!(model.report.stop_reason, StopReason::MaxAlternations);
        assert_eq!(model.user_tree.side, Side::User);
        assert_eq!(model.item_tree.side, Side::Item);
    }

    #[test]
    fn infinite_tolerance_stops_after_first() {
        let cfg = TrainConfig {
            alt_tol: f64::INFINITY,
            max_alternations: 4,
            ..small_cfg()
        };
        let model = alternate(&block_dataset(), &cfg).unwrap();
        assert_eq!(model.report.objectives.len(), 1);
        assert_eq!(model.report.stop_reason, StopReason::Tolerance);
    }

    #[test]
    fn zero_ratings_give_zero_item_factors() {
        let mut ds = block_dataset();
        ds.scale = RatingScale { min: 0.0, max: 5.0 };
        for r in &mut ds.reviews {
            r.rating = 0.0;
        }
        let mut cfg = small_cfg();
        cfg.hp.lambda_b = 0.0;
        let v = init_item_factors(&ds, &cfg).unwrap();
        assert!(v.as_slice().iter().all(|&x| x.abs() < 1e-6), "{:?}", v.as_slice());
    }

    #[test]
    fn training_is_deterministic() {
        let a = alternate(&block_dataset(), &small_cfg()).unwrap();
        let b = alternate(&block_dataset(), &small_cfg()).unwrap();
        assert_eq!(a.user_tree, b.user_tree);
        assert_eq!(a.item_tree, b.item_tree);
        assert_eq!(a.personal, b.personal);
        assert_eq!(a.report.objectives, b.report.objectives);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut ds = block_dataset();
        ds.reviews.clear();
        assert!(matches!(alternate(&ds, &small_cfg()), Err(Error::EmptyDataset)));
    }
}
