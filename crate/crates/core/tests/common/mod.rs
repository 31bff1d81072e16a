//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fact::eval::{synth_generate, SyntheticSpec};
use fact::factorization::{build_all_pairs, BprPairSet, ObservationSet};
use fact::ingest::{candidate_thresholds, DiscretizationSpec, Normalization, Observation};
use fact::tree::{candidate_seed, evaluate_split, Partition, TreeContext};
use fact::{Dataset, FactorMatrix, FeatureProfile, Hyperparams, Side, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Planted block data used by the trend checks: 200 users, 100 items,
/// 2x2 clusters, sigma 0.3, ten reviews per user drawn towards liked blocks.
pub fn planted_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        reviews_per_user: 10,
        selection_bias: 1.0,
        ..Default::default()
    }
}

pub fn planted(seed: u64) -> Dataset {
    synth_generate(&planted_spec(seed)).expect("planted data").dataset
}

pub fn planted_config(h: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        h,
        hp: Hyperparams {
            d: 4,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Small world for quick end-to-end runs.
pub fn tiny(seed: u64) -> Dataset {
    synth_generate(&SyntheticSpec {
        n_users: 30,
        n_items: 20,
        reviews_per_user: 6,
        seed,
        ..Default::default()
    })
    .expect("tiny data")
    .dataset
}

pub fn tiny_config(h: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        h,
        max_alternations: 2,
        init_rounds: 2,
        hp: Hyperparams {
            d: 3,
            epochs: 10,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

// ---------------------------------------------------------------- NDCG

/// DCG / IDCG written out term by term.
pub fn ndcg_direct(ranked: &[usize], relevance: &BTreeMap<usize, f64>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for i in 0..k.min(ranked.len()) {
        if let Some(g) = relevance.get(&ranked[i]) {
            dcg += g / (i as f64 + 2.0).ln() * std::f64::consts::LN_2;
        }
    }
    let mut gains: Vec<f64> = relevance.values().copied().collect();
    gains.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut idcg = 0.0;
    for (i, g) in gains.iter().enumerate().take(k) {
        idcg += g / (i as f64 + 2.0).ln() * std::f64::consts::LN_2;
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

// ------------------------------------------------------ split objective

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective of a user-side split written from the definition: squared
/// error of every member's ratings under its child's vector, minus the
/// weighted BPR log-likelihood of every member's pairs, plus the penalty on
/// the fitted child vectors (residuals with parent factors, free vectors
/// without).
pub struct UserSplitWorld {
    pub ratings: Vec<Vec<(usize, f64)>>,
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub items: FactorMatrix,
    pub lambda_u: f64,
    pub lambda_b: f64,
}

impl UserSplitWorld {
    pub fn objective(&self, parts: [&[usize]; 3], vectors: &[Vec<f64>; 3], penalised: &[Vec<f64>; 3]) -> f64 {
        let mut total = 0.0;
        for c in 0..3 {
            let a = &vectors[c];
            for &u in parts[c] {
                for &(j, r) in &self.ratings[u] {
                    let e = r - dot(a, self.items.row(j));
                    total += e * e;
                }
                for &(j, l) in &self.pairs[u] {
                    let diff: Vec<f64> = self.items.row(j).iter().zip(self.items.row(l)).map(|(x, y)| x - y).collect();
                    total -= self.lambda_b * log_sigmoid(dot(a, &diff));
                }
            }
            total += self.lambda_u * penalised[c].iter().map(|x| x * x).sum::<f64>();
        }
        total
    }
}

pub fn own_partition(entities: &[usize], profiles: &[FeatureProfile], feature: usize, threshold: f64) -> Partition {
    let mut p = Partition::default();
    for &e in entities {
        match profiles[e].get(feature) {
            None => p.unknown.push(e),
            Some(v) if v >= threshold => p.left.push(e),
            Some(_) => p.right.push(e),
        }
    }
    p.left.sort_unstable();
    p.right.sort_unstable();
    p.unknown.sort_unstable();
    p
}

pub struct SplitInstance {
    pub profiles: Vec<FeatureProfile>,
    pub obs: ObservationSet,
    pub pairs: BprPairSet,
    pub items: FactorMatrix,
    pub hp: Hyperparams,
    pub spec: DiscretizationSpec,
    pub members: Vec<usize>,
    pub parent: Vec<f64>,
    pub excluded: BTreeSet<usize>,
    pub use_parent_factors: bool,
    pub node_seed: u64,
}

impl SplitInstance {
    /// Up to 8 users, 6 items and 4 features with d = 2.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let n_users = r.random_range(3..=8);
        let n_items = r.random_range(2..=6);
        let n_features = r.random_range(1..=4);
        let mut entries = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if r.random_bool(0.6) {
                    entries.push(Observation {
                        user: u,
                        item: i,
                        rating: r.random_range(1..=5) as f64,
                    });
                }
            }
        }
        let obs = ObservationSet::new(entries, n_users, n_items);
        let pairs = build_all_pairs(&obs, 1, 0, seed);
        let profiles: Vec<FeatureProfile> = (0..n_users)
            .map(|_| {
                let mut entries = Vec::new();
                for f in 0..n_features {
                    if r.random_bool(0.7) {
                        entries.push((f, r.random_range(1..=4) as f64));
                    }
                }
                FeatureProfile::from_entries(Side::User, entries)
            })
            .collect();
        let spec = candidate_thresholds(&profiles, n_features, 3, Normalization::None);
        let items = FactorMatrix::from_vec(n_items, 2, (0..n_items * 2).map(|_| r.random_range(-1.5..1.5)).collect());
        let hp = Hyperparams {
            d: 2,
            lambda_b: r.random_range(0.0..0.5),
            lambda_u: r.random_range(0.01..0.3),
            lr: 0.02,
            epochs: 15,
            n_bpr: 0,
            seed,
            ..Default::default()
        };
        let mut members: Vec<usize> = (0..n_users).filter(|_| r.random_bool(0.85)).collect();
        if members.len() < 2 {
            members = (0..n_users).collect();
        }
        let excluded = if n_features > 1 && r.random_bool(0.3) {
            BTreeSet::from([r.random_range(0..n_features)])
        } else {
            BTreeSet::new()
        };
        SplitInstance {
            profiles,
            obs,
            pairs,
            items,
            hp,
            spec,
            members,
            parent: vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            excluded,
            use_parent_factors: r.random_bool(0.7),
            node_seed: r.random(),
        }
    }

    pub fn ctx(&self) -> TreeContext<'_> {
        TreeContext {
            side: Side::User,
            profiles: &self.profiles,
            counterpart: &self.items,
            obs: &self.obs,
            pairs: &self.pairs,
            hp: &self.hp,
            use_parent_factors: self.use_parent_factors,
        }
    }

    pub fn world(&self) -> UserSplitWorld {
        let n = self.obs.n_users();
        UserSplitWorld {
            ratings: (0..n).map(|u| self.obs.of_user(u).map(|o| (o.item, o.rating)).collect()).collect(),
            pairs: (0..n).map(|u| self.pairs.of_user(u).to_vec()).collect(),
            items: self.items.clone(),
            lambda_u: self.hp.lambda_u,
            lambda_b: self.hp.lambda_b,
        }
    }
}

/// Outcome of the exhaustive search.
#[derive(Debug)]
pub struct BruteBest {
    pub feature: usize,
    pub threshold: f64,
    pub objective: f64,
    /// Largest gap between a reported and a recomputed candidate objective.
    pub max_report_gap: f64,
    pub candidates: usize,
}

/// Scores every `(feature, threshold)` with its own partition and its own
/// objective; each candidate's children come from one `evaluate_split` call
/// under the same candidate seed the search uses. Strictly better wins, in
/// `(feature, threshold index)` order.
pub fn brute_force_select(inst: &SplitInstance) -> Result<Option<BruteBest>, String> {
    let ctx = inst.ctx();
    let world = inst.world();
    let mut best: Option<BruteBest> = None;
    let mut gap: f64 = 0.0;
    let mut candidates = 0;
    for (f, thresholds) in inst.spec.thresholds.iter().enumerate() {
        if inst.excluded.contains(&f) {
            continue;
        }
        for (ti, &t) in thresholds.iter().enumerate() {
            let part = own_partition(&inst.members, &inst.profiles, f, t);
            if part.sizes().iter().filter(|&&s| s > 0).count() < 2 {
                continue;
            }
            candidates += 1;
            let fitted = evaluate_split(
                &ctx,
                &inst.members,
                fact::Predicate { feature: f, threshold: t },
                &inst.parent,
                candidate_seed(inst.node_seed, f, ti),
            )
            .map_err(|e| e.to_string())?;
            if fitted.partition != part {
                return Err(format!("partition differs for feature {f} threshold {t}"));
            }
            let penalised = if inst.use_parent_factors {
                fitted.residuals.clone()
            } else {
                fitted.accumulated.clone()
            };
            let obj = world.objective(part.parts(), &fitted.accumulated, &penalised);
            gap = gap.max((obj - fitted.objective).abs());
            if best.as_ref().is_none_or(|b| obj < b.objective) {
                best = Some(BruteBest {
                    feature: f,
                    threshold: t,
                    objective: obj,
                    max_report_gap: 0.0,
                    candidates: 0,
                });
            }
        }
    }
    Ok(best.map(|b| BruteBest {
        max_report_gap: gap,
        candidates,
        ..b
    }))
}
