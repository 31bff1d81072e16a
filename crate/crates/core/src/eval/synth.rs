//! Planted-structure review generator.
//!
//! Users and items are drawn into clusters. A review by a user of cluster
//! `a` on an item of cluster `b` is rated `block_means[a][b]` plus Gaussian
//! noise, clipped to the scale. Each cluster owns a few planted features:
//! a review mentions the user's cluster features and the item's cluster
//! features, each with probability `mention_prob`; noise features are
//! mentioned by anyone with probability `noise_mention_prob`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, RatingScale, RawMention, RawReview};
use crate::seed::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub user_clusters: usize,
    pub item_clusters: usize,
    /// Planted features per cluster, on each side.
    pub planted_features: usize,
    pub noise_features: usize,
    /// `user_clusters x item_clusters`.
    pub block_means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub reviews_per_user: usize,
    pub mention_prob: f64,
    pub noise_mention_prob: f64,
    /// 0 picks reviewed items uniformly; larger values favour items of
    /// well-rated blocks with weight `exp(bias * block mean)`.
    pub selection_bias: f64,
    pub scale: RatingScale,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 200,
            n_items: 100,
            user_clusters: 2,
            item_clusters: 2,
            planted_features: 2,
            noise_features: 4,
            block_means: vec![vec![4.5, 1.5], vec![1.5, 4.5]],
            sigma: 0.3,
            reviews_per_user: 20,
            mention_prob: 0.6,
            noise_mention_prob: 0.2,
            selection_bias: 0.0,
            scale: RatingScale::default(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.n_users == 0 || self.n_items == 0 || self.user_clusters == 0 || self.item_clusters == 0 {
            return bad("counts and cluster numbers must be positive");
        }
        if self.block_means.len() != self.user_clusters
            || self.block_means.iter().any(|r| r.len() != self.item_clusters)
        {
            return bad("block_means must be user_clusters x item_clusters");
        }
        if self.block_means.iter().flatten().any(|&m| !self.scale.contains(m)) {
            return bad("block means must lie on the rating scale");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be a non-negative number");
        }
        if self.reviews_per_user > self.n_items {
            return bad("reviews_per_user exceeds the number of items");
        }
        for p in [self.mention_prob, self.noise_mention_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn user_feature(&self, cluster: usize, k: usize) -> String {
        format!("u{cluster}f{k}")
    }

    pub fn item_feature(&self, cluster: usize, k: usize) -> String {
        format!("i{cluster}f{k}")
    }

    pub fn vocab(&self) -> Vec<String> {
        let mut v = Vec::new();
        for c in 0..self.user_clusters {
            for k in 0..self.planted_features {
                v.push(self.user_feature(c, k));
            }
        }
        for c in 0..self.item_clusters {
            for k in 0..self.planted_features {
                v.push(self.item_feature(c, k));
            }
        }
        for k in 0..self.noise_features {
            v.push(format!("n{k}"));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Cluster of each user, indexed by dataset user id.
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

fn pad(prefix: char, i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("{prefix}{i:0width$}")
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let stream = |k: u64| seed::rng(seed::derive(spec.seed, &[tag::SYNTH, k]));
    let mut rng = stream(0);
    let user_cluster: Vec<usize> = (0..spec.n_users).map(|_| rng.random_range(0..spec.user_clusters)).collect();
    let item_cluster: Vec<usize> = (0..spec.n_items).map(|_| rng.random_range(0..spec.item_clusters)).collect();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Validation(e.to_string()))?;

    let mut records = Vec::new();
    for u in 0..spec.n_users {
        let mut rng = stream(1 + u as u64);
        let a = user_cluster[u];
        let picked: Vec<usize> = if spec.selection_bias == 0.0 {
            index::sample(&mut rng, spec.n_items, spec.reviews_per_user).into_vec()
        } else {
            let weight = |j: usize| (spec.selection_bias * spec.block_means[a][item_cluster[j]]).exp();
            index::sample_weighted(&mut rng, spec.n_items, weight, spec.reviews_per_user)
                .map_err(|e| Error::Validation(e.to_string()))?
                .into_vec()
        };
        for (ts, j) in picked.into_iter().enumerate() {
            let b = item_cluster[j];
            let mean = spec.block_means[a][b];
            let rating = if spec.sigma == 0.0 {
                mean
            } else {
                spec.scale.clamp(mean + noise.sample(&mut rng))
            };
            let mut mentions = Vec::new();
            for k in 0..spec.planted_features {
                if rng.random_bool(spec.mention_prob) {
                    mentions.push(RawMention { feature: spec.user_feature(a, k), polarity: 1, opinion: None });
                }
            }
            for k in 0..spec.planted_features {
                if rng.random_bool(spec.mention_prob) {
                    mentions.push(RawMention { feature: spec.item_feature(b, k), polarity: 1, opinion: None });
                }
            }
            for k in 0..spec.noise_features {
                if rng.random_bool(spec.noise_mention_prob) {
                    let polarity = if rng.random_bool(0.5) { 1 } else { -1 };
                    mentions.push(RawMention { feature: format!("n{k}"), polarity, opinion: None });
                }
            }
            records.push((
                records.len() + 1,
                RawReview {
                    user: pad('u', u, spec.n_users),
                    item: pad('i', j, spec.n_items),
                    rating,
                    ts: ts as i64,
                    mentions,
                },
            ));
        }
    }
    let dataset = Dataset::from_raw(records, Some(spec.vocab()), spec.scale)?;
    // ids follow zero-padded names, so they equal the generation indices
    // for every entity that received a review
    let user_cluster = dataset
        .users
        .iter()
        .map(|n| user_cluster[n[1..].parse::<usize>().expect("generated name")])
        .collect();
    let item_cluster = dataset
        .items
        .iter()
        .map(|n| item_cluster[n[1..].parse::<usize>().expect("generated name")])
        .collect();
    Ok(Synthetic {
        dataset,
        user_cluster,
        item_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::build_user_profiles;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 12,
            n_items: 10,
            reviews_per_user: 5,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_ratings_are_block_means() {
        let spec = SyntheticSpec { sigma: 0.0, ..small() };
        let s = synth_generate(&spec).unwrap();
        for r in &s.dataset.reviews {
            assert_eq!(r.rating, spec.block_means[s.user_cluster[r.user]][s.item_cluster[r.item]]);
        }
    }

    #[test]
    fn planted_features_follow_clusters() {
        let spec = SyntheticSpec { mention_prob: 1.0, noise_features: 0, ..small() };
        let s = synth_generate(&spec).unwrap();
        let profiles = build_user_profiles(&s.dataset);
        let f = s.dataset.feature_index("u0f0").unwrap();
        for (u, p) in profiles.iter().enumerate() {
            assert_eq!(p.get(f).is_some(), s.user_cluster[u] == 0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |spec: &SyntheticSpec| {
            let mut out = Vec::new();
            synth_generate(spec).unwrap().dataset.write_jsonl(&mut out).unwrap();
            out
        };
        assert_eq!(bytes(&small()), bytes(&small()));
        assert_ne!(bytes(&small()), bytes(&SyntheticSpec { seed: 8, ..small() }));
    }

    #[test]
    fn biased_selection_is_valid() {
        let spec = SyntheticSpec { selection_bias: 1.0, ..small() };
        let s = synth_generate(&spec).unwrap();
        assert_eq!(s.dataset.reviews.len(), 12 * 5);
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(synth_generate(&SyntheticSpec { block_means: vec![vec![4.0]], ..small() }).is_err());
        assert!(synth_generate(&SyntheticSpec { sigma: -1.0, ..small() }).is_err());
    }
}
