//! Review ingestion and feature-level profiles.
//!
//! Reviews arrive as JSON lines carrying a rating plus pre-extracted
//! `(feature, polarity)` mentions. From them we build the two profile
//! families the trees split on: user profiles count how often a user talks
//! about a feature, item profiles aggregate the signed sentiment an item
//! received for it. A missing key always means "never mentioned", which is a
//! different branch from any numeric value (including zero).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::User => Side::Item,
            Side::Item => Side::User,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentMention {
    pub feature: usize,
    /// +1 or -1.
    pub polarity: i8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinion: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
    pub mentions: Vec<SentimentMention>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale { min: 1.0, max: 5.0 }
    }
}

impl RatingScale {
    pub fn contains(&self, r: f64) -> bool {
        r.is_finite() && r >= self.min && r <= self.max
    }

    pub fn clamp(&self, r: f64) -> f64 {
        r.clamp(self.min, self.max)
    }
}

/// One line of the JSON-lines input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawReview {
    pub user: String,
    pub item: String,
    pub rating: f64,
    #[serde(default)]
    pub ts: i64,
    #[serde(default)]
    pub mentions: Vec<RawMention>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawMention {
    pub feature: String,
    pub polarity: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinion: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    JsonLines,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" | "jsonlines" => Ok(Format::JsonLines),
            other => Err(Error::Validation(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Users, items, the feature vocabulary and the deduplicated reviews.
///
/// Ids are dense indices assigned in lexicographic order of the raw keys
/// (features follow the vocabulary file order when one is given). Reviews
/// are kept sorted by `(user, item)` and hold at most one entry per pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub features: Vec<String>,
    pub reviews: Vec<Review>,
    pub scale: RatingScale,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.reviews
            .iter()
            .map(|r| Observation {
                user: r.user,
                item: r.item,
                rating: r.rating,
            })
            .collect()
    }

    pub fn user_index(&self, name: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(name)).ok()
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.items.binary_search_by(|u| u.as_str().cmp(name)).ok()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    /// A user's reviews in chronological order (ties by item id).
    pub fn user_history(&self, user: usize) -> Vec<&Review> {
        let mut out: Vec<&Review> = self.reviews.iter().filter(|r| r.user == user).collect();
        out.sort_by_key(|r| (r.timestamp, r.item));
        out
    }

    /// Same entity and feature index spaces, different review set.
    pub fn with_reviews(&self, mut reviews: Vec<Review>) -> Dataset {
        reviews.sort_by_key(|r| (r.user, r.item));
        Dataset {
            users: self.users.clone(),
            items: self.items.clone(),
            features: self.features.clone(),
            reviews,
            scale: self.scale,
        }
    }

    /// Keeps only mentions of the `n` most frequently mentioned features.
    /// Feature ids are unchanged; dropped features simply have no mentions.
    pub fn keep_top_features(&self, n: usize) -> Dataset {
        let mut freq = vec![0usize; self.n_features()];
        for m in self.reviews.iter().flat_map(|r| &r.mentions) {
            freq[m.feature] += 1;
        }
        let mut order: Vec<usize> = (0..self.n_features()).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        let keep: BTreeSet<usize> = order.into_iter().take(n).collect();
        let reviews = self
            .reviews
            .iter()
            .map(|r| Review {
                mentions: r
                    .mentions
                    .iter()
                    .filter(|m| keep.contains(&m.feature))
                    .cloned()
                    .collect(),
                ..r.clone()
            })
            .collect();
        self.with_reviews(reviews)
    }

    /// Builds a dataset from raw records. `records` carries the 1-based
    /// source line of each entry for error messages.
    pub fn from_raw(
        records: Vec<(usize, RawReview)>,
        vocab: Option<Vec<String>>,
        scale: RatingScale,
    ) -> Result<Dataset> {
        for (line, rec) in &records {
            if !scale.contains(rec.rating) {
                return Err(Error::Validation(format!(
                    "line {line}: rating {} outside scale [{}, {}]",
                    rec.rating, scale.min, scale.max
                )));
            }
            for m in &rec.mentions {
                if m.polarity != 1 && m.polarity != -1 {
                    return Err(Error::Validation(format!(
                        "line {line}: polarity {} for feature {:?} must be 1 or -1",
                        m.polarity, m.feature
                    )));
                }
            }
        }

        let users: Vec<String> = records
            .iter()
            .map(|(_, r)| r.user.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let items: Vec<String> = records
            .iter()
            .map(|(_, r)| r.item.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let features: Vec<String> = match vocab {
            Some(v) => {
                let distinct: BTreeSet<&String> = v.iter().collect();
                if distinct.len() != v.len() {
                    return Err(Error::Validation("vocabulary contains duplicates".into()));
                }
                v
            }
            None => records
                .iter()
                .flat_map(|(_, r)| r.mentions.iter().map(|m| m.feature.clone()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let feature_ids: HashMap<&str, usize> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        let user_ids: HashMap<&str, usize> =
            users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let item_ids: HashMap<&str, usize> =
            items.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();

        // latest timestamp wins; on equal timestamps the later line wins
        let mut latest: BTreeMap<(usize, usize), (i64, usize, Review)> = BTreeMap::new();
        for (line, rec) in &records {
            let mut mentions = Vec::with_capacity(rec.mentions.len());
            for m in &rec.mentions {
                let feature = *feature_ids.get(m.feature.as_str()).ok_or_else(|| {
                    Error::Validation(format!(
                        "line {line}: feature {:?} not in vocabulary",
                        m.feature
                    ))
                })?;
                mentions.push(SentimentMention {
                    feature,
                    polarity: m.polarity as i8,
                    opinion: m.opinion.clone(),
                });
            }
            let review = Review {
                user: user_ids[rec.user.as_str()],
                item: item_ids[rec.item.as_str()],
                rating: rec.rating,
                timestamp: rec.ts,
                mentions,
            };
            let key = (review.user, review.item);
            let replace = match latest.get(&key) {
                Some((ts, ln, _)) => (rec.ts, *line) >= (*ts, *ln),
                None => true,
            };
            if replace {
                latest.insert(key, (rec.ts, *line, review));
            }
        }

        Ok(Dataset {
            users,
            items,
            features,
            reviews: latest.into_values().map(|(_, _, r)| r).collect(),
            scale,
        })
    }

    pub fn to_raw(&self) -> Vec<RawReview> {
        self.reviews
            .iter()
            .map(|r| RawReview {
                user: self.users[r.user].clone(),
                item: self.items[r.item].clone(),
                rating: r.rating,
                ts: r.timestamp,
                mentions: r
                    .mentions
                    .iter()
                    .map(|m| RawMention {
                        feature: self.features[m.feature].clone(),
                        polarity: m.polarity as i64,
                        opinion: m.opinion.clone(),
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut raw = self.to_raw();
        raw.sort_by(|a, b| (a.ts, &a.user, &a.item).cmp(&(b.ts, &b.user, &b.item)));
        for rec in raw {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
        }
        Ok(())
    }
}

/// Reads a JSON-lines review file. Blank lines are skipped.
pub fn parse_dataset(path: &Path, format: Format) -> Result<Dataset> {
    parse_dataset_with(path, format, None, RatingScale::default())
}

pub fn parse_dataset_with(
    path: &Path,
    format: Format,
    vocab: Option<Vec<String>>,
    scale: RatingScale,
) -> Result<Dataset> {
    let Format::JsonLines = format;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawReview = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push((line_no, rec));
    }
    Dataset::from_raw(records, vocab, scale)
}

/// Reads a vocabulary file: a JSON array of feature names.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sparse feature vector of one user or item. Absent keys are unknown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub side: Option<Side>,
    entries: BTreeMap<usize, f64>,
    /// Total mention count behind the profile (the normalisation divisor).
    total_mentions: u32,
}

impl FeatureProfile {
    pub fn new(side: Side) -> Self {
        FeatureProfile {
            side: Some(side),
            ..Default::default()
        }
    }

    pub fn from_entries(side: Side, entries: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let entries: BTreeMap<usize, f64> = entries.into_iter().collect();
        let total_mentions = entries.values().map(|v| v.abs()).sum::<f64>().round() as u32;
        FeatureProfile {
            side: Some(side),
            entries,
            total_mentions,
        }
    }

    pub fn get(&self, feature: usize) -> Option<f64> {
        self.entries.get(&feature).copied()
    }

    pub fn insert(&mut self, feature: usize, value: f64) {
        self.entries.insert(feature, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_mentions(&self) -> u32 {
        self.total_mentions
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    positive: u32,
    negative: u32,
}

fn profile_from_counts(side: Side, counts: &BTreeMap<usize, Counts>) -> FeatureProfile {
    let mut profile = FeatureProfile::new(side);
    for (&feature, c) in counts {
        if c.positive == 0 && c.negative == 0 {
            continue;
        }
        let value = match side {
            Side::User => (c.positive + c.negative) as f64,
            Side::Item => c.positive as f64 - c.negative as f64,
        };
        profile.entries.insert(feature, value);
        profile.total_mentions += c.positive + c.negative;
    }
    profile
}

fn tally<'a>(reviews: impl IntoIterator<Item = &'a Review>) -> BTreeMap<usize, Counts> {
    let mut counts: BTreeMap<usize, Counts> = BTreeMap::new();
    for m in reviews.into_iter().flat_map(|r| &r.mentions) {
        let c = counts.entry(m.feature).or_default();
        if m.polarity > 0 {
            c.positive += 1;
        } else {
            c.negative += 1;
        }
    }
    counts
}

/// Mention-frequency profile of a single user built from the given reviews.
pub fn user_profile_from_reviews<'a>(reviews: impl IntoIterator<Item = &'a Review>) -> FeatureProfile {
    profile_from_counts(Side::User, &tally(reviews))
}

fn build_profiles(ds: &Dataset, side: Side) -> Vec<FeatureProfile> {
    let n = match side {
        Side::User => ds.n_users(),
        Side::Item => ds.n_items(),
    };
    let mut per_entity: Vec<Vec<&Review>> = vec![Vec::new(); n];
    for r in &ds.reviews {
        let e = match side {
            Side::User => r.user,
            Side::Item => r.item,
        };
        per_entity[e].push(r);
    }
    per_entity
        .into_iter()
        .map(|rs| profile_from_counts(side, &tally(rs)))
        .collect()
}

/// `F_il = p_il + n_il` when user `i` mentioned feature `l`, absent otherwise.
pub fn build_user_profiles(ds: &Dataset) -> Vec<FeatureProfile> {
    build_profiles(ds, Side::User)
}

/// `F_jl = p_jl - n_jl` when item `j` was discussed on feature `l`, absent
/// otherwise. Balanced sentiment yields a present zero.
pub fn build_item_profiles(ds: &Dataset) -> Vec<FeatureProfile> {
    build_profiles(ds, Side::Item)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    #[default]
    PerEntityTotal,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "per-entity-total" => Ok(Normalization::PerEntityTotal),
            other => Err(Error::Validation(format!("unknown normalization {other:?}"))),
        }
    }
}

pub fn normalize_profile(profile: &FeatureProfile, mode: Normalization) -> Result<FeatureProfile> {
    match mode {
        Normalization::None => Ok(profile.clone()),
        Normalization::PerEntityTotal => {
            if profile.is_empty() {
                return Ok(profile.clone());
            }
            if profile.total_mentions == 0 {
                return Err(Error::Internal(
                    "profile has known features but zero mention total".into(),
                ));
            }
            let total = profile.total_mentions as f64;
            Ok(FeatureProfile {
                side: profile.side,
                entries: profile.entries.iter().map(|(&k, &v)| (k, v / total)).collect(),
                total_mentions: profile.total_mentions,
            })
        }
    }
}

pub fn normalize_profiles(
    profiles: &[FeatureProfile],
    mode: Normalization,
) -> Result<Vec<FeatureProfile>> {
    profiles.iter().map(|p| normalize_profile(p, mode)).collect()
}

/// Candidate thresholds per feature for one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationSpec {
    pub normalization: Normalization,
    pub bins: usize,
    pub thresholds: Vec<Vec<f64>>,
}

impl DiscretizationSpec {
    pub fn n_candidates(&self) -> usize {
        self.thresholds.iter().map(Vec::len).sum()
    }
}

/// Midpoints between consecutive distinct values, thinned to at most `bins`
/// by equal-frequency quantiles when there are more.
pub fn feature_thresholds(values: &[f64], bins: usize) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() == 1 {
        return distinct;
    }
    let midpoints: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let bins = bins.max(1);
    if midpoints.len() <= bins {
        return midpoints;
    }
    let n = sorted.len();
    let mut picked = BTreeSet::new();
    for q in 1..=bins {
        let rank = ((q * n) as f64 / (bins + 1) as f64).ceil() as usize;
        let rank = rank.clamp(1, n - 1);
        let below = sorted[rank - 1];
        // midpoint just above the value sitting at this quantile
        let idx = distinct.partition_point(|&d| d <= below) - 1;
        picked.insert(idx.min(midpoints.len() - 1));
    }
    picked.into_iter().map(|i| midpoints[i]).collect()
}

pub fn candidate_thresholds(
    profiles: &[FeatureProfile],
    n_features: usize,
    bins: usize,
    normalization: Normalization,
) -> DiscretizationSpec {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    for p in profiles {
        for (f, v) in p.iter() {
            if f < n_features {
                values[f].push(v);
            }
        }
    }
    DiscretizationSpec {
        normalization,
        bins,
        thresholds: values.iter().map(|v| feature_thresholds(v, bins)).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub min_feature_freq: usize,
    pub min_mentions_per_review: usize,
    pub min_reviews_per_user: usize,
    pub min_reviews_per_item: usize,
}

/// Recursive filtering to a fixed point. Each round drops, in order: rare
/// features (their mentions disappear), reviews with too few remaining
/// mentions, light users and light items. Surviving ids are re-assigned
/// preserving relative order.
pub fn filter_dataset(ds: &Dataset, th: &FilterThresholds) -> Result<Dataset> {
    let mut reviews = ds.reviews.clone();
    let mut live_features = vec![true; ds.n_features()];
    loop {
        let mut changed = false;

        let mut freq = vec![0usize; ds.n_features()];
        for m in reviews.iter().flat_map(|r| &r.mentions) {
            freq[m.feature] += 1;
        }
        for (f, live) in live_features.iter_mut().enumerate() {
            if *live && freq[f] < th.min_feature_freq {
                *live = false;
                changed = true;
            }
        }
        for r in &mut reviews {
            let before = r.mentions.len();
            r.mentions.retain(|m| live_features[m.feature]);
            changed |= r.mentions.len() != before;
        }

        let before = reviews.len();
        reviews.retain(|r| r.mentions.len() >= th.min_mentions_per_review);
        changed |= reviews.len() != before;

        let mut per_user = vec![0usize; ds.n_users()];
        for r in &reviews {
            per_user[r.user] += 1;
        }
        let before = reviews.len();
        reviews.retain(|r| per_user[r.user] >= th.min_reviews_per_user);
        changed |= reviews.len() != before;

        let mut per_item = vec![0usize; ds.n_items()];
        for r in &reviews {
            per_item[r.item] += 1;
        }
        let before = reviews.len();
        reviews.retain(|r| per_item[r.item] >= th.min_reviews_per_item);
        changed |= reviews.len() != before;

        if !changed {
            break;
        }
    }
    if reviews.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }

    let remap = |present: Vec<bool>| -> Vec<Option<usize>> {
        let mut next = 0;
        present
            .into_iter()
            .map(|p| {
                p.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let mut user_present = vec![false; ds.n_users()];
    let mut item_present = vec![false; ds.n_items()];
    for r in &reviews {
        user_present[r.user] = true;
        item_present[r.item] = true;
    }
    let user_map = remap(user_present);
    let item_map = remap(item_present);
    let feature_map = remap(live_features);

    let pick = |names: &[String], map: &[Option<usize>]| -> Vec<String> {
        names
            .iter()
            .zip(map)
            .filter(|(_, m)| m.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    };
    let reviews = reviews
        .into_iter()
        .map(|r| Review {
            user: user_map[r.user].expect("live user"),
            item: item_map[r.item].expect("live item"),
            mentions: r
                .mentions
                .into_iter()
                .map(|m| SentimentMention {
                    feature: feature_map[m.feature].expect("live feature"),
                    ..m
                })
                .collect(),
            ..r
        })
        .collect::<Vec<_>>();
    Ok(Dataset {
        users: pick(&ds.users, &user_map),
        items: pick(&ds.items, &item_map),
        features: pick(&ds.features, &feature_map),
        reviews,
        scale: ds.scale,
    })
}
