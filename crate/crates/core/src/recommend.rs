//! Scoring, top-K, path-based explanations and the cold-start interview.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{dot, FactorMatrix};
use crate::ingest::{user_profile_from_reviews, FeatureProfile, Review, Side};
use crate::train::FacTModel;
use crate::tree::{route, Branch, FactorTree, Predicate};

pub fn predict(user_factor: &[f64], item_factor: &[f64]) -> f64 {
    assert_eq!(user_factor.len(), item_factor.len(), "factor dimensions differ");
    dot(user_factor, item_factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub item: usize,
    pub score: f64,
}

/// Top `k` items by score, ties to the lower id, skipping `exclude`.
pub fn rank_items(user_factor: &[f64], items: &FactorMatrix, k: usize, exclude: &[usize]) -> Vec<Scored> {
    let scores: Vec<f64> = (0..items.rows()).map(|j| dot(user_factor, items.row(j))).collect();
    rank_scores(&scores, k, exclude)
}

/// Top `k` of `scores`, best first, ties to the lower id; `exclude` may be
/// in any order.
pub fn rank_scores(scores: &[f64], k: usize, exclude: &[usize]) -> Vec<Scored> {
    let sorted;
    let exclude = if exclude.is_sorted() {
        exclude
    } else {
        let mut v = exclude.to_vec();
        v.sort_unstable();
        sorted = v;
        &sorted
    };
    let mut out: Vec<Scored> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| exclude.binary_search(j).is_err())
        .map(|(item, &score)| Scored { item, score })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    out.truncate(k);
    out
}

/// Whose factor to rank with.
#[derive(Clone, Copy, Debug)]
pub enum UserQuery<'a> {
    /// A training user by id.
    Id(usize),
    /// A training user by name.
    Name(&'a str),
    /// Any user described by a raw (unnormalised) profile.
    Profile(&'a FeatureProfile),
}

/// Resolves a query to `(user factor, user-tree path, known user id)`.
pub fn resolve_user(model: &FacTModel, query: UserQuery<'_>) -> Result<(Vec<f64>, Vec<usize>, Option<usize>)> {
    let id = match query {
        UserQuery::Id(u) if u < model.n_users() => u,
        UserQuery::Id(u) => return Err(Error::UnknownUser(u.to_string())),
        UserQuery::Name(name) => model
            .user_index(name)
            .ok_or_else(|| Error::UnknownUser(name.to_string()))?,
        UserQuery::Profile(p) => {
            let p = model.normalize_user_profile(p)?;
            let path = route(&model.user_tree, &p);
            let leaf = *path.last().expect("non-empty path");
            return Ok((model.user_tree.node(leaf).accumulated.clone(), path, None));
        }
    };
    Ok((model.user_factor(id), model.user_tree.path_of_entity(id), Some(id)))
}

pub fn recommend_topk(model: &FacTModel, query: UserQuery<'_>, k: usize, exclude_seen: bool) -> Result<Vec<Scored>> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let (u, _, id) = resolve_user(model, query)?;
    let exclude: &[usize] = match (exclude_seen, id) {
        (true, Some(id)) => &model.seen[id],
        _ => &[],
    };
    Ok(rank_items(&u, &model.item_factors(), k, exclude))
}

/// One feature named by an explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainedFeature {
    pub feature: String,
    pub feature_id: usize,
    /// Branch the user took at this feature, if it is on the user path.
    pub user_branch: Option<Branch>,
    pub item_branch: Option<Branch>,
    /// Deepest tree level at which the feature is tested.
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub item: String,
    pub shared_features: Vec<ExplainedFeature>,
    pub fallback_features: Vec<ExplainedFeature>,
    pub rendered: String,
}

impl Explanation {
    /// Features actually named in the rendered text, in order.
    pub fn features(&self) -> impl Iterator<Item = &ExplainedFeature> {
        self.shared_features.iter().chain(&self.fallback_features)
    }
}

/// Explanation templates. `{clauses}`, `{feature}`, `{user_modifier}` and
/// `{item_modifier}` are substituted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub because: String,
    pub guess: String,
    pub generic: String,
    pub shared_clause: String,
    pub user_clause: String,
    pub item_clause: String,
    /// Keyed by branch code `L`, `R`, `E`.
    pub user_modifiers: BTreeMap<String, Vec<String>>,
    pub item_modifiers: BTreeMap<String, Vec<String>>,
    pub question: String,
    /// Maximum number of features named in one explanation.
    pub max_features: usize,
    /// Shared features below this count trigger the union fallback.
    pub min_features: usize,
}

const DEFAULT_TEMPLATES: &str = include_str!("templates.json");

impl Default for Templates {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATES).expect("built-in templates parse")
    }
}

impl Templates {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Templates = serde_json::from_str(text)?;
        for code in ["L", "R", "E"] {
            for (name, map) in [("user_modifiers", &t.user_modifiers), ("item_modifiers", &t.item_modifiers)] {
                if map.get(code).is_none_or(Vec::is_empty) {
                    return Err(Error::Validation(format!("{name} has no entry for branch {code}")));
                }
            }
        }
        Ok(t)
    }

    pub fn question_for(&self, feature: &str) -> String {
        self.question.replace("{feature}", feature)
    }
}

/// FNV-1a, used to vary wording deterministically per (user, item).
fn fnv(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain([0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn pick(options: &[String], key: u64, salt: u64) -> &str {
    &options[((key ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)) % options.len() as u64) as usize]
}

/// `feature -> (branch, depth)` along a path.
fn path_features(tree: &FactorTree, path: &[usize]) -> BTreeMap<usize, (Branch, usize)> {
    tree.path_rules(path)
        .into_iter()
        .map(|(p, b, depth)| (p.feature, (b, depth)))
        .collect()
}

/// Builds an explanation from a user-tree path and an item-tree path.
/// `key` seeds the wording choice.
pub fn explain_paths(
    model: &FacTModel,
    templates: &Templates,
    user_path: &[usize],
    item: usize,
    key: &str,
) -> Explanation {
    let item_path = model.item_tree.path_of_entity(item);
    let uf = path_features(&model.user_tree, user_path);
    let vf = path_features(&model.item_tree, &item_path);
    let make = |f: usize| {
        let u = uf.get(&f);
        let v = vf.get(&f);
        ExplainedFeature {
            feature: model.vocab[f].clone(),
            feature_id: f,
            user_branch: u.map(|x| x.0),
            item_branch: v.map(|x| x.0),
            level: u.map(|x| x.1).max(v.map(|x| x.1)).unwrap_or(0),
        }
    };
    // deeper first, then feature id
    let by_depth = |a: &ExplainedFeature, b: &ExplainedFeature| b.level.cmp(&a.level).then(a.feature_id.cmp(&b.feature_id));

    let mut shared: Vec<ExplainedFeature> = uf.keys().filter(|f| vf.contains_key(f)).map(|&f| make(f)).collect();
    shared.sort_by(by_depth);
    shared.truncate(templates.max_features);
    let mut fallback = Vec::new();
    if shared.len() < templates.min_features {
        let union: BTreeSet<usize> = uf.keys().chain(vf.keys()).copied().collect();
        fallback = union
            .into_iter()
            .filter(|f| !shared.iter().any(|s| s.feature_id == *f))
            .map(make)
            .collect();
        fallback.sort_by(by_depth);
        fallback.truncate(templates.max_features - shared.len());
    }

    let item_name = &model.items[item];
    let h = fnv(&[key, item_name]);
    let modifier = |map: &BTreeMap<String, Vec<String>>, b: Branch, salt: u64| {
        pick(&map[b.code()], h, salt).to_string()
    };
    let clause = |f: &ExplainedFeature, salt: u64| {
        let t = match (f.user_branch, f.item_branch) {
            (Some(_), Some(_)) => &templates.shared_clause,
            (Some(_), None) => &templates.user_clause,
            _ => &templates.item_clause,
        };
        let mut s = t.replace("{feature}", &f.feature);
        if let Some(b) = f.user_branch {
            s = s.replace("{user_modifier}", &modifier(&templates.user_modifiers, b, salt));
        }
        if let Some(b) = f.item_branch {
            s = s.replace("{item_modifier}", &modifier(&templates.item_modifiers, b, salt + 1));
        }
        s
    };
    let clauses: Vec<String> = shared
        .iter()
        .chain(&fallback)
        .enumerate()
        .map(|(k, f)| clause(f, 2 * k as u64))
        .collect();
    let rendered = if clauses.is_empty() {
        templates.generic.clone()
    } else {
        let joined = match clauses.len() {
            1 => clauses[0].clone(),
            n => format!("{} and {}", clauses[..n - 1].join(", "), clauses[n - 1]),
        };
        let pattern = if shared.is_empty() { &templates.guess } else { &templates.because };
        pattern.replace("{clauses}", &joined)
    };
    Explanation {
        item: item_name.clone(),
        shared_features: shared,
        fallback_features: fallback,
        rendered,
    }
}

/// Explanation for a training user and an item.
pub fn explain(model: &FacTModel, templates: &Templates, user: usize, item: usize) -> Result<Explanation> {
    if user >= model.n_users() {
        return Err(Error::UnknownUser(user.to_string()));
    }
    if item >= model.n_items() {
        return Err(Error::UnknownItem(item.to_string()));
    }
    let path = model.user_tree.path_of_entity(user);
    Ok(explain_paths(model, templates, &path, item, &model.users[user]))
}

/// Checks that an explanation only names features found on the user or
/// item path, that shared features are on both with the recorded branches,
/// and that the text names no other vocabulary feature.
pub fn validate_explanation(
    model: &FacTModel,
    user_path: &[usize],
    item: usize,
    exp: &Explanation,
) -> std::result::Result<(), String> {
    let uf = path_features(&model.user_tree, user_path);
    let vf = path_features(&model.item_tree, &model.item_tree.path_of_entity(item));
    for f in &exp.shared_features {
        if uf.get(&f.feature_id).map(|x| x.0) != f.user_branch || f.user_branch.is_none() {
            return Err(format!("shared feature {} not on user path as recorded", f.feature));
        }
        if vf.get(&f.feature_id).map(|x| x.0) != f.item_branch || f.item_branch.is_none() {
            return Err(format!("shared feature {} not on item path as recorded", f.feature));
        }
    }
    for f in exp.features() {
        if !uf.contains_key(&f.feature_id) && !vf.contains_key(&f.feature_id) {
            return Err(format!("feature {} is on neither path", f.feature));
        }
        if model.vocab.get(f.feature_id) != Some(&f.feature) {
            return Err(format!("feature {} has wrong id {}", f.feature, f.feature_id));
        }
        if !exp.rendered.contains(&f.feature) {
            return Err(format!("feature {} missing from text", f.feature));
        }
    }
    let named: BTreeSet<usize> = exp.features().map(|f| f.feature_id).collect();
    for (id, name) in model.vocab.iter().enumerate() {
        if named.contains(&id) || uf.contains_key(&id) || vf.contains_key(&id) {
            continue;
        }
        if mentions_word(&exp.rendered, name) {
            return Err(format!("text names off-path feature {name}"));
        }
    }
    Ok(())
}

fn mentions_word(text: &str, word: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(word).any(|(at, _)| {
        let before = text[..at].chars().next_back();
        let after = text[at + word.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// Profile of a new user from their first `k` reviews (chronological).
pub fn cold_start_profile(history: &[&Review], k: usize) -> FeatureProfile {
    let mut p = user_profile_from_reviews(history.iter().take(k).copied());
    p.side = Some(Side::User);
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Like,
    Dislike,
    Unknown,
}

impl Answer {
    pub const ALL: [Answer; 3] = [Answer::Like, Answer::Dislike, Answer::Unknown];

    pub fn branch(self) -> Branch {
        match self {
            Answer::Like => Branch::AtLeast,
            Answer::Dislike => Branch::Below,
            Answer::Unknown => Branch::Unknown,
        }
    }
}

impl std::str::FromStr for Answer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "like" | "l" => Ok(Answer::Like),
            "dislike" | "d" => Ok(Answer::Dislike),
            "unknown" | "u" | "not sure" => Ok(Answer::Unknown),
            other => Err(Error::Validation(format!("answer must be like, dislike or unknown, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub feature: String,
    pub feature_id: usize,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub feature: String,
    pub feature_id: usize,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterviewSession {
    pub session_id: String,
    /// Current user-tree node.
    pub node: usize,
    /// Nodes visited, root first.
    pub path: Vec<usize>,
    pub answers: Vec<AnswerRecord>,
    pub status: SessionStatus,
}

/// Random 128-bit hex id.
pub fn new_session_id() -> String {
    let bytes: [u8; 16] = rand::random();
    hex::encode(bytes)
}

pub fn interview_start(model: &FacTModel) -> InterviewSession {
    InterviewSession::start(model, new_session_id())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: String,
    pub item_id: usize,
    pub score: f64,
    pub explanation: Explanation,
}

impl InterviewSession {
    pub fn start(model: &FacTModel, session_id: String) -> Self {
        let root = &model.user_tree.nodes[0];
        InterviewSession {
            session_id,
            node: 0,
            path: vec![0],
            answers: Vec::new(),
            status: if root.is_leaf() {
                SessionStatus::Finished
            } else {
                SessionStatus::Active
            },
        }
    }

    pub fn is_finished(&self) -> bool {
        self.status == SessionStatus::Finished
    }

    fn predicate(&self, model: &FacTModel) -> Option<Predicate> {
        model.user_tree.node(self.node).predicate
    }

    /// The pending question, `None` once finished.
    pub fn question(&self, model: &FacTModel, templates: &Templates) -> Option<Question> {
        self.predicate(model).map(|p| {
            let name = &model.vocab[p.feature];
            Question {
                feature: name.clone(),
                feature_id: p.feature,
                prompt: templates.question_for(name),
            }
        })
    }

    pub fn answer(&mut self, model: &FacTModel, answer: Answer) -> Result<()> {
        let (Some(pred), SessionStatus::Active) = (self.predicate(model), self.status) else {
            return Err(Error::State("session is finished".into()));
        };
        let next = model
            .user_tree
            .child(self.node, answer.branch())
            .expect("internal node has children");
        self.answers.push(AnswerRecord {
            feature: model.vocab[pred.feature].clone(),
            feature_id: pred.feature,
            answer,
        });
        self.node = next;
        self.path.push(next);
        if model.user_tree.node(next).is_leaf() {
            self.status = SessionStatus::Finished;
        }
        Ok(())
    }

    /// The reached leaf's accumulated vector.
    pub fn user_factor(&self, model: &FacTModel) -> Vec<f64> {
        model.user_tree.node(self.node).accumulated.clone()
    }

    pub fn recommend(&self, model: &FacTModel, templates: &Templates, k: usize) -> Result<Vec<Recommendation>> {
        if !self.is_finished() {
            return Err(Error::State("interview is not finished".into()));
        }
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        let u = self.user_factor(model);
        Ok(rank_items(&u, &model.item_factors(), k, &[])
            .into_iter()
            .map(|s| Recommendation {
                item: model.items[s.item].clone(),
                item_id: s.item,
                score: s.score,
                explanation: explain_paths(model, templates, &self.path, s.item, &self.session_id),
            })
            .collect())
    }
}

/// A user profile that routes the way `answers` steer the interview from
/// the root: a like sits at the threshold, a dislike one below it and an
/// unknown leaves the feature absent.
pub fn encode_answers(tree: &FactorTree, answers: &[Answer]) -> FeatureProfile {
    let mut profile = FeatureProfile::new(Side::User);
    let mut node = 0;
    for &a in answers {
        let Some(pred) = tree.node(node).predicate else {
            break;
        };
        match a {
            Answer::Like => profile.insert(pred.feature, pred.threshold),
            Answer::Dislike => profile.insert(pred.feature, pred.threshold - 1.0),
            Answer::Unknown => {}
        }
        node = tree.child(node, a.branch()).expect("internal node");
    }
    profile
}
