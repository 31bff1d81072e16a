//! Rule induction: ternary factor trees.
//!
//! A predicate `(feature, threshold)` sends an entity to `L` when its
//! profile value is at least the threshold, to `R` when it is below, and to
//! `E` when the feature is unknown for it. A node's split is chosen by
//! fitting one shared residual per child on top of the node's accumulated
//! vector and keeping the candidate with the lowest fitted objective.
//!
//! For users the node objective covers the members' ratings and their BPR
//! pairs. For items it covers the members' ratings and the BPR pairs whose
//! two items both belong to the node; pairs inside one child are constant.
//!
//! A feature is never tested twice on one root-to-leaf path, so every path
//! reads as a set of distinct interview questions.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{
    solver, BprPairSet, FactorMatrix, GroupProblem, Hyperparams, ObservationSet, Slot,
};
use crate::ingest::{DiscretizationSpec, FeatureProfile, Observation, Side};
use crate::seed::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: usize,
    pub threshold: f64,
}

/// Outcome of a predicate on one profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    /// Value at or above the threshold.
    #[serde(rename = "L")]
    AtLeast,
    /// Value below the threshold.
    #[serde(rename = "R")]
    Below,
    /// Feature unknown for the entity.
    #[serde(rename = "E")]
    Unknown,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::AtLeast, Branch::Below, Branch::Unknown];

    pub fn index(self) -> usize {
        match self {
            Branch::AtLeast => 0,
            Branch::Below => 1,
            Branch::Unknown => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Branch::AtLeast => "L",
            Branch::Below => "R",
            Branch::Unknown => "E",
        }
    }
}

impl Predicate {
    pub fn branch(&self, profile: &FeatureProfile) -> Branch {
        match profile.get(self.feature) {
            None => Branch::Unknown,
            Some(v) if v >= self.threshold => Branch::AtLeast,
            Some(_) => Branch::Below,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub unknown: Vec<usize>,
}

impl Partition {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.left, &self.right, &self.unknown]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.left.len(), self.right.len(), self.unknown.len()]
    }

    /// True when every entity lands in the same child.
    pub fn is_degenerate(&self) -> bool {
        self.sizes().iter().filter(|&&s| s > 0).count() < 2
    }
}

/// Three-way split of `entities`. Each part is sorted by entity id.
pub fn partition(entities: &[usize], profiles: &[FeatureProfile], predicate: &Predicate) -> Partition {
    let mut out = Partition::default();
    for &e in entities {
        match predicate.branch(&profiles[e]) {
            Branch::AtLeast => out.left.push(e),
            Branch::Below => out.right.push(e),
            Branch::Unknown => out.unknown.push(e),
        }
    }
    out.left.sort_unstable();
    out.right.sort_unstable();
    out.unknown.sort_unstable();
    out
}

/// Diagnostics recorded for every executed split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    /// Fitted objective of the three children.
    pub objective: f64,
    /// Objective with every member scored by the node's own vector.
    pub unsplit_objective: f64,
    pub sizes: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub predicate: Option<Predicate>,
    /// `[L, R, E]` child ids.
    pub children: Option<[usize; 3]>,
    #[serde(with = "crate::persist::b64")]
    pub residual: Vec<f64>,
    #[serde(with = "crate::persist::b64")]
    pub accumulated: Vec<f64>,
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitStats>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTree {
    pub side: Side,
    pub max_depth: usize,
    pub dim: usize,
    pub n_entities: usize,
    pub nodes: Vec<TreeNode>,
    #[serde(skip)]
    entity_leaf: Vec<usize>,
}

impl FactorTree {
    pub fn new(side: Side, max_depth: usize, dim: usize, n_entities: usize, nodes: Vec<TreeNode>) -> Self {
        let mut tree = FactorTree {
            side,
            max_depth,
            dim,
            n_entities,
            nodes,
            entity_leaf: Vec::new(),
        };
        tree.reindex();
        tree
    }

    /// Rebuilds the entity-to-leaf lookup from leaf member lists.
    pub fn reindex(&mut self) {
        let mut leaf = vec![0; self.n_entities];
        for node in self.nodes.iter().filter(|n| n.is_leaf()) {
            for &e in &node.members {
                leaf[e] = node.id;
            }
        }
        self.entity_leaf = leaf;
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Number of levels actually grown (1 for a single-node tree).
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth + 1).max().unwrap_or(0)
    }

    pub fn leaf_of(&self, entity: usize) -> usize {
        self.entity_leaf[entity]
    }

    /// Node ids from the root down to `node`.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn path_of_entity(&self, entity: usize) -> Vec<usize> {
        self.path_to(self.leaf_of(entity))
    }

    /// Child reached from `node` on `branch`.
    pub fn child(&self, node: usize, branch: Branch) -> Option<usize> {
        self.nodes[node].children.map(|c| c[branch.index()])
    }

    /// `(predicate, branch taken, depth)` for every internal node on a path.
    pub fn path_rules(&self, path: &[usize]) -> Vec<(Predicate, Branch, usize)> {
        path.windows(2)
            .map(|w| {
                let node = &self.nodes[w[0]];
                let children = node.children.expect("internal node");
                let branch = Branch::ALL[children.iter().position(|&c| c == w[1]).expect("child")];
                (node.predicate.expect("internal node"), branch, node.depth)
            })
            .collect()
    }

    pub fn features_used(&self) -> BTreeSet<usize> {
        self.nodes
            .iter()
            .filter_map(|n| n.predicate.map(|p| p.feature))
            .collect()
    }

    /// Leaf accumulated vector for every entity.
    pub fn entity_factors(&self) -> FactorMatrix {
        let mut m = FactorMatrix::zeros(self.n_entities, self.dim);
        for e in 0..self.n_entities {
            m.set_row(e, &self.nodes[self.leaf_of(e)].accumulated);
        }
        m
    }
}

/// Follows the branch rules from the root; returns the full node path.
pub fn route(tree: &FactorTree, profile: &FeatureProfile) -> Vec<usize> {
    let mut path = vec![0];
    let mut cur = 0;
    while let (Some(pred), Some(children)) = (tree.nodes[cur].predicate, tree.nodes[cur].children) {
        cur = children[pred.branch(profile).index()];
        path.push(cur);
    }
    path
}

/// Everything a split fit needs besides the member set.
#[derive(Clone, Copy)]
pub struct TreeContext<'a> {
    pub side: Side,
    pub profiles: &'a [FeatureProfile],
    pub counterpart: &'a FactorMatrix,
    pub obs: &'a ObservationSet,
    pub pairs: &'a BprPairSet,
    pub hp: &'a Hyperparams,
    /// Children refine the parent vector (`true`) or are fitted from zero.
    pub use_parent_factors: bool,
}

impl TreeContext<'_> {
    fn n_entities(&self) -> usize {
        self.obs.n_entities(self.side)
    }

    fn lambda(&self) -> f64 {
        self.hp.lambda(self.side)
    }
}

/// Observations and BPR pairs that belong to a node, in canonical order.
struct NodeScope<'a> {
    obs: Vec<&'a Observation>,
    pairs: Vec<(usize, usize, usize)>,
}

fn node_scope<'a>(ctx: &TreeContext<'a>, members: &[usize]) -> NodeScope<'a> {
    match ctx.side {
        Side::User => {
            let mut sorted = members.to_vec();
            sorted.sort_unstable();
            let obs = sorted.iter().flat_map(|&u| ctx.obs.of_user(u)).collect();
            let pairs = if ctx.hp.lambda_b == 0.0 {
                Vec::new()
            } else {
                sorted
                    .iter()
                    .flat_map(|&u| ctx.pairs.of_user(u).iter().map(move |&(j, l)| (u, j, l)))
                    .collect()
            };
            NodeScope { obs, pairs }
        }
        Side::Item => {
            let mut inside = vec![false; ctx.n_entities()];
            for &m in members {
                inside[m] = true;
            }
            let obs = ctx.obs.entries().iter().filter(|o| inside[o.item]).collect();
            let pairs = if ctx.hp.lambda_b == 0.0 {
                Vec::new()
            } else {
                (0..ctx.pairs.n_users())
                    .flat_map(|u| ctx.pairs.of_user(u).iter().map(move |&(j, l)| (u, j, l)))
                    .filter(|&(_, j, l)| inside[j] && inside[l])
                    .collect()
            };
            NodeScope { obs, pairs }
        }
    }
}

fn grouped_problem<'a>(
    ctx: &TreeContext<'a>,
    scope: &NodeScope<'_>,
    groups: &[&[usize]],
    bases: FactorMatrix,
) -> GroupProblem<'a> {
    let mut slots = vec![Slot::Excluded; ctx.n_entities()];
    for (g, members) in groups.iter().enumerate() {
        for &e in *members {
            slots[e] = Slot::Group(g);
        }
    }
    GroupProblem::build_from(
        ctx.side,
        ctx.counterpart,
        None,
        |e| slots[e],
        bases,
        scope.obs.iter().copied(),
        scope.pairs.iter().copied(),
        ctx.lambda(),
        ctx.hp.lambda_b,
    )
}

fn repeat_rows(v: &[f64], n: usize) -> FactorMatrix {
    FactorMatrix::from_rows(v.len(), &vec![v.to_vec(); n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub predicate: Predicate,
    pub partition: Partition,
    /// Residuals for `[L, R, E]` relative to the parent's accumulated vector.
    pub residuals: [Vec<f64>; 3],
    /// Child vectors `parent + residual`.
    pub accumulated: [Vec<f64>; 3],
    pub objective: f64,
    pub unsplit_objective: f64,
}

impl SplitResult {
    pub fn sizes(&self) -> [usize; 3] {
        self.partition.sizes()
    }
}

/// Objective of a member set when everyone shares `vector`.
pub fn unsplit_objective(ctx: &TreeContext<'_>, members: &[usize], vector: &[f64]) -> f64 {
    let scope = node_scope(ctx, members);
    let problem = grouped_problem(ctx, &scope, &[members], repeat_rows(vector, 1));
    problem.objective(&vec![0.0; vector.len()])
}

fn evaluate_in_scope(
    ctx: &TreeContext<'_>,
    scope: &NodeScope<'_>,
    predicate: Predicate,
    partition: Partition,
    parent_accumulated: &[f64],
    seed: u64,
) -> Result<SplitResult> {
    let d = parent_accumulated.len();
    let bases = if ctx.use_parent_factors {
        repeat_rows(parent_accumulated, 3)
    } else {
        FactorMatrix::zeros(3, d)
    };
    let problem = grouped_problem(ctx, scope, &partition.parts(), bases);
    let outcome = solver::fit(&problem, &vec![0.0; 3 * d], ctx.hp, seed)?;
    let unsplit = if ctx.use_parent_factors {
        outcome.initial_objective
    } else {
        let all: Vec<&[usize]> = vec![&partition.left, &partition.right, &partition.unknown];
        let merged: Vec<usize> = all.concat();
        let p = grouped_problem(ctx, scope, &[&merged], repeat_rows(parent_accumulated, 1));
        p.objective(&vec![0.0; d])
    };
    let mut residuals: [Vec<f64>; 3] = Default::default();
    let mut accumulated: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let fitted = &outcome.residuals[c * d..(c + 1) * d];
        residuals[c] = if ctx.use_parent_factors {
            fitted.to_vec()
        } else {
            // free child vector, stored relative to the parent
            fitted.iter().zip(parent_accumulated).map(|(v, p)| v - p).collect()
        };
        accumulated[c] = parent_accumulated
            .iter()
            .zip(&residuals[c])
            .map(|(p, r)| p + r)
            .collect();
    }
    Ok(SplitResult {
        predicate,
        partition,
        residuals,
        accumulated,
        objective: outcome.objective,
        unsplit_objective: unsplit,
    })
}

/// Fits the three children of `predicate` on `entities`.
pub fn evaluate_split(
    ctx: &TreeContext<'_>,
    entities: &[usize],
    predicate: Predicate,
    parent_accumulated: &[f64],
    seed: u64,
) -> Result<SplitResult> {
    let scope = node_scope(ctx, entities);
    let part = partition(entities, ctx.profiles, &predicate);
    evaluate_in_scope(ctx, &scope, predicate, part, parent_accumulated, seed)
}

/// Seed used for candidate `(feature, threshold_index)` under `node_seed`.
pub fn candidate_seed(node_seed: u64, feature: usize, threshold_index: usize) -> u64 {
    seed::derive(node_seed, &[tag::CANDIDATE, feature as u64, threshold_index as u64])
}

/// Exhaustive search over every non-degenerate `(feature, threshold)`
/// candidate not in `excluded_features`. Ties go to the lower feature id,
/// then the lower threshold. `Ok(None)` means no candidate separates the
/// entities.
pub fn select_predicate(
    ctx: &TreeContext<'_>,
    entities: &[usize],
    spec: &DiscretizationSpec,
    parent_accumulated: &[f64],
    excluded_features: &BTreeSet<usize>,
    node_seed: u64,
) -> Result<Option<SplitResult>> {
    let candidates: Vec<(usize, usize, Predicate, Partition)> = spec
        .thresholds
        .iter()
        .enumerate()
        .filter(|(f, _)| !excluded_features.contains(f))
        .flat_map(|(f, ts)| {
            ts.iter().enumerate().map(move |(ti, &threshold)| {
                (f, ti, Predicate { feature: f, threshold })
            })
        })
        .filter_map(|(f, ti, pred)| {
            let part = partition(entities, ctx.profiles, &pred);
            (!part.is_degenerate()).then_some((f, ti, pred, part))
        })
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let scope = node_scope(ctx, entities);
    let results: Vec<Result<SplitResult>> = candidates
        .into_par_iter()
        .map(|(f, ti, pred, part)| {
            evaluate_in_scope(ctx, &scope, pred, part, parent_accumulated, candidate_seed(node_seed, f, ti))
        })
        .collect();
    let mut best: Option<SplitResult> = None;
    for r in results {
        let r = r?;
        let better = match &best {
            None => true,
            Some(b) => r.objective < b.objective,
        };
        if better {
            best = Some(r);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowOptions {
    /// Maximum number of levels; 1 is a single shared vector.
    pub max_depth: usize,
    /// Nodes with at most this many members are not split.
    pub min_node_size: usize,
}

impl Default for GrowOptions {
    fn default() -> Self {
        GrowOptions {
            max_depth: 6,
            min_node_size: 1,
        }
    }
}

pub fn node_seed(tree_seed: u64, node_id: usize) -> u64 {
    seed::derive(tree_seed, &[tag::NODE, node_id as u64])
}

/// Grows a tree over `entities` breadth first. Node ids follow creation
/// order and each node's fits draw from a stream keyed by its id.
pub fn grow(
    ctx: &TreeContext<'_>,
    entities: &[usize],
    spec: &DiscretizationSpec,
    opts: &GrowOptions,
    tree_seed: u64,
) -> Result<FactorTree> {
    if opts.max_depth == 0 {
        return Err(Error::Config("tree depth must be at least 1".into()));
    }
    let d = ctx.hp.d;
    let mut members: Vec<usize> = entities.to_vec();
    members.sort_unstable();

    let scope = node_scope(ctx, &members);
    let problem = grouped_problem(ctx, &scope, &[&members], FactorMatrix::zeros(1, d));
    let root_fit = solver::fit(&problem, &vec![0.0; d], ctx.hp, node_seed(tree_seed, 0))?;
    let mut nodes = vec![TreeNode {
        id: 0,
        parent: None,
        depth: 0,
        predicate: None,
        children: None,
        residual: root_fit.residuals.clone(),
        accumulated: root_fit.residuals,
        members,
        split: None,
    }];

    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let node = &nodes[id];
        if node.depth + 1 >= opts.max_depth || node.members.len() <= opts.min_node_size {
            continue;
        }
        let excluded: BTreeSet<usize> = {
            let mut used = BTreeSet::new();
            let mut cur = node.parent;
            while let Some(p) = cur {
                if let Some(pred) = nodes[p].predicate {
                    used.insert(pred.feature);
                }
                cur = nodes[p].parent;
            }
            used
        };
        let Some(split) = select_predicate(
            ctx,
            &node.members,
            spec,
            &node.accumulated,
            &excluded,
            node_seed(tree_seed, id),
        )?
        else {
            continue;
        };
        let depth = node.depth + 1;
        let first = nodes.len();
        let sizes = split.sizes();
        let SplitResult {
            predicate,
            partition,
            residuals,
            accumulated,
            objective,
            unsplit_objective,
        } = split;
        let parts = [partition.left, partition.right, partition.unknown];
        for (c, ((part, residual), acc)) in parts.into_iter().zip(residuals).zip(accumulated).enumerate() {
            nodes.push(TreeNode {
                id: first + c,
                parent: Some(id),
                depth,
                predicate: None,
                children: None,
                residual,
                accumulated: acc,
                members: part,
                split: None,
            });
            queue.push_back(first + c);
        }
        let node = &mut nodes[id];
        node.predicate = Some(predicate);
        node.children = Some([first, first + 1, first + 2]);
        node.split = Some(SplitStats {
            objective,
            unsplit_objective,
            sizes,
        });
    }
    Ok(FactorTree::new(
        ctx.side,
        opts.max_depth,
        d,
        ctx.n_entities(),
        nodes,
    ))
}

/// Per-entity residuals on top of each entity's leaf vector, each fitted on
/// the entity's own ratings and BPR pairs. For items, the other item of a
/// pair keeps its tree vector. Entities without data get zero.
pub fn fit_personal_residuals(
    tree: &FactorTree,
    ctx: &TreeContext<'_>,
    base_seed: u64,
) -> Result<FactorMatrix> {
    let d = tree.dim;
    let n = tree.n_entities;
    let tree_vectors = tree.entity_factors();
    let pairs_by_item: Vec<Vec<(usize, usize, usize)>> = match ctx.side {
        Side::User => Vec::new(),
        Side::Item => {
            let mut by_item = vec![Vec::new(); n];
            if ctx.hp.lambda_b != 0.0 {
                for u in 0..ctx.pairs.n_users() {
                    for &(j, l) in ctx.pairs.of_user(u) {
                        by_item[j].push((u, j, l));
                        by_item[l].push((u, j, l));
                    }
                }
            }
            by_item
        }
    };
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|e| {
            let base = &tree_vectors.row(e).to_vec();
            let bases = repeat_rows(base, 1);
            let slot_of = |x: usize| if x == e { Slot::Group(0) } else { Slot::Fixed };
            let problem = match ctx.side {
                Side::User => GroupProblem::build_from(
                    Side::User,
                    ctx.counterpart,
                    None,
                    slot_of,
                    bases,
                    ctx.obs.of_user(e),
                    ctx.pairs.of_user(e).iter().map(|&(j, l)| (e, j, l)),
                    ctx.lambda(),
                    ctx.hp.lambda_b,
                ),
                Side::Item => GroupProblem::build_from(
                    Side::Item,
                    ctx.counterpart,
                    Some(&tree_vectors),
                    slot_of,
                    bases,
                    ctx.obs.of_item(e),
                    pairs_by_item[e].iter().copied(),
                    ctx.lambda(),
                    ctx.hp.lambda_b,
                ),
            };
            if problem.n_obs() == 0 && problem.n_pairs() == 0 {
                return Ok(vec![0.0; d]);
            }
            let seed = seed::derive(base_seed, &[tag::PERSONAL, e as u64]);
            Ok(solver::fit(&problem, &vec![0.0; d], ctx.hp, seed)?.residuals)
        })
        .collect();
    let mut out = FactorMatrix::zeros(n, d);
    for (e, row) in rows.into_iter().enumerate() {
        out.set_row(e, &row?);
    }
    Ok(out)
}

/// Seed for a personal-residual fit of entity `e`.
pub fn personal_seed(base_seed: u64, entity: usize) -> u64 {
    seed::derive(base_seed, &[tag::PERSONAL, entity as u64])
}
