//! Grouped SGD solver.
//!
//! A [`GroupProblem`] fits one residual vector per group on one side while
//! the counterpart side is frozen. Entity `e` in group `g` scores with
//! `base_g + residual_g`; the penalty applies to residuals only, so a zero
//! residual reproduces the base vector exactly. Plain matrix factorization
//! is the special case of one group per entity with zero bases.
//!
//! One epoch is: every observation once, plus either every BPR pair
//! (when `n_bpr` is 0 or covers the pair list) or `n_bpr` pairs drawn with
//! replacement and re-weighted by `pairs / n_bpr`; the combined task list is
//! shuffled, each task takes one gradient step, and then every residual is
//! shrunk by the proximal map of the L2 penalty, `r / (1 + 2 lr lambda)`.
//! The objective is evaluated after the epoch and the best iterate seen,
//! including the starting point, is returned.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{loss::log_sigmoid, loss::sigmoid, BprPairSet, FactorMatrix, Hyperparams, ObservationSet};
use crate::error::{Error, Result};
use crate::ingest::{Observation, Side};
use crate::seed;

/// Role of a fitted-side entity in a problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Scores with group `g`'s vector.
    Group(usize),
    /// Scores with its own row of the fixed same-side matrix.
    Fixed,
    /// Not part of the problem; terms touching it are dropped.
    Excluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Member {
    Group(usize),
    Fixed(usize),
}

#[derive(Clone, Copy, Debug)]
struct ObsTerm {
    group: usize,
    other: usize,
    rating: f64,
}

#[derive(Clone, Copy, Debug)]
enum PairTerm {
    /// User side: `x = w_g . (c_pos - c_neg)`.
    Shared { group: usize, pos: usize, neg: usize },
    /// Item side: `x = c_user . (w_pos - w_neg)`.
    Split { user: usize, pos: Member, neg: Member },
    /// Both items share one vector, so `x` cannot move.
    Constant(f64),
}

pub struct GroupProblem<'a> {
    side: Side,
    dim: usize,
    counterpart: &'a FactorMatrix,
    fixed: Option<&'a FactorMatrix>,
    bases: FactorMatrix,
    obs: Vec<ObsTerm>,
    pairs: Vec<PairTerm>,
    reg: f64,
    lambda_b: f64,
    /// Log-likelihood of the constant pairs, which no step can move.
    constant_bpr: f64,
}

impl<'a> GroupProblem<'a> {
    /// Problem over all observations and pairs, with entity roles from
    /// `slots` (indexed by fitted-side entity id).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        side: Side,
        counterpart: &'a FactorMatrix,
        fixed: Option<&'a FactorMatrix>,
        slots: &[Slot],
        bases: FactorMatrix,
        obs: &ObservationSet,
        pairs: &BprPairSet,
        reg: f64,
        lambda_b: f64,
    ) -> Self {
        let pair_iter = (0..pairs.n_users())
            .flat_map(|i| pairs.of_user(i).iter().map(move |&(j, l)| (i, j, l)));
        Self::build_from(
            side,
            counterpart,
            fixed,
            |e| slots[e],
            bases,
            obs.entries().iter(),
            pair_iter,
            reg,
            lambda_b,
        )
    }

    /// Like [`GroupProblem::build`] but over caller-filtered observation and
    /// `(user, pos_item, neg_item)` pair streams. Order is preserved and
    /// matters for reproducibility.
    #[allow(clippy::too_many_arguments)]
    pub fn build_from<'o>(
        side: Side,
        counterpart: &'a FactorMatrix,
        fixed: Option<&'a FactorMatrix>,
        slot_of: impl Fn(usize) -> Slot,
        bases: FactorMatrix,
        obs: impl Iterator<Item = &'o Observation>,
        pairs: impl Iterator<Item = (usize, usize, usize)>,
        reg: f64,
        lambda_b: f64,
    ) -> Self {
        let dim = bases.dim();
        assert_eq!(counterpart.dim(), dim, "counterpart dimension mismatch");
        let obs = obs
            .filter_map(|o| {
                let (mine, other) = match side {
                    Side::User => (o.user, o.item),
                    Side::Item => (o.item, o.user),
                };
                match slot_of(mine) {
                    Slot::Group(group) => Some(ObsTerm {
                        group,
                        other,
                        rating: o.rating,
                    }),
                    _ => None,
                }
            })
            .collect();
        let pairs = if lambda_b == 0.0 {
            Vec::new()
        } else {
            pairs
                .filter_map(|(user, j, l)| match side {
                    Side::User => match slot_of(user) {
                        Slot::Group(group) => Some(PairTerm::Shared {
                            group,
                            pos: j,
                            neg: l,
                        }),
                        _ => None,
                    },
                    Side::Item => {
                        let member = |e: usize| match slot_of(e) {
                            Slot::Group(g) => Some(Member::Group(g)),
                            Slot::Fixed => Some(Member::Fixed(e)),
                            Slot::Excluded => None,
                        };
                        match (member(j)?, member(l)?) {
                            (Member::Fixed(_), Member::Fixed(_)) => None,
                            (Member::Group(a), Member::Group(b)) if a == b => {
                                Some(PairTerm::Constant(0.0))
                            }
                            (pos, neg) => Some(PairTerm::Split { user, pos, neg }),
                        }
                    }
                })
                .collect()
        };
        if fixed.is_none() {
            debug_assert!(!pairs.iter().any(|p| matches!(
                p,
                PairTerm::Split { pos: Member::Fixed(_), .. } | PairTerm::Split { neg: Member::Fixed(_), .. }
            )));
        }
        let constant_bpr = pairs
            .iter()
            .map(|p| match p {
                PairTerm::Constant(x) => log_sigmoid(*x),
                _ => 0.0,
            })
            .sum();
        GroupProblem {
            side,
            dim,
            counterpart,
            fixed,
            bases,
            obs,
            pairs,
            reg,
            lambda_b,
            constant_bpr,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_groups(&self) -> usize {
        self.bases.rows()
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn bases(&self) -> &FactorMatrix {
        &self.bases
    }

    /// `(base_g + r_g) . c`
    #[inline]
    fn score(&self, r: &[f64], group: usize, c: &[f64]) -> f64 {
        let d = self.dim;
        let b = self.bases.row(group);
        let rg = &r[group * d..(group + 1) * d];
        let mut s = 0.0;
        for k in 0..d {
            s += (b[k] + rg[k]) * c[k];
        }
        s
    }

    fn member_score(&self, r: &[f64], m: Member, c: &[f64]) -> f64 {
        match m {
            Member::Group(g) => self.score(r, g, c),
            Member::Fixed(e) => super::dot(self.fixed.expect("fixed matrix").row(e), c),
        }
    }

    fn pair_margin(&self, r: &[f64], p: &PairTerm) -> f64 {
        match *p {
            PairTerm::Shared { group, pos, neg } => {
                let d = self.dim;
                let b = self.bases.row(group);
                let rg = &r[group * d..(group + 1) * d];
                let cp = self.counterpart.row(pos);
                let cn = self.counterpart.row(neg);
                let mut s = 0.0;
                for k in 0..d {
                    s += (b[k] + rg[k]) * (cp[k] - cn[k]);
                }
                s
            }
            PairTerm::Split { user, pos, neg } => {
                let cu = self.counterpart.row(user);
                self.member_score(r, pos, cu) - self.member_score(r, neg, cu)
            }
            PairTerm::Constant(x) => x,
        }
    }

    /// Problem objective at residuals `r` (groups x dim, row-major).
    pub fn objective(&self, r: &[f64]) -> f64 {
        let mut total = 0.0;
        for o in &self.obs {
            let e = o.rating - self.score(r, o.group, self.counterpart.row(o.other));
            total += e * e;
        }
        let mut bpr = self.constant_bpr;
        for p in &self.pairs {
            if !matches!(p, PairTerm::Constant(_)) {
                bpr += log_sigmoid(self.pair_margin(r, p));
            }
        }
        let penalty: f64 = r.iter().map(|x| x * x).sum();
        total - self.lambda_b * bpr + self.reg * penalty
    }

    /// Gradient of [`GroupProblem::objective`] with respect to the residuals.
    pub fn gradient(&self, r: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; r.len()];
        for o in &self.obs {
            let c = self.counterpart.row(o.other);
            let e = o.rating - self.score(r, o.group, c);
            for k in 0..d {
                g[o.group * d + k] -= 2.0 * e * c[k];
            }
        }
        for p in &self.pairs {
            let coef = -self.lambda_b * sigmoid(-self.pair_margin(r, p));
            self.accumulate_pair(p, coef, &mut g);
        }
        for (gi, ri) in g.iter_mut().zip(r) {
            *gi += 2.0 * self.reg * ri;
        }
        g
    }

    /// Adds `coef * dx/dr` of pair `p` into `out`.
    #[inline]
    fn accumulate_pair(&self, p: &PairTerm, coef: f64, out: &mut [f64]) {
        let d = self.dim;
        match *p {
            PairTerm::Shared { group, pos, neg } => {
                let cp = self.counterpart.row(pos);
                let cn = self.counterpart.row(neg);
                for k in 0..d {
                    out[group * d + k] += coef * (cp[k] - cn[k]);
                }
            }
            PairTerm::Split { user, pos, neg } => {
                let cu = self.counterpart.row(user);
                if let Member::Group(gp) = pos {
                    for k in 0..d {
                        out[gp * d + k] += coef * cu[k];
                    }
                }
                if let Member::Group(gn) = neg {
                    for k in 0..d {
                        out[gn * d + k] -= coef * cu[k];
                    }
                }
            }
            PairTerm::Constant(_) => {}
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Best residuals found, groups x dim row-major.
    pub residuals: Vec<f64>,
    pub objective: f64,
    /// Objective at the starting point.
    pub initial_objective: f64,
    /// Objective after each epoch.
    pub history: Vec<f64>,
    /// 0 when the starting point was never beaten.
    pub best_epoch: usize,
}

/// Runs SGD from `init` and returns the best iterate. Deterministic for a
/// given `seed`.
pub fn fit(problem: &GroupProblem<'_>, init: &[f64], hp: &Hyperparams, seed: u64) -> Result<FitOutcome> {
    let d = problem.dim;
    assert_eq!(init.len(), problem.n_groups() * d, "init has wrong shape");
    let mut r = init.to_vec();
    let initial = problem.objective(&r);
    if !initial.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            objective: initial,
        });
    }
    let mut best = FitOutcome {
        residuals: r.clone(),
        objective: initial,
        initial_objective: initial,
        history: Vec::with_capacity(hp.epochs),
        best_epoch: 0,
    };
    let has_signal = !problem.obs.is_empty()
        || problem.pairs.iter().any(|p| !matches!(p, PairTerm::Constant(_)));
    if !has_signal && r.iter().all(|&x| x == 0.0) {
        return Ok(best);
    }

    let mut rng = seed::rng(seed);
    let n_obs = problem.obs.len();
    let n_pairs = problem.pairs.len();
    let (sampled, pair_scale) = if n_pairs == 0 || hp.n_bpr == 0 || hp.n_bpr >= n_pairs {
        (None, 1.0)
    } else {
        (Some(hp.n_bpr), n_pairs as f64 / hp.n_bpr as f64)
    };
    let shrink = 1.0 / (1.0 + 2.0 * hp.lr * problem.reg);
    let lr = hp.lr;
    let mut tasks: Vec<usize> = Vec::with_capacity(n_obs + sampled.unwrap_or(n_pairs));
    let mut prev = initial;

    for epoch in 1..=hp.epochs {
        tasks.clear();
        tasks.extend(0..n_obs);
        match sampled {
            None => tasks.extend(n_obs..n_obs + n_pairs),
            Some(count) => {
                for _ in 0..count {
                    tasks.push(n_obs + rng.random_range(0..n_pairs));
                }
            }
        }
        tasks.shuffle(&mut rng);

        for &t in &tasks {
            if t < n_obs {
                let o = &problem.obs[t];
                let c = problem.counterpart.row(o.other);
                let e = o.rating - problem.score(&r, o.group, c);
                let step = 2.0 * lr * e;
                let rg = &mut r[o.group * d..(o.group + 1) * d];
                for k in 0..d {
                    rg[k] += step * c[k];
                }
            } else {
                let p = &problem.pairs[t - n_obs];
                if matches!(p, PairTerm::Constant(_)) {
                    continue;
                }
                let x = problem.pair_margin(&r, p);
                let coef = lr * pair_scale * problem.lambda_b * sigmoid(-x);
                problem.accumulate_pair(p, coef, &mut r);
            }
        }
        for x in r.iter_mut() {
            *x *= shrink;
        }

        let obj = problem.objective(&r);
        if !obj.is_finite() {
            return Err(Error::Divergence {
                epoch,
                objective: obj,
            });
        }
        best.history.push(obj);
        if obj < best.objective {
            best.objective = obj;
            best.residuals.copy_from_slice(&r);
            best.best_epoch = epoch;
        }
        let rel = (prev - obj).abs() / prev.abs().max(1e-12);
        if rel < hp.tol {
            break;
        }
        prev = obj;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::build_all_pairs;

    fn toy() -> (ObservationSet, BprPairSet, FactorMatrix, FactorMatrix) {
        let entries = vec![
            Observation { user: 0, item: 0, rating: 5.0 },
            Observation { user: 0, item: 2, rating: 2.0 },
            Observation { user: 1, item: 1, rating: 4.0 },
            Observation { user: 2, item: 0, rating: 1.0 },
            Observation { user: 2, item: 3, rating: 3.0 },
        ];
        let obs = ObservationSet::new(entries, 3, 4);
        let pairs = build_all_pairs(&obs, 1, 0, 3);
        let mut rng = seed::rng(8);
        let users = FactorMatrix::uniform(3, 2, 1.0, &mut rng);
        let items = FactorMatrix::uniform(4, 2, 1.0, &mut rng);
        (obs, pairs, users, items)
    }

    fn finite_difference(problem: &GroupProblem<'_>, r: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..r.len())
            .map(|k| {
                let mut up = r.to_vec();
                let mut down = r.to_vec();
                up[k] += h;
                down[k] -= h;
                (problem.objective(&up) - problem.objective(&down)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn grouped_gradients_match_finite_differences() {
        let (obs, pairs, users, items) = toy();
        let bases = FactorMatrix::from_rows(2, &[vec![0.2, -0.1], vec![0.0, 0.3]]);
        let user_side = GroupProblem::build(
            Side::User,
            &items,
            None,
            &[Slot::Group(0), Slot::Group(1), Slot::Group(0)],
            bases.clone(),
            &obs,
            &pairs,
            0.3,
            0.7,
        );
        let item_side = GroupProblem::build(
            Side::Item,
            &users,
            Some(&items),
            &[Slot::Group(0), Slot::Fixed, Slot::Group(1), Slot::Group(1)],
            bases,
            &obs,
            &pairs,
            0.3,
            0.7,
        );
        let r = [0.1, -0.4, 0.25, 0.05];
        for problem in [&user_side, &item_side] {
            let analytic = problem.gradient(&r);
            let numeric = finite_difference(problem, &r);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn same_group_item_pairs_are_constant() {
        let (obs, pairs, users, _) = toy();
        let problem = GroupProblem::build(
            Side::Item,
            &users,
            None,
            &[Slot::Group(0); 4],
            FactorMatrix::zeros(1, 2),
            &obs,
            &pairs,
            0.0,
            1.0,
        );
        assert!(problem.pairs.iter().all(|p| matches!(p, PairTerm::Constant(_))));
        let expected = -(problem.n_pairs() as f64) * 0.5f64.ln()
            + obs.entries().iter().map(|o| o.rating * o.rating).sum::<f64>();
        assert!((problem.objective(&[0.0, 0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn best_iterate_never_worse_than_start() {
        let (obs, pairs, _, items) = toy();
        let problem = GroupProblem::build(
            Side::User,
            &items,
            None,
            &[Slot::Group(0), Slot::Group(1), Slot::Group(2)],
            FactorMatrix::zeros(3, 2),
            &obs,
            &pairs,
            0.1,
            0.5,
        );
        let hp = Hyperparams {
            d: 2,
            lr: 0.5,
            epochs: 15,
            tol: 0.0,
            ..Default::default()
        };
        match fit(&problem, &[0.0; 6], &hp, 3) {
            Ok(out) => {
                assert!(out.objective <= out.initial_objective);
                let min = out.history.iter().copied().fold(out.initial_objective, f64::min);
                assert_eq!(out.objective, min);
            }
            Err(Error::Divergence { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn divergence_is_reported() {
        let entries = vec![Observation { user: 0, item: 0, rating: 5.0 }];
        let obs = ObservationSet::new(entries, 1, 1);
        let items = FactorMatrix::from_vec(1, 1, vec![100.0]);
        let problem = GroupProblem::build(
            Side::User,
            &items,
            None,
            &[Slot::Group(0)],
            FactorMatrix::zeros(1, 1),
            &obs,
            &BprPairSet::empty(1),
            0.0,
            0.0,
        );
        let hp = Hyperparams {
            d: 1,
            lr: 1.0,
            epochs: 500,
            tol: 0.0,
            ..Default::default()
        };
        match fit(&problem, &[0.0], &hp, 1) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
