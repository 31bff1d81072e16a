//! Acceptance gate. Every criterion runs in turn and prints one line; the
//! test fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use fact::eval::{
    assign_folds, cold_start_eval, cross_validate, evaluate_fold, ndcg_at_k, synth_generate, Gain, Method,
    SyntheticSpec,
};
use fact::factorization::build_all_pairs;
use fact::factorization::solver::{GroupProblem, Slot};
use fact::factorization::ObservationSet;
use fact::ingest::Observation;
use fact::persist::{from_bytes, load_model, save_model, to_bytes};
use fact::recommend::{encode_answers, Answer};
use fact::train::alternate;
use fact::tree::{route, select_predicate, unsplit_objective};
use fact::{FacTModel, FactorMatrix, InterviewSession, Side};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Outcome {
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn run(name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    // FACT_ACCEPTANCE_ONLY=<substring> narrows a local run; skipped criteria count as failures
    if let Ok(only) = std::env::var("FACT_ACCEPTANCE_ONLY") {
        if !name.contains(only.as_str()) {
            println!("[SKIP] {name}");
            return Outcome { name, result: Err("skipped".into()), elapsed: Duration::ZERO };
        }
    }
    let start = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let elapsed = start.elapsed();
    let result = match (result, budget) {
        (Ok(msg), Some(b)) if elapsed > b => Err(format!("{msg}; over the {}s budget", b.as_secs())),
        (r, _) => r,
    };
    let (tag, msg) = match &result {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("[{tag}] {name}: {msg} ({:.1}s)", elapsed.as_secs_f64());
    Outcome { name, result, elapsed }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn predicate_selection() -> Check {
    let mut splitting = 0;
    let mut worst: f64 = 0.0;
    let mut candidates = 0;
    for seed in 0..30u64 {
        let inst = SplitInstance::random(seed);
        let ctx = inst.ctx();
        let got = select_predicate(&ctx, &inst.members, &inst.spec, &inst.parent, &inst.excluded, inst.node_seed)
            .map_err(|e| e.to_string())?;
        let want = brute_force_select(&inst)?;
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                splitting += 1;
                candidates += w.candidates;
                ensure(g.predicate.feature == w.feature && g.predicate.threshold == w.threshold, || {
                    format!(
                        "instance {seed}: picked ({}, {}), brute force ({}, {})",
                        g.predicate.feature, g.predicate.threshold, w.feature, w.threshold
                    )
                })?;
                let gap = (g.objective - w.objective).abs().max(w.max_report_gap);
                worst = worst.max(gap);
                ensure(gap <= 1e-6, || format!("instance {seed}: objective gap {gap:e}"))?;
            }
            (g, w) => return Err(format!("instance {seed}: split {:?} vs brute force {:?}", g.is_some(), w.is_some())),
        }
    }
    ensure(splitting >= 20, || format!("only {splitting} instances had a split"))?;
    Ok(format!("{splitting} splitting instances, {candidates} candidates, max objective gap {worst:.1e}"))
}

fn random_problem_gap(seed: u64) -> Result<f64, String> {
    let mut r = rng(1000 + seed);
    let side = if r.random_bool(0.5) { Side::User } else { Side::Item };
    let (n_users, n_items, d) = (r.random_range(2..=6), r.random_range(2..=6), r.random_range(1..=3));
    let mut entries = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if r.random_bool(0.6) {
                entries.push(Observation { user: u, item: i, rating: r.random_range(1.0..5.0) });
            }
        }
    }
    let obs = ObservationSet::new(entries, n_users, n_items);
    let pairs = build_all_pairs(&obs, 1, 0, seed);
    let (n_fit, n_other) = match side {
        Side::User => (n_users, n_items),
        Side::Item => (n_items, n_users),
    };
    let random_matrix = |r: &mut ChaCha8Rng, rows: usize| {
        FactorMatrix::from_vec(rows, d, (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect())
    };
    let counterpart = random_matrix(&mut r, n_other);
    let fixed = random_matrix(&mut r, n_fit);
    let groups = r.random_range(1..=3);
    let bases = random_matrix(&mut r, groups);
    let slots: Vec<Slot> = (0..n_fit)
        .map(|_| match r.random_range(0..10) {
            0 => Slot::Excluded,
            1 | 2 => Slot::Fixed,
            _ => Slot::Group(r.random_range(0..groups)),
        })
        .collect();
    let problem = GroupProblem::build(
        side,
        &counterpart,
        Some(&fixed),
        &slots,
        bases,
        &obs,
        &pairs,
        r.random_range(0.0..0.5),
        r.random_range(0.0..1.0),
    );
    let x: Vec<f64> = (0..groups * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic = problem.gradient(&x);
    let mut numeric = vec![0.0; x.len()];
    for k in 0..x.len() {
        let h = 1e-5;
        let mut up = x.clone();
        let mut down = x.clone();
        up[k] += h;
        down[k] -= h;
        numeric[k] = (problem.objective(&up) - problem.objective(&down)) / (2.0 * h);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-3 * scale))
        .fold(0.0, f64::max))
}

fn gradient_check() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let gap = random_problem_gap(seed)?;
        worst = worst.max(gap);
        ensure(gap <= 1e-4, || format!("instance {seed}: relative error {gap:e}"))?;
    }
    Ok(format!("50 instances, max relative error {worst:.1e}"))
}

fn greedy_non_increase() -> Check {
    // zero-residual neutrality: a split scored before fitting equals the
    // node as one group, recomputed from the definition
    let mut neutral_worst: f64 = 0.0;
    for seed in 100..120 {
        let inst = SplitInstance::random(seed);
        let ctx = inst.ctx();
        let direct = inst.world().objective(
            [&inst.members, &[], &[]],
            &[inst.parent.clone(), inst.parent.clone(), inst.parent.clone()],
            &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]],
        );
        let lib = unsplit_objective(&ctx, &inst.members, &inst.parent);
        let gap = (direct - lib).abs() / direct.abs().max(1.0);
        neutral_worst = neutral_worst.max(gap);
        ensure(gap <= 1e-9, || format!("neutrality instance {seed}: gap {gap:e}"))?;
    }
    let data = synth_generate(&SyntheticSpec { n_users: 50, n_items: 40, reviews_per_user: 10, seed: 5, ..Default::default() })
        .map_err(|e| e.to_string())?
        .dataset;
    let mut splits = 0;
    let mut worst = f64::NEG_INFINITY;
    // training is deterministic, so a run capped at t alternations
    // reproduces the trees of alternation t of the full run
    for t in 1..=3 {
        let mut cfg = planted_config(3, 11);
        cfg.max_alternations = t;
        cfg.alt_tol = 1e-12;
        let model = alternate(&data, &cfg).map_err(|e| e.to_string())?;
        if t == 3 {
            ensure(model.report.objectives.len() == 3, || "run stopped before 3 alternations".into())?;
        }
        for tree in [&model.user_tree, &model.item_tree] {
            for node in &tree.nodes {
                if let Some(s) = node.split {
                    splits += 1;
                    let excess = (s.objective - s.unsplit_objective) / s.unsplit_objective.abs().max(1e-12);
                    worst = worst.max(excess);
                    ensure(excess <= 1e-4, || {
                        format!("alternation {t} node {}: split {} > unsplit {}", node.id, s.objective, s.unsplit_objective)
                    })?;
                }
            }
        }
    }
    ensure(splits > 0, || "no split executed".into())?;
    Ok(format!(
        "{splits} splits over 3 alternations, max relative excess {worst:.1e}; neutrality gap {neutral_worst:.1e}"
    ))
}

fn ndcg_oracle() -> Check {
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = r.random_range(1..=30);
        let mut ranked: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ranked.swap(i, r.random_range(0..=i));
        }
        let mut relevance = BTreeMap::new();
        for j in 0..n + 5 {
            if r.random_bool(0.3) {
                let g = if r.random_bool(0.5) { r.random_range(1..=5) as f64 } else { r.random_range(0.0..5.0) };
                relevance.insert(j, g);
            }
        }
        if relevance.is_empty() {
            relevance.insert(0, 1.0);
        }
        let k = r.random_range(1..=n + 3);
        let got = ndcg_at_k(&ranked, &relevance, k);
        let want = ndcg_direct(&ranked, &relevance, k);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || format!("case {case}: {got} vs {want}"))?;
        ensure((0.0..=1.0 + 1e-15).contains(&got), || format!("case {case}: {got} out of range"))?;

        let mut ideal: Vec<usize> = relevance.keys().copied().collect();
        ideal.sort_by(|a, b| relevance[b].total_cmp(&relevance[a]).then(a.cmp(b)));
        if relevance.values().any(|&g| g > 0.0) {
            let perfect = ndcg_at_k(&ideal, &relevance, k);
            ensure(perfect == 1.0, || format!("case {case}: perfect ranking scored {perfect}"))?;
        }
    }
    Ok(format!("1000 instances, max gap {worst:.1e}, perfect rankings exactly 1"))
}

fn planted_recovery() -> Check {
    let ks = [10];
    let (mut fact, mut bpr, mut mp) = (0.0, 0.0, 0.0);
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let data = planted(seed);
        let cfg = planted_config(3, seed);
        let methods = [
            Method::Fact(cfg.clone()),
            Method::FlatMf { hp: cfg.hp.clone(), with_bpr: true, rounds: cfg.init_rounds + cfg.max_alternations },
            Method::MostPopular,
        ];
        let mut scores = Vec::new();
        for m in &methods {
            scores.push(cross_validate(&data, m, 5, &ks, Gain::Rating, seed).map_err(|e| e.to_string())?.mean[0]);
        }
        println!("    seed {seed}: fact {:.4}  bpr-mf {:.4}  most-popular {:.4}", scores[0], scores[1], scores[2]);
        fact += scores[0];
        bpr += scores[1];
        mp += scores[2];
    }
    let n = seeds.len() as f64;
    let (fact, bpr, mp) = (fact / n, bpr / n, mp / n);
    let summary = format!("mean ndcg@10 fact {fact:.4}, bpr-mf {bpr:.4}, most-popular {mp:.4}");
    ensure(fact >= bpr, || format!("{summary}: fact below bpr-mf"))?;
    ensure(fact >= mp + 0.05, || format!("{summary}: margin over most-popular {:.4} < 0.05", fact - mp))?;
    Ok(summary)
}

fn cold_start_trend() -> Check {
    let ks: Vec<usize> = (0..=5).collect();
    let mut sums = vec![0.0; ks.len()];
    let mut users = vec![0usize; ks.len()];
    for seed in [1u64, 2, 3] {
        let report = cold_start_eval(&planted(seed), &planted_config(3, seed), &ks, 50, Gain::Rating, seed)
            .map_err(|e| e.to_string())?;
        for (c, p) in report.points.iter().enumerate() {
            if let Some(v) = p.ndcg {
                sums[c] += v * p.users as f64;
                users[c] += p.users;
            }
        }
    }
    ensure(users.iter().all(|&u| u > 0), || "a k value had no users".into())?;
    let curve: Vec<f64> = sums.iter().zip(&users).map(|(s, &u)| s / u as f64).collect();
    let shown: Vec<String> = curve.iter().map(|v| format!("{v:.4}")).collect();
    let summary = format!("ndcg@50 for k=0..5 [{}] over {} users", shown.join(", "), users[0]);
    ensure(curve[5] - curve[0] >= 0.02, || format!("{summary}: k=5 gains only {:.4}", curve[5] - curve[0]))?;
    let mut peak = f64::NEG_INFINITY;
    for (k, &v) in curve.iter().enumerate() {
        ensure(v >= peak - 0.02, || format!("{summary}: k={k} falls {:.4} below an earlier point", peak - v))?;
        peak = peak.max(v);
    }
    Ok(summary)
}

fn parent_factor_ablation() -> Check {
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for h in [2, 3] {
        let (mut with, mut without) = (0.0, 0.0);
        for seed in [1u64, 2, 3] {
            let data = planted(seed);
            let folds = assign_folds(&data, 5, seed).map_err(|e| e.to_string())?;
            for pf in [true, false] {
                let mut cfg = planted_config(h, seed);
                cfg.use_parent_factors = pf;
                let r = evaluate_fold(&data, &folds, 0, &Method::Fact(cfg), &[50], Gain::Rating).map_err(|e| e.to_string())?;
                if pf {
                    with += r.ndcg[0] / 3.0;
                } else {
                    without += r.ndcg[0] / 3.0;
                }
            }
        }
        lines.push(format!("h={h}: with {with:.4}, without {without:.4}"));
        if with < without {
            failed.push(h);
        }
    }
    let summary = format!("mean ndcg@50 over 3 seeds, {}", lines.join("; "));
    ensure(failed.is_empty(), || format!("{summary}: parent factors lose at h={failed:?}"))?;
    Ok(summary)
}

fn predictions(model: &FacTModel) -> Vec<u64> {
    let mut out = Vec::new();
    for u in 0..model.n_users() {
        for j in 0..model.n_items() {
            out.push(model.predict(u, j).to_bits());
        }
    }
    out
}

fn determinism_and_persistence() -> Check {
    let data = tiny(3);
    let cfg = tiny_config(3, 9);
    let a = alternate(&data, &cfg).map_err(|e| e.to_string())?;
    let b = alternate(&data, &cfg).map_err(|e| e.to_string())?;
    let bytes = to_bytes(&a).map_err(|e| e.to_string())?;
    ensure(bytes == to_bytes(&b).map_err(|e| e.to_string())?, || "two runs wrote different model bytes".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    save_model(&a, &path).map_err(|e| e.to_string())?;
    let loaded = load_model(&path).map_err(|e| e.to_string())?;
    ensure(predictions(&loaded) == predictions(&a), || "loaded predictions differ".into())?;
    ensure(to_bytes(&loaded).map_err(|e| e.to_string())? == bytes, || "re-saved bytes differ".into())?;
    let (again, _) = from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(predictions(&again) == predictions(&a), || "in-memory round trip differs".into())?;
    Ok(format!(
        "{} model bytes identical across runs, {} predictions bitwise equal after save/load",
        bytes.len(),
        a.n_users() * a.n_items()
    ))
}

fn sequences(len: usize) -> Vec<Vec<Answer>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                Answer::ALL.iter().map(move |&a| {
                    let mut t = s.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
    }
    out
}

fn interview_equivalence() -> Check {
    let data = synth_generate(&SyntheticSpec { n_users: 60, n_items: 30, reviews_per_user: 8, seed: 4, ..Default::default() })
        .map_err(|e| e.to_string())?
        .dataset;
    let mut checked = 0;
    let mut deepest = 0;
    for questions in 0..=3usize {
        let model = alternate(&data, &tiny_config(questions + 1, 5)).map_err(|e| e.to_string())?;
        deepest = deepest.max(model.user_tree.depth() - 1);
        for seq in sequences(questions) {
            let mut s = InterviewSession::start(&model, "t".into());
            let mut used = 0;
            for &a in &seq {
                if s.is_finished() {
                    break;
                }
                s.answer(&model, a).map_err(|e| e.to_string())?;
                used += 1;
            }
            ensure(s.is_finished(), || format!("h={} sequence {seq:?} did not finish", questions + 1))?;
            let profile = encode_answers(&model.user_tree, &seq[..used]);
            let leaf = *route(&model.user_tree, &profile).last().expect("path");
            ensure(leaf == s.node, || format!("h={} sequence {seq:?}: interview {} vs route {leaf}", questions + 1, s.node))?;
            ensure(route(&model.user_tree, &profile) == s.path, || format!("sequence {seq:?}: paths differ"))?;
            checked += 1;
        }
    }
    ensure(deepest == 3, || format!("deepest tree asks only {deepest} questions"))?;
    Ok(format!("{checked} answer sequences over trees of 0..=3 questions agree with routing"))
}

#[test]
fn acceptance() {
    let outcomes = [
        run("oracle predicate selection", Some(Duration::from_secs(60)), predicate_selection),
        run("gradient correctness", Some(Duration::from_secs(30)), gradient_check),
        run("zero-residual neutrality and greedy non-increase", Some(Duration::from_secs(120)), greedy_non_increase),
        run("ndcg oracle", None, ndcg_oracle),
        run("planted-structure recovery", Some(Duration::from_secs(300)), planted_recovery),
        run("cold-start monotonic trend", Some(Duration::from_secs(300)), cold_start_trend),
        run("parent-factor ablation", None, parent_factor_ablation),
        run("determinism and persistence", None, determinism_and_persistence),
        run("interview/route equivalence", None, interview_equivalence),
    ];
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.result.is_err()).map(|o| o.name).collect();
    let total: f64 = outcomes.iter().map(|o| o.elapsed.as_secs_f64()).sum();
    println!("{} of {} criteria passed in {total:.0}s", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
