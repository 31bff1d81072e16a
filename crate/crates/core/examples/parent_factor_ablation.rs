//! Children fitted on top of their parent's factor versus from scratch,
//! scored on one held-out fold per seed.
//!
//! cargo run --release --example parent_factor_ablation -- [folds to score]

use fact::eval::{assign_folds, evaluate_fold, synth_generate, Gain, Method, SyntheticSpec};
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let scored: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    for h in [2, 3] {
        let mut with = Vec::new();
        let mut without = Vec::new();
        for seed in 1..=3u64 {
            let spec = SyntheticSpec { seed, selection_bias: 1.0, reviews_per_user: 10, ..Default::default() };
            let data = synth_generate(&spec)?.dataset;
            let folds = assign_folds(&data, 5, seed)?;
            for pf in [true, false] {
                let cfg = TrainConfig {
                    h,
                    use_parent_factors: pf,
                    hp: Hyperparams { d: 4, seed, ..Default::default() },
                    ..Default::default()
                };
                let method = Method::Fact(cfg);
                let mut total = 0.0;
                for f in 0..scored {
                    total += evaluate_fold(&data, &folds, f, &method, &[50], Gain::Rating)?.ndcg[0];
                }
                let ndcg = total / scored as f64;
                println!("h={h} seed={seed} parent_factors={pf:<5} ndcg@50 {ndcg:.4}");
                if pf {
                    with.push(ndcg)
                } else {
                    without.push(ndcg)
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("h={h} mean with {:.4}  without {:.4}", mean(&with), mean(&without));
    }
    Ok(())
}
