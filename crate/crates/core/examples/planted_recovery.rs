//! Cross-validated comparison of FacT, BPR-MF and MostPopular on planted
//! block data.
//!
//! cargo run --release --example planted_recovery -- [seed] [selection_bias] [reviews_per_user]

use fact::eval::{cross_validate, synth_generate, Gain, Method, SyntheticSpec};
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let selection_bias: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let reviews_per_user: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = SyntheticSpec { seed, selection_bias, reviews_per_user, ..Default::default() };
    let data = synth_generate(&spec)?.dataset;
    let hp = Hyperparams { d: 4, seed, ..Default::default() };
    let cfg = TrainConfig { h: 3, hp: hp.clone(), ..Default::default() };
    let ks = [10, 50];
    let methods = [
        Method::Fact(cfg.clone()),
        Method::FlatMf { hp, with_bpr: true, rounds: cfg.init_rounds + cfg.max_alternations },
        Method::MostPopular,
    ];
    for m in &methods {
        let t = std::time::Instant::now();
        let r = cross_validate(&data, m, 5, &ks, Gain::Rating, seed)?;
        println!(
            "{:<13} ndcg@10 {:.4} ± {:.4}  ndcg@50 {:.4}  ({:.1}s)",
            r.method,
            r.mean[0],
            r.std[0],
            r.mean[1],
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
