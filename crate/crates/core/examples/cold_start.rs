//! Cold-start curve: hold out 5% of users and recommend to each of them
//! from the first k of their reviews, k = 0..5.
//!
//! cargo run --release --example cold_start -- [seed]

use fact::eval::{cold_start_eval, synth_generate, Gain, SyntheticSpec};
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = SyntheticSpec { seed, selection_bias: 1.0, reviews_per_user: 10, ..Default::default() };
    let data = synth_generate(&spec)?.dataset;
    let cfg = TrainConfig { h: 3, hp: Hyperparams { d: 4, seed, ..Default::default() }, ..Default::default() };
    let report = cold_start_eval(&data, &cfg, &[0, 1, 2, 3, 4, 5], 50, Gain::Rating, seed)?;
    println!("{} test users", report.test_users.len());
    for p in &report.points {
        match p.ndcg {
            Some(v) => println!("k={}  ndcg@50 {v:.4}  ({} users, {} skipped)", p.k, p.users, p.skipped),
            None => println!("k={}  no users", p.k),
        }
    }
    Ok(())
}
