//! Explanations from both trees: which features the user and item paths
//! share, and the fallback when they share none. Every explanation is
//! checked against the paths it claims to come from.
//!
//! cargo run --release --example explain -- [templates.json]

use fact::eval::{synth_generate, SyntheticSpec};
use fact::recommend::{explain, validate_explanation, Templates};
use fact::train::alternate;
use fact::{Hyperparams, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let templates = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Templates::default(),
    };
    let data = synth_generate(&SyntheticSpec { n_users: 60, n_items: 40, seed: 2, ..Default::default() })?.dataset;
    let cfg = TrainConfig { h: 3, hp: Hyperparams { d: 4, seed: 2, ..Default::default() }, ..Default::default() };
    let model = alternate(&data, &cfg)?;

    let (mut shared, mut fallback) = (0, 0);
    for u in 0..model.n_users() {
        let path = model.user_tree.path_of_entity(u);
        for j in 0..model.n_items() {
            let exp = explain(&model, &templates, u, j)?;
            validate_explanation(&model, &path, j, &exp)?;
            if exp.shared_features.is_empty() {
                fallback += 1;
            } else {
                shared += 1;
            }
        }
    }
    println!("{shared} explanations name shared features, {fallback} fall back");

    for (u, j) in [(0, 0), (1, 5), (7, 11)] {
        let exp = explain(&model, &templates, u, j)?;
        println!("{} / {}: {}", model.users[u], model.items[j], exp.rendered);
        for f in exp.features() {
            println!("    {} user {:?} item {:?} level {}", f.feature, f.user_branch, f.item_branch, f.level);
        }
    }
    Ok(())
}
