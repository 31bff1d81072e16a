//! Generate planted data, train a depth-3 model and print a user's top
//! items with their explanations.
//!
//! cargo run --release --example train_and_recommend -- [user index]

use fact::eval::{synth_generate, SyntheticSpec};
use fact::recommend::{explain, recommend_topk, Templates, UserQuery};
use fact::train::alternate;
use fact::tree::Branch;
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let user: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = synth_generate(&SyntheticSpec { seed: 1, ..Default::default() })?.dataset;
    let cfg = TrainConfig { h: 3, hp: Hyperparams { d: 4, seed: 1, ..Default::default() }, ..Default::default() };
    let model = alternate(&data, &cfg)?;
    println!(
        "objective {:.2} -> {:.2} over {} alternations",
        model.report.initial_objective,
        model.report.final_objective(),
        model.report.objectives.len()
    );

    let path = model.user_tree.path_of_entity(user);
    print!("{} routes through", model.users[user]);
    for w in path.windows(2) {
        let node = model.user_tree.node(w[0]);
        let p = node.predicate.expect("inner node");
        let branch = Branch::ALL.into_iter().find(|&b| model.user_tree.child(w[0], b) == Some(w[1])).expect("child");
        print!(" [{} {} {}]", model.vocab[p.feature], branch.code(), p.threshold);
    }
    println!();

    let templates = Templates::default();
    for (rank, s) in recommend_topk(&model, UserQuery::Id(user), 5, true)?.iter().enumerate() {
        let exp = explain(&model, &templates, user, s.item)?;
        println!("{:>2}. {} ({:.3})  {}", rank + 1, model.items[s.item], s.score, exp.rendered);
    }
    Ok(())
}
