//! Cold-start interview on the terminal. Each question asks about one
//! feature of the user tree; the reached leaf gives the recommendations.
//!
//! cargo run --release --example interview
//! echo "like dislike not sure" | tr ' ' '\n' | cargo run --release --example interview

use std::io::{stdin, stdout};

use fact::cli::interview_loop;
use fact::eval::{synth_generate, SyntheticSpec};
use fact::recommend::Templates;
use fact::train::alternate;
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let data = synth_generate(&SyntheticSpec { seed: 3, ..Default::default() })?.dataset;
    let cfg = TrainConfig { h: 4, hp: Hyperparams { d: 4, seed: 3, ..Default::default() }, ..Default::default() };
    let model = alternate(&data, &cfg)?;
    let (session, recs) = interview_loop(&model, &Templates::default(), 5, stdin().lock(), stdout())?;
    println!();
    for a in &session.answers {
        println!("{}: {:?}", a.feature, a.answer);
    }
    println!("leaf {} after {} questions", session.node, session.answers.len());
    for r in &recs {
        println!("{} ({:.3})  {}", r.item, r.score, r.explanation.rendered);
    }
    Ok(())
}
