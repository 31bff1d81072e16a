//! Save a model, load it back and check that nothing moved. Also shows the
//! load report and what a tampered file looks like.
//!
//! cargo run --release --example persistence -- [dir]

use fact::eval::{synth_generate, SyntheticSpec};
use fact::persist::{from_bytes, load_model_with_report, save_model, to_bytes};
use fact::train::alternate;
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let path = dir.join("fact-model.json");
    let data = synth_generate(&SyntheticSpec { n_users: 50, n_items: 30, seed: 4, ..Default::default() })?.dataset;
    let cfg = TrainConfig { h: 3, hp: Hyperparams { d: 4, seed: 4, ..Default::default() }, ..Default::default() };
    let model = alternate(&data, &cfg)?;
    save_model(&model, &path)?;

    let (loaded, report) = load_model_with_report(&path)?;
    println!("{}: format version {}, migrations {:?}", path.display(), report.file_version, report.migrations);
    let mut same = 0;
    for u in 0..model.n_users() {
        for j in 0..model.n_items() {
            same += usize::from(model.predict(u, j).to_bits() == loaded.predict(u, j).to_bits());
        }
    }
    println!("{same} of {} predictions bitwise equal", model.n_users() * model.n_items());

    let mut bytes = to_bytes(&model)?;
    let at = bytes.iter().position(|&b| b == b'9').expect("a digit");
    bytes[at] = b'8';
    match from_bytes(&bytes) {
        Ok(_) => println!("tampered file loaded?"),
        Err(e) => println!("tampered file rejected: {e}"),
    }
    Ok(())
}
