//! Sweep one training setting and cross-validate each value.
//!
//! cargo run --release --example sweep -- [axis] [values]
//! cargo run --release --example sweep -- latent_dim 2,4,8

use fact::eval::{sweep, synth_generate, Axis, SyntheticSpec};
use fact::{Hyperparams, TrainConfig};

fn main() -> fact::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = args.next().unwrap_or_else(|| "depth".into());
    let axis: Axis = serde_json::from_value(serde_json::Value::String(axis))?;
    let values: Vec<f64> = args
        .next()
        .unwrap_or_else(|| "1,2,3".into())
        .split(',')
        .map(|v| v.parse().expect("numeric value"))
        .collect();
    let data = synth_generate(&SyntheticSpec { seed: 5, ..Default::default() })?.dataset;
    let cfg = TrainConfig {
        h: 3,
        max_alternations: 3,
        hp: Hyperparams { d: 4, seed: 5, ..Default::default() },
        ..Default::default()
    };
    let table = sweep(&data, &cfg, axis, &values, 3, &[10, 50], 5);
    table.write_csv(std::io::stdout().lock())?;
    for f in &table.failures {
        eprintln!("{f:?}");
    }
    Ok(())
}
