//! Train a small model and serve the interview API on 127.0.0.1:8080.
//!
//! cargo run --release --example serve -- [addr]
//! curl -X POST localhost:8080/api/sessions

use fact::eval::{synth_generate, SyntheticSpec};
use fact::recommend::Templates;
use fact::service::{serve, AppState, ServiceConfig};
use fact::train::alternate;
use fact::{Hyperparams, TrainConfig};

#[tokio::main]
async fn main() -> fact::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into());
    let addr = addr.parse().map_err(|e| fact::Error::Validation(format!("bad address: {e}")))?;
    let data = synth_generate(&SyntheticSpec { seed: 6, ..Default::default() })?.dataset;
    let cfg = TrainConfig { h: 4, hp: Hyperparams { d: 4, seed: 6, ..Default::default() }, ..Default::default() };
    let model = alternate(&data, &cfg)?;
    let svc = ServiceConfig::default();
    println!("listening on http://{addr}/api/health");
    serve(AppState::new(model, Templates::default(), &svc), addr, &svc).await
}
