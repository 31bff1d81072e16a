//! Planted-structure data: users and items fall in clusters, ratings follow
//! the cluster block means and reviews mention each cluster's features.
//! Writes the reviews as JSON lines, ready for `fact train`.
//!
//! cargo run --example synth -- [out.jsonl] [seed]

use std::collections::BTreeMap;

use fact::eval::{synth_generate, SyntheticSpec};
use fact::ingest::build_user_profiles;

fn main() -> fact::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "planted.jsonl".into());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = SyntheticSpec { seed, ..Default::default() };
    let synth = synth_generate(&spec)?;
    let ds = &synth.dataset;

    let mut block: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in &ds.reviews {
        let e = block.entry((synth.user_cluster[r.user], synth.item_cluster[r.item])).or_default();
        e.0 += r.rating;
        e.1 += 1;
    }
    for ((a, b), (sum, n)) in &block {
        println!("user cluster {a} x item cluster {b}: mean rating {:.2} over {n} reviews (planted {})", sum / *n as f64, spec.block_means[*a][*b]);
    }

    // which features each user cluster talks about
    let profiles = build_user_profiles(ds);
    for c in 0..spec.user_clusters {
        let mut counts = vec![0.0; ds.n_features()];
        for (_, p) in profiles.iter().enumerate().filter(|(u, _)| synth.user_cluster[*u] == c) {
            for (f, v) in p.iter() {
                counts[f] += v;
            }
        }
        let top: Vec<String> = counts.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(f, v)| format!("{}:{v}", ds.features[f])).collect();
        println!("user cluster {c} mentions {}", top.join(" "));
    }

    let file = std::fs::File::create(&out).map_err(|e| fact::Error::io(&out, e))?;
    ds.write_jsonl(std::io::BufWriter::new(file))?;
    println!("wrote {} reviews to {out}", ds.reviews.len());
    Ok(())
}
