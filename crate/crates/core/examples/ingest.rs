//! Parse a JSON-lines review file, filter it and look at the feature
//! profiles and candidate thresholds the trees will split on.
//!
//! cargo run --example ingest -- [reviews.jsonl]

use fact::ingest::{
    build_item_profiles, build_user_profiles, candidate_thresholds, filter_dataset, parse_dataset, FilterThresholds,
    Format, Normalization,
};

const SAMPLE: &str = r#"{"user":"ana","item":"cafe-1","rating":5,"mentions":[{"feature":"coffee","polarity":1},{"feature":"service","polarity":1}]}
{"user":"ana","item":"cafe-2","rating":2,"mentions":[{"feature":"coffee","polarity":-1}]}
{"user":"ana","item":"diner","rating":4,"mentions":[{"feature":"price","polarity":1}]}
{"user":"ben","item":"cafe-1","rating":4,"mentions":[{"feature":"service","polarity":1}]}
{"user":"ben","item":"diner","rating":3,"mentions":[{"feature":"price","polarity":-1},{"feature":"noise","polarity":-1}]}
{"user":"ben","item":"cafe-2","rating":1,"mentions":[{"feature":"service","polarity":-1}]}
{"user":"cy","item":"diner","rating":5,"mentions":[{"feature":"price","polarity":1}]}
{"user":"cy","item":"cafe-2","rating":3,"mentions":[{"feature":"coffee","polarity":1},{"feature":"price","polarity":1}]}
"#;

fn main() -> fact::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = std::env::temp_dir().join("fact-ingest-sample.jsonl");
            std::fs::write(&p, SAMPLE).map_err(|e| fact::Error::io(&p, e))?;
            p
        }
    };
    let raw = parse_dataset(&path, Format::JsonLines)?;
    println!("parsed {} reviews, {} users, {} items, features {:?}", raw.reviews.len(), raw.n_users(), raw.n_items(), raw.features);

    // "noise" is mentioned once and goes; nothing else falls below two
    let th = FilterThresholds { min_feature_freq: 2, min_reviews_per_user: 2, ..Default::default() };
    let ds = filter_dataset(&raw, &th)?;
    println!("after filtering: {} reviews, features {:?}", ds.reviews.len(), ds.features);

    let users = build_user_profiles(&ds);
    let items = build_item_profiles(&ds);
    for (u, p) in users.iter().enumerate() {
        let named: Vec<String> = p.iter().map(|(f, v)| format!("{}={v}", ds.features[f])).collect();
        println!("user {:<4} mentions {}", ds.users[u], named.join(" "));
    }
    for (j, p) in items.iter().enumerate() {
        let named: Vec<String> = p.iter().map(|(f, v)| format!("{}={v:+}", ds.features[f])).collect();
        println!("item {:<7} sentiment {}", ds.items[j], named.join(" "));
    }
    let spec = candidate_thresholds(&users, ds.n_features(), 3, Normalization::PerEntityTotal);
    for (f, ts) in spec.thresholds.iter().enumerate() {
        println!("user thresholds for {:<8} {ts:?}", ds.features[f]);
    }
    Ok(())
}
