//! The `fact` command line.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, config or data),
//! 2 runtime failure. Data goes to stdout, diagnostics to stderr.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{cross_validate, ndcg_at_k, sweep, synth_generate, Axis, Gain, Method, SyntheticSpec};
use crate::ingest::{filter_dataset, parse_dataset, parse_dataset_with, read_vocab, Dataset, FilterThresholds, Format};
use crate::persist::{load_model, save_model};
use crate::recommend::{
    explain, rank_items, recommend_topk, validate_explanation, Answer, InterviewSession, Recommendation, Templates,
    UserQuery,
};
use crate::service::{run_server, ServiceConfig};
use crate::train::{alternate, FacTModel, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fact", version, about = "Factorization-tree recommender")]
pub struct Cli {
    /// Training config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and filter a raw review file into a clean dataset.
    Ingest(IngestArgs),
    /// Generate a planted-structure dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a model on held-out reviews, or cross-validate a method.
    Evaluate(EvaluateArgs),
    /// Cross-validate over values of one setting.
    Sweep(SweepArgs),
    /// Top-K items for a known user.
    Recommend(RecommendArgs),
    /// Explain one recommendation.
    Explain(ExplainArgs),
    /// Interactive cold-start interview on the terminal.
    Interview(InterviewArgs),
    /// HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON array of allowed feature names.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    pub format: String,
    /// Filter thresholds, e.g. `min_reviews_per_user=5`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings, e.g. `n_users=50 sigma=0.1`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Config overrides, e.g. `h=3 hp.lambda_b=0.5`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Score this model on `--data`; without it, cross-validate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// NDCG cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100")]
    pub k: Vec<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// fact, bpr-mf, mf or most-popular.
    #[arg(long, default_value = "fact")]
    pub method: String,
    /// rating or binary.
    #[arg(long, default_value = "rating")]
    pub gain: String,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10,50")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub user: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Keep the user's training items in the list.
    #[arg(long)]
    pub include_seen: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub item: String,
    /// Explanation templates (JSON).
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterviewArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Static UI assets served under /ui/.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Allowed CORS origin (any when absent).
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Session time to live in seconds.
    #[arg(long, default_value_t = 1800)]
    pub session_ttl: u64,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FACT_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() || matches!(e, Error::Model(_) | Error::EmptyDataset | Error::EmptyAfterFiltering) {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be at least 1".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("worker pool already initialised; --threads ignored");
        }
    }
    match &cli.command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Sweep(a) => run_sweep(cli, a),
        Command::Recommend(a) => recommend(cli, a),
        Command::Explain(a) => explain_cmd(cli, a),
        Command::Interview(a) => interview(a),
        Command::Serve(a) => serve(a),
    }
}

/// Applies `key=value` overrides to a serialisable config. Keys may be
/// dotted (`hp.d`); a bare key that is not top-level resolves to the one
/// nested table that has it. Values are TOML literals, or plain strings.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut root = toml::Table::try_from(base).map_err(|e| Error::Internal(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.len() == 1 && !root.contains_key(&path[0]) {
            let owners: Vec<String> = root
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(&path[0])))
                .map(|(k, _)| k.clone())
                .collect();
            if owners.len() != 1 {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            path.insert(0, owners[0].clone());
        }
        let (last, parents) = path.split_last().expect("non-empty key");
        let mut table = &mut root;
        for p in parents {
            table = table
                .get_mut(p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if !table.contains_key(last) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        table.insert(last.clone(), value);
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))
}

fn read_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Config file, then overrides, then the dedicated flags.
fn train_config(cli: &Cli, depth: Option<usize>, dim: Option<usize>, overrides: &[String]) -> Result<TrainConfig> {
    let base = match &cli.config {
        Some(p) => read_config_file(p)?,
        None => TrainConfig::default(),
    };
    let mut cfg = apply_overrides(&base, overrides)?;
    if let Some(h) = depth {
        cfg.h = h;
    }
    if let Some(d) = dim {
        cfg.hp.d = d;
    }
    if let Some(s) = cli.seed {
        cfg.hp.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_templates(path: Option<&Path>) -> Result<Templates> {
    match path {
        None => Ok(Templates::default()),
        Some(p) => Templates::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    path: &'a Path,
    users: usize,
    items: usize,
    features: usize,
    reviews: usize,
}

fn summarize(cli: &Cli, path: &Path, ds: &Dataset) -> Result<()> {
    let s = DatasetSummary {
        path,
        users: ds.n_users(),
        items: ds.n_items(),
        features: ds.n_features(),
        reviews: ds.reviews.len(),
    };
    if cli.json {
        print_json(&s)
    } else {
        println!(
            "{}: {} users, {} items, {} features, {} reviews",
            path.display(),
            s.users,
            s.items,
            s.features,
            s.reviews
        );
        Ok(())
    }
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    ds.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let format: Format = a.format.parse()?;
    let vocab = a.vocab.as_deref().map(read_vocab).transpose()?;
    let raw = parse_dataset_with(&a.data, format, vocab, Default::default())?;
    let th: FilterThresholds = apply_overrides(&FilterThresholds::default(), &a.overrides)?;
    let ds = filter_dataset(&raw, &th)?;
    write_dataset(&ds, &a.out)?;
    summarize(cli, &a.out, &ds)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = apply_overrides(&SyntheticSpec::default(), &a.overrides)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let ds = synth_generate(&spec)?.dataset;
    write_dataset(&ds, &a.out)?;
    summarize(cli, &a.out, &ds)
}

/// Where the effective config of a model is written.
pub fn config_dump_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    model_path.with_file_name(name)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, a.depth, a.dim, &a.overrides)?;
    let ds = parse_dataset(&a.data, Format::JsonLines)?;
    let model = alternate(&ds, &cfg)?;
    save_model(&model, &a.out)?;
    let dump = config_dump_path(&a.out);
    let text = toml::to_string(&cfg).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
    if cli.json {
        print_json(&model.report)
    } else {
        let r = &model.report;
        println!(
            "trained {} users x {} items, depth {}/{}; objective {:.6} -> {:.6} after {} alternations ({:?})",
            model.n_users(),
            model.n_items(),
            model.user_tree.depth(),
            model.item_tree.depth(),
            r.initial_objective,
            r.final_objective(),
            r.objectives.len(),
            r.stop_reason
        );
        println!("model: {}\nconfig: {}", a.out.display(), dump.display());
        Ok(())
    }
}

fn write_ndcg_csv<W: Write>(w: W, ks: &[usize], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ks.iter().map(|k| format!("ndcg@{k}")))?;
    for r in rows {
        out.write_record(r.iter().map(|v| v.to_string()))?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Validation("--k needs positive cutoffs".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct HoldoutReport {
    ks: Vec<usize>,
    ndcg: Vec<f64>,
    users: usize,
    skipped_reviews: usize,
}

/// Mean NDCG of `model` on `ds`, matching users and items by name. Items
/// the user trained on are excluded from the ranking.
pub fn evaluate_model(model: &FacTModel, ds: &Dataset, ks: &[usize], gain: Gain) -> (Vec<f64>, usize, usize) {
    let mut relevance: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut skipped = 0;
    for r in &ds.reviews {
        match (model.user_index(&ds.users[r.user]), model.item_index(&ds.items[r.item])) {
            (Some(u), Some(j)) => {
                relevance.entry(u).or_default().insert(j, gain.of(r.rating));
            }
            _ => skipped += 1,
        }
    }
    let items = model.item_factors();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut totals = vec![0.0; ks.len()];
    for (&u, rel) in &relevance {
        let ranked: Vec<usize> = rank_items(&model.user_factor(u), &items, max_k, &model.seen[u])
            .into_iter()
            .map(|s| s.item)
            .collect();
        for (t, &k) in totals.iter_mut().zip(ks) {
            *t += ndcg_at_k(&ranked, rel, k);
        }
    }
    let n = relevance.len().max(1) as f64;
    (totals.into_iter().map(|t| t / n).collect(), relevance.len(), skipped)
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    check_ks(&a.k)?;
    let gain: Gain = a.gain.parse()?;
    let ds = parse_dataset(&a.data, Format::JsonLines)?;
    let row = if let Some(path) = &a.model {
        let model = load_model(path)?;
        let (ndcg, users, skipped) = evaluate_model(&model, &ds, &a.k, gain);
        if users == 0 {
            return Err(Error::Validation("no review in --data matches a model user and item".into()));
        }
        if cli.json {
            print_json(&HoldoutReport {
                ks: a.k.clone(),
                ndcg: ndcg.clone(),
                users,
                skipped_reviews: skipped,
            })?;
        }
        ndcg
    } else {
        let cfg = train_config(cli, a.depth, a.dim, &a.overrides)?;
        let method = match a.method.as_str() {
            "fact" => Method::Fact(cfg.clone()),
            "most-popular" => Method::MostPopular,
            "bpr-mf" | "mf" => Method::FlatMf {
                hp: cfg.hp.clone(),
                with_bpr: a.method == "bpr-mf",
                rounds: cfg.init_rounds + cfg.max_alternations,
            },
            other => return Err(Error::Validation(format!("unknown method {other:?}"))),
        };
        let report = cross_validate(&ds, &method, a.folds, &a.k, gain, cfg.hp.seed)?;
        if report.sparse_users > 0 {
            log::warn!("{} users with fewer than {} reviews kept in training only", report.sparse_users, a.folds);
        }
        if cli.json {
            print_json(&report)?;
        }
        report.mean
    };
    match &a.out {
        Some(p) => {
            let w = create(p)?;
            write_ndcg_csv(w, &a.k, &[row])
        }
        None if cli.json => Ok(()),
        None => write_ndcg_csv(std::io::stdout().lock(), &a.k, &[row]),
    }
}

fn run_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    check_ks(&a.k)?;
    let axis: Axis = a.axis.parse()?;
    let cfg = train_config(cli, a.depth, a.dim, &a.overrides)?;
    let ds = parse_dataset(&a.data, Format::JsonLines)?;
    let table = sweep(&ds, &cfg, axis, &a.values, a.folds, &a.k, cfg.hp.seed);
    for (v, e) in &table.failures {
        eprintln!("{}={v} failed: {e}", axis.name());
    }
    if let Some(p) = &a.out {
        table.write_csv(create(p)?)?;
    }
    if cli.json {
        print_json(&table)?;
    } else if a.out.is_none() {
        table.write_csv(std::io::stdout().lock())?;
    }
    if table.rows.is_empty() {
        return Err(Error::Internal("every sweep cell failed".into()));
    }
    Ok(())
}

fn recommend(cli: &Cli, a: &RecommendArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let top = recommend_topk(&model, UserQuery::Name(&a.user), a.k, !a.include_seen)?;
    if cli.json {
        #[derive(Serialize)]
        struct Row<'a> {
            item: &'a str,
            item_id: usize,
            score: f64,
        }
        let rows: Vec<Row> = top
            .iter()
            .map(|s| Row {
                item: &model.items[s.item],
                item_id: s.item,
                score: s.score,
            })
            .collect();
        return print_json(&rows);
    }
    for (rank, s) in top.iter().enumerate() {
        println!("{:>3}. {}  {:.4}", rank + 1, model.items[s.item], s.score);
    }
    Ok(())
}

fn explain_cmd(cli: &Cli, a: &ExplainArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let templates = load_templates(a.templates.as_deref())?;
    let u = model.user_index(&a.user).ok_or_else(|| Error::UnknownUser(a.user.clone()))?;
    let j = model.item_index(&a.item).ok_or_else(|| Error::UnknownItem(a.item.clone()))?;
    let exp = explain(&model, &templates, u, j)?;
    validate_explanation(&model, &model.user_tree.path_of_entity(u), j, &exp).map_err(Error::Internal)?;
    if cli.json {
        print_json(&exp)
    } else {
        println!("{}", exp.rendered);
        Ok(())
    }
}

fn print_recommendations(recs: &[Recommendation]) {
    for (rank, r) in recs.iter().enumerate() {
        println!("{:>3}. {}  {:.4}\n     {}", rank + 1, r.item, r.score, r.explanation.rendered);
    }
}

/// Question loop on any reader and writer; the terminal flow of the
/// service's session endpoints.
pub fn interview_loop<R: BufRead, W: Write>(
    model: &FacTModel,
    templates: &Templates,
    k: usize,
    mut input: R,
    mut out: W,
) -> Result<(InterviewSession, Vec<Recommendation>)> {
    let io = |e| Error::io("<terminal>", e);
    let mut session = InterviewSession::start(model, "terminal".into());
    while let Some(q) = session.question(model, templates) {
        write!(out, "{} [like/dislike/not sure] ", q.prompt).map_err(io)?;
        out.flush().map_err(io)?;
        let mut line = String::new();
        if input.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Validation("input ended before the interview finished".into()));
        }
        match line.parse::<Answer>() {
            Ok(a) => session.answer(model, a)?,
            Err(e) => writeln!(out, "{e}").map_err(io)?,
        }
    }
    let recs = session.recommend(model, templates, k)?;
    Ok((session, recs))
}

fn interview(a: &InterviewArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let templates = load_templates(a.templates.as_deref())?;
    let stdin = std::io::stdin();
    let (_, recs) = interview_loop(&model, &templates, a.k, stdin.lock(), std::io::stderr())?;
    print_recommendations(&recs);
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let templates = load_templates(a.templates.as_deref())?;
    let cfg = ServiceConfig {
        session_ttl: std::time::Duration::from_secs(a.session_ttl),
        cors_origin: a.cors_origin.clone(),
        ui_dir: a.ui.clone(),
        ..Default::default()
    };
    run_server(&a.model, a.bind, templates, &cfg, None)
}
