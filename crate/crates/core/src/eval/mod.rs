//! Evaluation: ranking metrics, cross validation, baselines, cold-start
//! runs, parameter sweeps and a planted-structure data generator.

pub mod baselines;
pub mod cold_start;
pub mod cv;
pub mod metrics;
pub mod sweep;
pub mod synth;

pub use baselines::{baseline_flat_mf, FactRanker, FlatMf, MostPopular, Ranker};
pub use cold_start::{cold_start_eval, evaluate_cold_users, split_users, ColdStartPoint, ColdStartReport};
pub use cv::{assign_folds, cross_validate, evaluate_fold, evaluate_ranker, CvReport, FoldAssignment, FoldResult, Method};
pub use metrics::{mean_std, ndcg_at_k, Gain};
pub use sweep::{apply_axis, sweep, Axis, SweepRow, SweepTable};
pub use synth::{synth_generate, Synthetic, SyntheticSpec};
