//! Rank metrics, counterfactual removal experiments and latency benchmarks.

mod bench;
mod counterfactual;
mod metrics;

pub use bench::{bench, fatn_bytes, LatencyStats};
pub use counterfactual::{
    counterfactual_eval, counterfactual_grid, random_removal, CounterfactualReport, CounterfactualRow, KSummary,
    Reference, RemovalContext, RemovalEffect,
};
pub use metrics::{eval_orders, map_at_l, mean_and_se, order_spearman, sign_test, spearman, RankEvalReport};
