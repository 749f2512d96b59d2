//! Ablation metrics and the budget-sweep comparison.

mod compare;
mod metrics;
mod planted;

pub use compare::{
    attribute, attribute_budgeted, compare_methods, derive_seed, mean_stderr, measure_results,
    min_budget, orphans, run_grid, CellOutcome, CellStatus, CompareSpec, ComparisonReport,
    InstanceOutcome, KValue, LedgerTotal, MethodSettings, Regeneration, ReportRow, ANCHOR_CHARGE,
    ANCHOR_CONVENTION, CSV_HEADER,
};
pub use metrics::{
    consistency_score, generate_ablated, top_k_drop, Consistency, GeneratedResponse,
    ResponseGenerator, SimilarityScorer, TokenF1, TopKAblation, TopKDrop,
};
pub use planted::{planted_instances, recovered, recovery_rows, PlantedInstance, PlantedSpec};
