//! Missing-view scenarios, predictive metrics, robustness scores and the
//! cross-validated evaluation harness.

mod harness;
pub mod metrics;
mod report;
mod scenarios;

pub use harness::{
    cross_validate, evaluate_model, fit, rank_views, resolve_top_view, scenario_list, score, sweep, EvalConfig, Fitted,
    RunConfig, ScenarioKind,
};
pub use report::{EvalReport, ReportRow, Summary, SummaryRow};
pub use scenarios::{simulate_missing, MissingScenario};
