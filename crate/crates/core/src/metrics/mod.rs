//! Span collection, end-to-end joins, percentiles and run reports.

mod collector;
mod report;
mod span;
mod stats;

pub use collector::{Collector, DEFAULT_CAPACITY};
pub use report::{fmt_num, AutoscalePoint, FunctionStats, ReportFormat, RunReport, ScenarioEcho, WorkflowStats};
pub use span::{
    InvalidDuration, MetricSpan, SpanContext, SpanKind, LABEL_CHILD, LABEL_DST, LABEL_MODE, LABEL_PARENT, LABEL_SRC,
    LABEL_TARGET,
};
pub use stats::{end_to_end, mean, nearest_rank, p95, EmptySamples, RequestOutcome};
