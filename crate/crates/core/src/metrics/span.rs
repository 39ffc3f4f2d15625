use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Handler,
    Load,
    Store,
    Comm,
}

impl SpanKind {
    pub const ALL: [SpanKind; 4] = [SpanKind::Handler, SpanKind::Load, SpanKind::Store, SpanKind::Comm];

    pub fn as_str(self) -> &'static str {
        match self {
            SpanKind::Handler => "handler",
            SpanKind::Load => "load",
            SpanKind::Store => "store",
            SpanKind::Comm => "comm",
        }
    }
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label on Handler spans naming the parent invocation; absent on entries.
pub const LABEL_PARENT: &str = "parent";
/// Label on Comm spans naming the invocation they started.
pub const LABEL_CHILD: &str = "child";
pub const LABEL_SRC: &str = "src";
pub const LABEL_DST: &str = "dst";
/// Label on Comm spans naming the invoked function.
pub const LABEL_TARGET: &str = "target";
pub const LABEL_MODE: &str = "mode";

/// Identity shared by every span one invocation emits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanContext {
    pub workflow: String,
    pub function: String,
    pub tier: String,
    pub request_id: String,
    pub invocation_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("span duration must be a non-negative number, got {0}")]
pub struct InvalidDuration(pub f64);

/// One timed segment of an invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpan")]
pub struct MetricSpan {
    pub kind: SpanKind,
    pub workflow: String,
    pub function: String,
    pub tier: String,
    pub request_id: String,
    pub invocation_id: String,
    /// Milliseconds on the run's clock.
    pub start: f64,
    duration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawSpan {
    kind: SpanKind,
    workflow: String,
    function: String,
    tier: String,
    request_id: String,
    invocation_id: String,
    start: f64,
    duration: f64,
    #[serde(default)]
    size: Option<u64>,
    failed: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    labels: BTreeMap<String, String>,
}

impl TryFrom<RawSpan> for MetricSpan {
    type Error = InvalidDuration;

    fn try_from(raw: RawSpan) -> Result<Self, Self::Error> {
        let ctx = SpanContext {
            workflow: raw.workflow,
            function: raw.function,
            tier: raw.tier,
            request_id: raw.request_id,
            invocation_id: raw.invocation_id,
        };
        let mut span = MetricSpan::new(raw.kind, &ctx, raw.start, raw.duration)?;
        span.size = raw.size;
        span.failed = raw.failed;
        span.error = raw.error;
        span.labels = raw.labels;
        Ok(span)
    }
}

impl MetricSpan {
    pub fn new(kind: SpanKind, ctx: &SpanContext, start: f64, duration: f64) -> Result<Self, InvalidDuration> {
        if !duration.is_finite() || duration < 0.0 {
            return Err(InvalidDuration(duration));
        }
        Ok(MetricSpan {
            kind,
            workflow: ctx.workflow.clone(),
            function: ctx.function.clone(),
            tier: ctx.tier.clone(),
            request_id: ctx.request_id.clone(),
            invocation_id: ctx.invocation_id.clone(),
            start,
            duration,
            size: None,
            failed: false,
            error: None,
            labels: BTreeMap::new(),
        })
    }

    /// Span from `start` to `end`; clock skew never yields a negative duration.
    pub fn between(kind: SpanKind, ctx: &SpanContext, start: f64, end: f64) -> Self {
        let duration = (end - start).max(0.0);
        MetricSpan::new(kind, ctx, start, duration)
            .unwrap_or_else(|_| MetricSpan::new(kind, ctx, start, 0.0).expect("zero duration is valid"))
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn with_size(mut self, size: u64) -> Self {
        self.size = Some(size);
        self
    }

    pub fn with_label(mut self, key: &str, value: impl Into<String>) -> Self {
        self.labels.insert(key.to_string(), value.into());
        self
    }

    pub fn fail(mut self, error: impl fmt::Display) -> Self {
        self.failed = true;
        self.error = Some(error.to_string());
        self
    }

    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> SpanContext {
        SpanContext {
            workflow: "w".into(),
            function: "f".into(),
            tier: "edge".into(),
            request_id: "r".into(),
            invocation_id: "r:0".into(),
        }
    }

    #[test]
    fn negative_duration_rejected() {
        assert!(MetricSpan::new(SpanKind::Handler, &ctx(), 0.0, -1.0).is_err());
        assert!(MetricSpan::new(SpanKind::Handler, &ctx(), 0.0, f64::NAN).is_err());
        assert!(MetricSpan::new(SpanKind::Handler, &ctx(), 0.0, 0.0).is_ok());
    }

    #[test]
    fn json_rejects_negative_duration() {
        let span = MetricSpan::new(SpanKind::Load, &ctx(), 1.0, 2.0).unwrap().with_size(10);
        let json = serde_json::to_string(&span).unwrap();
        let back: MetricSpan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, span);
        let bad = json.replace("\"duration\":2.0", "\"duration\":-2.0");
        assert!(serde_json::from_str::<MetricSpan>(&bad).is_err());
    }
}
