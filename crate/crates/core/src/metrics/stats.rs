use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use super::span::{LABEL_CHILD, LABEL_PARENT};
use super::{MetricSpan, SpanKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("percentile of an empty sample set")]
pub struct EmptySamples;

/// Nearest-rank percentile: the `ceil(pct/100 * n)`-th smallest sample
/// (1-based). Works for any partially ordered scalar; incomparable values
/// (NaN) are treated as equal.
pub fn nearest_rank<T: Copy + PartialOrd>(samples: &[T], pct: u32) -> Result<T, EmptySamples> {
    let n = samples.len();
    if n == 0 {
        return Err(EmptySamples);
    }
    let pct = pct.clamp(1, 100) as usize;
    let rank = (pct * n).div_ceil(100).max(1);
    let mut work = samples.to_vec();
    let (_, v, _) = work.select_nth_unstable_by(rank - 1, |a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(*v)
}

pub fn p95<T: Copy + PartialOrd>(samples: &[T]) -> Result<T, EmptySamples> {
    nearest_rank(samples, 95)
}

pub fn mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

/// How one request's invocation tree looked at report time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequestOutcome {
    Complete {
        end_to_end_ms: f64,
    },
    /// Some span in the tree failed.
    Failed,
    /// Entry span missing or an issued invocation never ran.
    Incomplete,
}

impl RequestOutcome {
    pub fn end_to_end_ms(&self) -> Option<f64> {
        match self {
            RequestOutcome::Complete { end_to_end_ms } => Some(*end_to_end_ms),
            _ => None,
        }
    }
}

/// Joins spans by request id. A tree is complete when its entry Handler span
/// exists and every invocation started by a Comm span has a Handler span;
/// its latency is last finish minus first start.
pub fn end_to_end(spans: &[MetricSpan]) -> BTreeMap<String, RequestOutcome> {
    let mut groups: BTreeMap<&str, Vec<&MetricSpan>> = BTreeMap::new();
    for s in spans {
        groups.entry(s.request_id.as_str()).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(rid, group)| (rid.to_string(), classify_tree(&group)))
        .collect()
}

fn classify_tree(group: &[&MetricSpan]) -> RequestOutcome {
    if group.iter().any(|s| s.failed) {
        return RequestOutcome::Failed;
    }
    let ran: HashSet<&str> = group
        .iter()
        .filter(|s| s.kind == SpanKind::Handler)
        .map(|s| s.invocation_id.as_str())
        .collect();
    let has_entry = group
        .iter()
        .any(|s| s.kind == SpanKind::Handler && s.label(LABEL_PARENT).is_none());
    let children_ran = group
        .iter()
        .filter(|s| s.kind == SpanKind::Comm)
        .filter_map(|s| s.label(LABEL_CHILD))
        .all(|child| ran.contains(child));
    if !has_entry || !children_ran {
        return RequestOutcome::Incomplete;
    }
    let first = group.iter().map(|s| s.start).fold(f64::INFINITY, f64::min);
    let last = group.iter().map(|s| s.end()).fold(f64::NEG_INFINITY, f64::max);
    RequestOutcome::Complete {
        end_to_end_ms: last - first,
    }
}
