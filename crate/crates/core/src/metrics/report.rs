use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{end_to_end, mean, p95, RequestOutcome};
use super::{MetricSpan, SpanKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEcho {
    pub name: String,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionStats {
    pub name: String,
    pub tier: String,
    pub kind: SpanKind,
    pub count: u64,
    pub failures: u64,
    pub mean_ms: Option<f64>,
    pub p95_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowStats {
    pub requests: u64,
    pub complete: u64,
    pub incomplete: u64,
    pub mean_end_to_end_ms: Option<f64>,
    pub p95_end_to_end_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoscalePoint {
    pub t_ms: f64,
    pub function: String,
    pub replicas: u32,
}

/// Aggregated outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioEcho,
    pub time_scale: f64,
    pub functions: Vec<FunctionStats>,
    pub workflow: WorkflowStats,
    pub autoscale: Vec<AutoscalePoint>,
    /// Invocations accepted per function, as counted by the runtime(s).
    #[serde(default)]
    pub invocations: BTreeMap<String, u64>,
    /// Per-request outcomes, keyed by request id. Not part of the document.
    #[serde(skip)]
    pub requests: BTreeMap<String, RequestOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl RunReport {
    /// Builds a report from raw spans. `issued` lists every request id the
    /// load generator sent; ids without any span count as incomplete.
    pub fn build(
        scenario: ScenarioEcho,
        time_scale: f64,
        spans: &[MetricSpan],
        issued: &[String],
        autoscale: Vec<AutoscalePoint>,
    ) -> RunReport {
        // (function, tier, kind) -> (count, failures, durations)
        #[allow(clippy::type_complexity)]
        let mut groups: BTreeMap<(&str, &str, SpanKind), (u64, u64, Vec<f64>)> = BTreeMap::new();
        for s in spans {
            let g = groups
                .entry((s.function.as_str(), s.tier.as_str(), s.kind))
                .or_default();
            g.0 += 1;
            if s.failed {
                g.1 += 1;
            } else {
                g.2.push(s.duration());
            }
        }
        let functions = groups
            .into_iter()
            .map(|((name, tier, kind), (count, failures, samples))| FunctionStats {
                name: name.to_string(),
                tier: tier.to_string(),
                kind,
                count,
                failures,
                mean_ms: mean(&samples),
                p95_ms: p95(&samples).ok(),
            })
            .collect();

        let mut requests = end_to_end(spans);
        for rid in issued {
            requests.entry(rid.clone()).or_insert(RequestOutcome::Incomplete);
        }
        let latencies: Vec<f64> = requests.values().filter_map(RequestOutcome::end_to_end_ms).collect();
        let workflow = WorkflowStats {
            requests: requests.len() as u64,
            complete: latencies.len() as u64,
            incomplete: requests
                .values()
                .filter(|o| matches!(o, RequestOutcome::Incomplete))
                .count() as u64,
            mean_end_to_end_ms: mean(&latencies),
            p95_end_to_end_ms: p95(&latencies).ok(),
        };
        RunReport {
            scenario,
            time_scale,
            functions,
            workflow,
            autoscale,
            invocations: BTreeMap::new(),
            requests,
        }
    }

    pub fn function(&self, name: &str, kind: SpanKind) -> Option<&FunctionStats> {
        self.functions.iter().find(|f| f.name == name && f.kind == kind)
    }

    pub fn mean_end_to_end_ms(&self) -> Option<f64> {
        self.workflow.mean_end_to_end_ms
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            ReportFormat::Csv => self.to_csv(),
        }
    }

    /// One row per (function, tier, kind) plus an `end_to_end` summary row
    /// whose `count` is complete requests and `failures` the rest.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,tier,kind,count,failures,mean_ms,p95_ms\n");
        for f in &self.functions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                f.name,
                f.tier,
                f.kind,
                f.count,
                f.failures,
                fmt_num(f.mean_ms),
                fmt_num(f.p95_ms)
            );
        }
        let w = &self.workflow;
        let _ = writeln!(
            out,
            "{},,end_to_end,{},{},{},{}",
            self.scenario.name,
            w.complete,
            w.requests - w.complete,
            fmt_num(self.mean_end_to_end_ms()),
            fmt_num(w.p95_end_to_end_ms)
        );
        out
    }
}

/// Same digits serde_json would print, empty for missing values.
pub fn fmt_num(v: Option<f64>) -> String {
    v.map(|x| serde_json::to_string(&x).unwrap_or_default())
        .unwrap_or_default()
}
