use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;

use super::{id_source, run_closed_loop, run_cron, EntryPoint, LoadMode, LoadProfile, LoadStats, ProfileMode};
use super::{BackendSpec, Scenario};
use crate::clock::{RealClock, SharedClock};
use crate::gateway::SimInvoker;
use crate::graph::{load_bundle, WorkflowGraph};
use crate::metrics::{end_to_end, MetricSpan, RequestOutcome, RunReport, ScenarioEcho};
use crate::runtime::{InvocationEnvelope, Invoker, Runtime, RuntimeConfig};
use crate::sim::Simulation;
use crate::storage::{BackendKind, BackendRegistry, FileStore, MemoryStore, QueueStore, RemoteStore};
use crate::topology::{default_speed, TierDescriptor, Topology};
use crate::workloads::{standard_handlers, IotState};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Startup(String),
    #[error("tier `{0}` has no url")]
    NoUrl(String),
    #[error("{0}")]
    Transport(String),
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub report: RunReport,
    pub spans: Vec<MetricSpan>,
    pub load: LoadStats,
    /// Shared IoT state of the sim runtime (absent in real mode).
    pub iot: Option<Arc<IotState>>,
}

/// Loads every bundle and applies the scenario's placement.
pub fn load_workflows(s: &Scenario) -> Result<Vec<WorkflowGraph>, RunError> {
    let mut graphs = Vec::new();
    let mut placed = BTreeSet::new();
    for dir in &s.workflow_dirs {
        let g = load_bundle(dir)
            .map_err(|errs| RunError::Config(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")))?;
        let here: BTreeMap<String, String> = s
            .placement
            .iter()
            .filter(|(f, _)| g.node(f).is_some())
            .map(|(f, t)| (f.clone(), t.clone()))
            .collect();
        placed.extend(here.keys().cloned());
        graphs.push(g.with_placement(&here).map_err(|e| RunError::Config(e.to_string()))?);
    }
    if let Some(f) = s.placement.keys().find(|f| !placed.contains(*f)) {
        return Err(RunError::Config(format!(
            "place.{f}: no loaded workflow has that function"
        )));
    }
    Ok(graphs)
}

/// Default iot/edge/cloud tiers plus whatever the scenario adds or
/// overrides; delays are symmetric.
pub fn build_topology(s: &Scenario) -> Result<Topology, RunError> {
    let mut t = Topology::three_tier();
    for (name, spec) in &s.tiers {
        if !t.contains(name) {
            t.add_tier(TierDescriptor::new(name, default_speed(name)))
                .map_err(|e| RunError::Config(e.to_string()))?;
        }
        let tier = t.tier_mut(name).expect("tier just ensured");
        if let Some(speed) = spec.speed {
            tier.speed = speed;
        }
        tier.base_url = spec.url.clone();
    }
    for (a, b, ms) in &s.delays {
        t.set_symmetric_delay(a, b, *ms)
            .map_err(|e| RunError::Config(format!("delay.{a}.{b}: {e}")))?;
    }
    Ok(t)
}

/// `memory` and `queue` exist unless overridden. With `local`, remote
/// backends are replaced by in-process stores of the same kind, so a
/// real-mode scenario also runs in simulation.
pub fn build_storage(s: &Scenario, local: bool) -> Result<BackendRegistry, RunError> {
    let mut specs: BTreeMap<String, BackendSpec> = BTreeMap::new();
    specs.insert("memory".into(), BackendSpec::Memory { budget: None });
    specs.insert("queue".into(), BackendSpec::Queue);
    specs.extend(s.backends.clone());
    let mut reg = BackendRegistry::new();
    for (name, spec) in specs {
        let backend: Arc<dyn crate::storage::Backend> = match spec {
            BackendSpec::Memory { budget: None } => Arc::new(MemoryStore::default()),
            BackendSpec::Memory { budget: Some(b) } => Arc::new(MemoryStore::new(b)),
            BackendSpec::Queue => Arc::new(QueueStore::new()),
            BackendSpec::File { dir } => {
                Arc::new(FileStore::new(dir).map_err(|e| RunError::Config(format!("backend.{name}: {e}")))?)
            }
            BackendSpec::Remote { .. } if local => Arc::new(MemoryStore::default()),
            BackendSpec::RemoteQueue { .. } if local => Arc::new(QueueStore::new()),
            BackendSpec::Remote { url } => Arc::new(
                RemoteStore::new(&url, BackendKind::Object)
                    .map_err(|e| RunError::Config(format!("backend.{name}: {e}")))?,
            ),
            BackendSpec::RemoteQueue { url } => Arc::new(
                RemoteStore::new(&url, BackendKind::Queue)
                    .map_err(|e| RunError::Config(format!("backend.{name}: {e}")))?,
            ),
        };
        reg.register(&name, backend)
            .map_err(|e| RunError::Config(e.to_string()))?;
    }
    Ok(reg)
}

fn runtime_config(s: &Scenario) -> RuntimeConfig {
    RuntimeConfig {
        seed: s.seed,
        sync_timeout: s.sync_timeout,
        autoscale: s.autoscale,
        autoscale_interval: s.autoscale_interval,
    }
}

/// Builds a runtime serving every workflow of the scenario on `clock`.
pub fn build_runtime(
    s: &Scenario,
    clock: SharedClock,
    local_storage: bool,
) -> Result<(Arc<Runtime>, Arc<IotState>), RunError> {
    let (handlers, iot) = standard_handlers(s.video, s.iot_params()).map_err(|e| RunError::Startup(e.to_string()))?;
    let mut b = Runtime::builder(clock)
        .handlers(handlers)
        .storage(build_storage(s, local_storage)?)
        .topology(build_topology(s)?)
        .config(runtime_config(s));
    for g in load_workflows(s)? {
        b = b.workflow(g);
    }
    let rt = b.build().map_err(|e| RunError::Startup(e.to_string()))?;
    Ok((rt, iot))
}

/// Entry requests executed directly on a runtime; the load generator sits
/// on the entry function's tier.
pub struct SimEntry {
    pub runtime: Arc<Runtime>,
    pub invoker: Arc<dyn Invoker>,
}

#[async_trait]
impl EntryPoint for SimEntry {
    async fn call(&self, env: InvocationEnvelope) -> Result<(), String> {
        self.runtime
            .execute(env, self.invoker.clone())
            .await
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

/// Entry requests posted to the entry tier's gateway.
pub struct HttpEntry {
    client: reqwest::Client,
    base_url: String,
}

impl HttpEntry {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, RunError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RunError::Transport(e.to_string()))?;
        Ok(HttpEntry {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
        })
    }
}

#[async_trait]
impl EntryPoint for HttpEntry {
    async fn call(&self, env: InvocationEnvelope) -> Result<(), String> {
        let url = format!("{}/function/{}", self.base_url, env.function);
        let resp = self
            .client
            .post(url)
            .json(&env)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("{}: {}", resp.status(), resp.text().await.unwrap_or_default()))
        }
    }
}

fn echo(s: &Scenario) -> ScenarioEcho {
    ScenarioEcho {
        name: s.name.clone(),
        config: s.echo.clone(),
    }
}

/// Drives the scenario's load against `entries` (one per workflow).
async fn drive(
    s: &Scenario,
    clock: SharedClock,
    graphs: Vec<(WorkflowGraph, Arc<dyn EntryPoint>)>,
) -> Result<LoadStats, RunError> {
    let ids = id_source(s.seed);
    let duration = s.scaled_duration();
    let mut total = LoadStats::default();
    match s.mode {
        LoadMode::Closed => {
            let [(g, entry)] = <[_; 1]>::try_from(graphs)
                .map_err(|_| RunError::Config("closed-loop mode runs exactly one workflow".into()))?;
            let profile = LoadProfile {
                mode: ProfileMode::ClosedLoop {
                    concurrency: s.concurrency,
                },
                duration,
                seed: s.seed,
            };
            total = run_closed_loop(clock, &g, &profile, entry, ids)
                .await
                .map_err(|e| RunError::Config(e.to_string()))?;
        }
        LoadMode::Cron => {
            let runs = graphs
                .iter()
                .map(|(g, entry)| run_cron(clock.clone(), g, duration, entry.clone(), ids.clone()));
            for r in futures::future::join_all(runs).await {
                total.merge(r.map_err(|e| RunError::Config(e.to_string()))?);
            }
        }
    }
    Ok(total)
}

/// Runs the scenario on the simulated clock. Deterministic for a given
/// scenario and seed.
pub fn run_sim(s: &Scenario) -> Result<RunOutcome, RunError> {
    let sim = Simulation::new();
    let clock: SharedClock = sim.clock();
    let (rt, iot) = build_runtime(s, clock.clone(), true)?;
    let invoker: Arc<dyn Invoker> = SimInvoker::new(rt.clone());
    let graphs: Vec<(WorkflowGraph, Arc<dyn EntryPoint>)> = rt
        .workflows()
        .map(|g| {
            let entry: Arc<dyn EntryPoint> = Arc::new(SimEntry {
                runtime: rt.clone(),
                invoker: invoker.clone(),
            });
            (g.as_ref().clone(), entry)
        })
        .collect();
    rt.start_autoscaler();
    let scenario = s.clone();
    let load = sim.block_on(async move { drive(&scenario, clock, graphs).await })?;
    rt.stop();
    // Lets async tails and the autoscale task wind down.
    sim.run_until_idle();
    let spans = rt.collector().snapshot();
    let mut report = RunReport::build(echo(s), s.time_scale, &spans, &load.issued, rt.autoscale_trace());
    report.invocations = rt.invocation_counts();
    Ok(RunOutcome {
        report,
        spans,
        load,
        iot: Some(iot),
    })
}

async fn fetch_json<T: serde::de::DeserializeOwned>(client: &reqwest::Client, url: &str) -> Result<T, RunError> {
    let resp = client
        .get(url)
        .send()
        .await
        .map_err(|e| RunError::Transport(format!("{url}: {e}")))?;
    resp.json()
        .await
        .map_err(|e| RunError::Transport(format!("{url}: {e}")))
}

/// Spans of `issued` requests gathered from every tier that has a url.
async fn collect_spans(urls: &[String], issued: &BTreeSet<&str>) -> Result<Vec<MetricSpan>, RunError> {
    let client = reqwest::Client::new();
    let mut spans = Vec::new();
    for url in urls {
        let all: Vec<MetricSpan> = fetch_json(&client, &format!("{url}/metrics")).await?;
        spans.extend(all.into_iter().filter(|s| issued.contains(s.request_id.as_str())));
    }
    spans.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then_with(|| a.invocation_id.cmp(&b.invocation_id))
    });
    Ok(spans)
}

/// Runs the scenario against the tier gateways named by `tier.<n>.url`.
/// Must be called inside a tokio runtime. Spans and invocation counts are
/// pulled from every gateway afterwards; asynchronous tails get up to the
/// scenario's `drain` to finish.
pub async fn run_real(s: &Scenario) -> Result<RunOutcome, RunError> {
    let topology = build_topology(s)?;
    let graphs = load_workflows(s)?;
    let clock: SharedClock = Arc::new(RealClock::new());
    let mut targets = Vec::new();
    for g in graphs {
        let tier = g.entry_template().tier.clone();
        let url = topology
            .tier(&tier)
            .and_then(|t| t.base_url.clone())
            .ok_or_else(|| RunError::NoUrl(tier.clone()))?;
        let entry: Arc<dyn EntryPoint> = Arc::new(HttpEntry::new(&url, s.sync_timeout + s.drain)?);
        targets.push((g, entry));
    }
    let urls: Vec<String> = topology
        .tiers()
        .filter_map(|t| t.base_url.as_ref().map(|u| u.trim_end_matches('/').to_string()))
        .collect();
    let load = drive(s, clock.clone(), targets).await?;

    let issued: BTreeSet<&str> = load.issued.iter().map(String::as_str).collect();
    let deadline = clock.now_ms() + s.drain.as_secs_f64() * 1e3;
    let spans = loop {
        let spans = collect_spans(&urls, &issued).await?;
        let tree = end_to_end(&spans);
        let settled = issued
            .iter()
            .all(|id| matches!(tree.get(*id), Some(RequestOutcome::Complete { .. })));
        if settled || clock.now_ms() >= deadline {
            break spans;
        }
        clock.sleep(Duration::from_millis(200)).await;
    };
    let client = reqwest::Client::new();
    let mut invocations: BTreeMap<String, u64> = BTreeMap::new();
    for url in &urls {
        let counts: BTreeMap<String, u64> = fetch_json(&client, &format!("{url}/invocations")).await?;
        for (f, n) in counts {
            *invocations.entry(f).or_default() += n;
        }
    }
    let mut report = RunReport::build(echo(s), s.time_scale, &spans, &load.issued, Vec::new());
    report.invocations = invocations;
    Ok(RunOutcome {
        report,
        spans,
        load,
        iot: None,
    })
}
