//! Load generation: closed-loop streams and cron bursts, plus scenario
//! files and whole-run orchestration.

mod run;
mod scenario;

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::channel::oneshot;
use parking_lot::Mutex;
use thiserror::Error;

pub use run::{
    build_runtime, build_storage, build_topology, load_workflows, run_real, run_sim, HttpEntry, RunError, RunOutcome,
    SimEntry,
};
pub use scenario::{
    load_scenario, parse_duration, parse_scale, parse_scenario, BackendSpec, LoadMode, Scenario, ScenarioError,
    TierSpec, DEFAULT_TIME_SCALE, TIME_SCALE_ENV,
};

use crate::clock::SharedClock;
use crate::graph::WorkflowGraph;
use crate::runtime::{InvocationEnvelope, RequestIds};
use crate::template::CronSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMode {
    ClosedLoop {
        concurrency: u32,
    },
    /// Uses the entry template's cron spec.
    CronBurst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadProfile {
    pub mode: ProfileMode,
    pub duration: Duration,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidProfile {
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("workflow `{0}` has no cron entry")]
    NotCron(String),
}

impl LoadProfile {
    pub fn validate(&self) -> Result<(), InvalidProfile> {
        if self.duration.is_zero() {
            return Err(InvalidProfile::ZeroDuration);
        }
        if let ProfileMode::ClosedLoop { concurrency: 0 } = self.mode {
            return Err(InvalidProfile::ZeroConcurrency);
        }
        Ok(())
    }
}

/// Where entry requests go: straight into a runtime, or over HTTP.
#[async_trait]
pub trait EntryPoint: Send + Sync {
    async fn call(&self, env: InvocationEnvelope) -> Result<(), String>;
}

/// Shared, seeded source of request ids.
pub type IdSource = Arc<Mutex<RequestIds>>;

pub fn id_source(seed: u64) -> IdSource {
    Arc::new(Mutex::new(RequestIds::new(seed)))
}

/// What a load generator did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadStats {
    /// Request ids in issue order.
    pub issued: Vec<String>,
    pub failed: u64,
    pub max_inflight: u32,
    /// Cron firing times, ms after the run start.
    pub firings: Vec<f64>,
    /// Closed-loop workers stopped because a request took no time at all on
    /// the simulated clock (the loop could never advance).
    pub stalled: u32,
}

impl LoadStats {
    pub fn merge(&mut self, other: LoadStats) {
        self.issued.extend(other.issued);
        self.failed += other.failed;
        self.max_inflight = self.max_inflight.max(other.max_inflight);
        self.firings.extend(other.firings);
        self.stalled += other.stalled;
    }
}

#[derive(Default)]
struct Gauge {
    issued: Mutex<Vec<String>>,
    failed: AtomicU64,
    inflight: AtomicU32,
    max: AtomicU32,
}

impl Gauge {
    fn begin(&self, ids: &IdSource) -> String {
        let id = ids.lock().next_id();
        self.issued.lock().push(id.clone());
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max.fetch_max(now, Ordering::SeqCst);
        id
    }

    fn end(&self, ok: bool) {
        if !ok {
            self.failed.fetch_add(1, Ordering::SeqCst);
        }
        self.inflight.fetch_sub(1, Ordering::SeqCst);
    }

    fn stats(&self) -> LoadStats {
        LoadStats {
            issued: self.issued.lock().clone(),
            failed: self.failed.load(Ordering::SeqCst),
            max_inflight: self.max.load(Ordering::SeqCst),
            ..Default::default()
        }
    }
}

fn entry_env(g: &WorkflowGraph, id: &str, clock: &SharedClock) -> InvocationEnvelope {
    let t = g.entry_template();
    InvocationEnvelope::entry(g.name(), &t.name, id, clock.now_ms().max(0.0) as u64, t.sync)
}

/// Keeps `concurrency` entry requests in flight until `duration` elapses;
/// each completion immediately issues the next. Requests already in flight
/// at the deadline run to completion. Failures are counted, never fatal.
pub async fn run_closed_loop(
    clock: SharedClock,
    g: &WorkflowGraph,
    profile: &LoadProfile,
    entry: Arc<dyn EntryPoint>,
    ids: IdSource,
) -> Result<LoadStats, InvalidProfile> {
    profile.validate()?;
    let ProfileMode::ClosedLoop { concurrency } = profile.mode else {
        return Err(InvalidProfile::ZeroConcurrency);
    };
    let gauge = Gauge::default();
    let stalled = AtomicU32::new(0);
    let end = clock.now_ms() + profile.duration.as_secs_f64() * 1e3;
    let workers = (0..concurrency).map(|_| async {
        while clock.now_ms() < end {
            let id = gauge.begin(&ids);
            let before = clock.now_ms();
            let ok = entry.call(entry_env(g, &id, &clock)).await.is_ok();
            gauge.end(ok);
            if clock.is_simulated() && clock.now_ms() == before {
                stalled.fetch_add(1, Ordering::SeqCst);
                break;
            }
        }
    });
    futures::future::join_all(workers).await;
    let mut stats = gauge.stats();
    stats.stalled = stalled.load(Ordering::SeqCst);
    Ok(stats)
}

/// Number of firings in a run: one at every `k·period < duration`,
/// including t = 0.
pub fn cron_firings(period: Duration, duration: Duration) -> u64 {
    let (p, d) = (period.as_nanos(), duration.as_nanos());
    d.div_ceil(p) as u64
}

/// Fires the entry's cron burst at every period boundary, anchored to the
/// start so firings never drift; a firing does not wait for earlier ones.
/// Returns once every issued request has finished.
pub async fn run_cron(
    clock: SharedClock,
    g: &WorkflowGraph,
    duration: Duration,
    entry: Arc<dyn EntryPoint>,
    ids: IdSource,
) -> Result<LoadStats, InvalidProfile> {
    if duration.is_zero() {
        return Err(InvalidProfile::ZeroDuration);
    }
    let cron: CronSpec = g
        .entry_template()
        .cron
        .ok_or_else(|| InvalidProfile::NotCron(g.name().to_string()))?;
    let period = Duration::from_millis(cron.period_ms());
    let gauge = Arc::new(Gauge::default());
    let start = clock.now_ms();
    let mut firings = Vec::new();
    let mut done = Vec::new();
    for k in 0..cron_firings(period, duration) {
        let at = start + (period * k as u32).as_secs_f64() * 1e3;
        let wait = at - clock.now_ms();
        if wait > 0.0 {
            clock.sleep(Duration::from_secs_f64(wait / 1e3)).await;
        }
        firings.push(clock.now_ms() - start);
        for _ in 0..cron.burst() {
            let id = gauge.begin(&ids);
            let env = entry_env(g, &id, &clock);
            let (tx, rx) = oneshot::channel();
            let (entry, gauge) = (entry.clone(), gauge.clone());
            clock.spawn(Box::pin(async move {
                let ok = entry.call(env).await.is_ok();
                gauge.end(ok);
                let _ = tx.send(());
            }));
            done.push(rx);
        }
    }
    for rx in done {
        let _ = rx.await;
    }
    let mut stats = gauge.stats();
    stats.firings = firings;
    Ok(stats)
}
