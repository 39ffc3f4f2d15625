//! The function wrapper: load inputs, run the handler, store outputs, pick
//! successors and invoke them.

pub mod autoscale;
pub mod envelope;
pub mod handler;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use thiserror::Error;

pub use autoscale::{autoscale_tick, AutoscalePolicy, Autoscaler, InvalidPolicy, Permit, Pool};
pub use envelope::{mix_seed, seeded_rng, InvocationEnvelope, RequestIds, ENVELOPE_VERSION};
pub use handler::{
    noop, relay, DuplicateHandler, Handler, HandlerContext, HandlerError, HandlerOutput, HandlerRegistry,
};

use crate::clock::SharedClock;
use crate::graph::{GraphError, WorkflowGraph};
use crate::metrics::{
    AutoscalePoint, Collector, MetricSpan, SpanContext, SpanKind, LABEL_CHILD, LABEL_DST, LABEL_MODE, LABEL_PARENT,
    LABEL_SRC, LABEL_TARGET,
};
use crate::storage::{BackendKind, BackendRegistry, DataObject, StorageError};
use crate::template::{NextSpec, StorageRef};
use crate::topology::Topology;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("input `{0}` missing")]
    InputMissing(String),
    #[error("storage: {0}")]
    Storage(StorageError),
    #[error("handler of `{function}` failed: {cause}")]
    Handler { function: String, cause: String },
    #[error("handler of `{function}` panicked: {cause}")]
    HandlerPanic { function: String, cause: String },
    #[error("`{from}` produced `{data_name}`, which matches no declared branch")]
    NoBranchMatch { from: String, data_name: String },
    #[error("`{function}` produced `{data_name}`, which matches no declared output")]
    UnmatchedOutput { function: String, data_name: String },
    #[error("downstream `{function}` on `{tier}` failed: {cause}")]
    DownstreamFailure {
        function: String,
        tier: String,
        cause: String,
    },
    #[error("downstream `{function}` on `{tier}` timed out after {budget_ms} ms")]
    DownstreamTimeout {
        function: String,
        tier: String,
        budget_ms: u64,
    },
}

impl From<StorageError> for ExecError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::NotFound(r) => ExecError::InputMissing(r),
            other => ExecError::Storage(other),
        }
    }
}

/// Outcome of one invocation and, for sync successors, everything below it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    /// Refs written by this invocation followed by those of sync successors.
    pub outputs: Vec<String>,
    /// Spans produced in this process by this invocation (not by successors).
    pub spans: Vec<MetricSpan>,
    /// From the first local span's start to the last response.
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InvokeOutcome {
    Completed {
        end_to_end_ms: f64,
        outputs: Vec<String>,
    },
    /// Async hand-off acknowledged.
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvokeError {
    #[error("tier `{0}` unreachable")]
    TierUnreachable(String),
    #[error("tier `{tier}` did not answer within {budget_ms} ms")]
    Timeout { tier: String, budget_ms: u64 },
    #[error("{0}")]
    Downstream(String),
}

/// Transport seam between one invocation and its successors.
#[async_trait]
pub trait Invoker: Send + Sync + 'static {
    /// Invokes `env` on `target.tier`. Returns the Comm span for the hop,
    /// attributed to `caller`.
    async fn invoke(
        self: Arc<Self>,
        from_tier: &str,
        target: &NextSpec,
        env: InvocationEnvelope,
        caller: &SpanContext,
    ) -> (Result<InvokeOutcome, InvokeError>, MetricSpan);
}

/// Comm span for the hop that starts invocation `child`.
pub fn comm_span(
    caller: &SpanContext,
    child: &InvocationEnvelope,
    src: &str,
    dst: &str,
    start: f64,
    duration: f64,
) -> MetricSpan {
    let span = MetricSpan::new(SpanKind::Comm, caller, start, duration.max(0.0))
        .expect("comm duration clamped to be non-negative");
    span.with_label(LABEL_CHILD, child.invocation_id.clone())
        .with_label(LABEL_SRC, src)
        .with_label(LABEL_DST, dst)
        .with_label(LABEL_TARGET, child.function.clone())
        .with_label(LABEL_MODE, child.sync.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    /// Run seed handed to every handler.
    pub seed: u64,
    pub sync_timeout: Duration,
    pub autoscale: AutoscalePolicy,
    pub autoscale_interval: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            seed: 0,
            sync_timeout: Duration::from_secs(30),
            autoscale: AutoscalePolicy::default(),
            autoscale_interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("startup validation failed: {}", .0.join("; "))]
pub struct StartupValidation(pub Vec<String>);

pub struct RuntimeBuilder {
    clock: SharedClock,
    workflows: Vec<WorkflowGraph>,
    handlers: HandlerRegistry,
    storage: BackendRegistry,
    topology: Topology,
    collector: Option<Arc<Collector>>,
    config: RuntimeConfig,
}

impl RuntimeBuilder {
    pub fn workflow(mut self, g: WorkflowGraph) -> Self {
        self.workflows.push(g);
        self
    }

    pub fn handlers(mut self, h: HandlerRegistry) -> Self {
        self.handlers = h;
        self
    }

    pub fn storage(mut self, s: BackendRegistry) -> Self {
        self.storage = s;
        self
    }

    pub fn topology(mut self, t: Topology) -> Self {
        self.topology = t;
        self
    }

    pub fn collector(mut self, c: Arc<Collector>) -> Self {
        self.collector = Some(c);
        self
    }

    pub fn config(mut self, c: RuntimeConfig) -> Self {
        self.config = c;
        self
    }

    /// Checks that every handler, backend and tier a served function needs
    /// resolves, then builds the runtime.
    pub fn build(self) -> Result<Arc<Runtime>, StartupValidation> {
        let mut problems = Vec::new();
        if let Err(e) = self.config.autoscale.validate() {
            problems.push(e.to_string());
        }
        let mut workflows = BTreeMap::new();
        let mut pools = BTreeMap::new();
        for g in self.workflows {
            for t in g.nodes() {
                if !self.handlers.contains(&t.handler) {
                    problems.push(format!("`{}`: handler `{}` is not registered", t.name, t.handler));
                }
                if !self.topology.contains(&t.tier) {
                    problems.push(format!("`{}`: tier `{}` is not configured", t.name, t.tier));
                }
                let refs = t.inputs.iter().chain(t.outputs.iter().map(|o| &o.target));
                for r in refs {
                    if !self.storage.contains(r.backend()) {
                        problems.push(format!("`{}`: backend `{}` is not registered", t.name, r.backend()));
                    }
                }
                pools.insert((g.name().to_string(), t.name.clone()), Pool::new(self.config.autoscale));
            }
            let name = g.name().to_string();
            if workflows.insert(name.clone(), Arc::new(g)).is_some() {
                problems.push(format!("workflow `{name}` loaded twice"));
            }
        }
        if !problems.is_empty() {
            problems.dedup();
            return Err(StartupValidation(problems));
        }
        Ok(Arc::new(Runtime {
            clock: self.clock,
            workflows,
            handlers: self.handlers,
            storage: Arc::new(self.storage),
            topology: Arc::new(self.topology),
            collector: self.collector.unwrap_or_default(),
            config: self.config,
            pools,
            trace: Mutex::new(Vec::new()),
            invocations: Mutex::new(BTreeMap::new()),
            stopped: Arc::new(AtomicBool::new(false)),
        }))
    }
}

pub struct Runtime {
    clock: SharedClock,
    workflows: BTreeMap<String, Arc<WorkflowGraph>>,
    handlers: HandlerRegistry,
    storage: Arc<BackendRegistry>,
    topology: Arc<Topology>,
    collector: Arc<Collector>,
    config: RuntimeConfig,
    pools: BTreeMap<(String, String), Arc<Pool>>,
    trace: Mutex<Vec<AutoscalePoint>>,
    /// Accepted invocations per function, counted independently of spans.
    invocations: Mutex<BTreeMap<String, u64>>,
    stopped: Arc<AtomicBool>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

impl Runtime {
    pub fn builder(clock: SharedClock) -> RuntimeBuilder {
        RuntimeBuilder {
            clock,
            workflows: Vec::new(),
            handlers: HandlerRegistry::new(),
            storage: BackendRegistry::new(),
            topology: Topology::three_tier(),
            collector: None,
            config: RuntimeConfig::default(),
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn collector(&self) -> &Arc<Collector> {
        &self.collector
    }

    pub fn storage(&self) -> &Arc<BackendRegistry> {
        &self.storage
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn workflow(&self, name: &str) -> Option<&Arc<WorkflowGraph>> {
        self.workflows.get(name)
    }

    pub fn workflows(&self) -> impl Iterator<Item = &Arc<WorkflowGraph>> {
        self.workflows.values()
    }

    /// Looks up the workflow serving `function`, if exactly one does.
    pub fn workflow_of(&self, function: &str) -> Option<&Arc<WorkflowGraph>> {
        let mut found = self.workflows.values().filter(|g| g.node(function).is_some());
        let first = found.next()?;
        found.next().is_none().then_some(first)
    }

    pub fn pool(&self, workflow: &str, function: &str) -> Option<&Arc<Pool>> {
        self.pools.get(&(workflow.to_string(), function.to_string()))
    }

    pub fn invocation_counts(&self) -> BTreeMap<String, u64> {
        self.invocations.lock().clone()
    }

    pub fn autoscale_trace(&self) -> Vec<AutoscalePoint> {
        self.trace.lock().clone()
    }

    /// Starts the periodic autoscale task; it runs until [`stop`](Self::stop).
    pub fn start_autoscaler(self: &Arc<Self>) {
        {
            let now = self.clock.now_ms();
            let mut trace = self.trace.lock();
            for ((_, function), pool) in &self.pools {
                trace.push(AutoscalePoint {
                    t_ms: now,
                    function: function.clone(),
                    replicas: pool.replicas(),
                });
            }
        }
        let rt = self.clone();
        let interval = self.config.autoscale_interval;
        self.clock.spawn(Box::pin(async move {
            loop {
                rt.clock.sleep(interval).await;
                if rt.stopped.load(Ordering::SeqCst) {
                    break;
                }
                let now = rt.clock.now_ms();
                for ((_, function), pool) in &rt.pools {
                    if let Some(replicas) = pool.tick(now) {
                        rt.trace.lock().push(AutoscalePoint {
                            t_ms: now,
                            function: function.clone(),
                            replicas,
                        });
                    }
                }
            }
        }));
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
    }

    fn record(&self, spans: &mut Vec<MetricSpan>, span: MetricSpan) {
        self.collector.record(span.clone());
        spans.push(span);
    }

    /// Runs one invocation and, through `invoker`, its successors.
    ///
    /// Every span produced here is recorded in the collector and returned;
    /// on error the failing step's span is flagged failed.
    pub async fn execute(
        self: &Arc<Self>,
        env: InvocationEnvelope,
        invoker: Arc<dyn Invoker>,
    ) -> Result<ExecutionResult, ExecError> {
        env.validate().map_err(ExecError::InvalidEnvelope)?;
        let g = self
            .workflows
            .get(&env.workflow)
            .ok_or_else(|| ExecError::UnknownWorkflow(env.workflow.clone()))?
            .clone();
        let node = g
            .node(&env.function)
            .ok_or_else(|| ExecError::UnknownFunction(env.function.clone()))?
            .clone();
        let handler = self
            .handlers
            .get(&node.handler)
            .ok_or_else(|| ExecError::UnknownFunction(env.function.clone()))?
            .clone();
        *self.invocations.lock().entry(node.name.clone()).or_default() += 1;
        let speed = self.topology.speed(&node.tier).unwrap_or(1.0);
        let ctx = SpanContext {
            workflow: env.workflow.clone(),
            function: node.name.clone(),
            tier: node.tier.clone(),
            request_id: env.request_id.clone(),
            invocation_id: env.invocation_id.clone(),
        };
        let clock = self.clock.clone();
        let mut spans = Vec::new();

        let pool = self.pools[&(env.workflow.clone(), node.name.clone())].clone();
        let permit = pool.acquire().await;
        let started = clock.now_ms();

        // Inputs: refs handed over by the caller replace the primary input.
        let mut refs: Vec<StorageRef> = Vec::new();
        if env.data_keys.is_empty() {
            refs.extend(node.inputs.iter().cloned());
        } else {
            for k in &env.data_keys {
                let r: StorageRef = k
                    .parse()
                    .map_err(|e: crate::template::InvalidRef| ExecError::InvalidEnvelope(e.to_string()))?;
                refs.push(r);
            }
            refs.extend(node.inputs.iter().skip(1).cloned());
        }
        let mut inputs = Vec::with_capacity(refs.len());
        for r in &refs {
            let (result, span) = self.storage.timed_load(r, clock.as_ref(), &ctx).await;
            self.record(&mut spans, span);
            inputs.push(result?);
        }

        // Handler.
        let hctx = HandlerContext {
            workflow: env.workflow.clone(),
            function: node.name.clone(),
            tier: node.tier.clone(),
            request_id: env.request_id.clone(),
            invocation_id: env.invocation_id.clone(),
            seed: self.config.seed,
            now_ms: clock.now_ms(),
            speed,
        };
        let h_start = clock.now_ms();
        let called = catch_unwind(AssertUnwindSafe(|| handler.call(&hctx, &inputs)));
        let output = match called {
            Ok(Ok(out)) => {
                clock.compute(hctx.scaled(out.cost)).await;
                Ok(out)
            }
            Ok(Err(e)) => Err(ExecError::Handler {
                function: node.name.clone(),
                cause: e.0,
            }),
            Err(p) => Err(ExecError::HandlerPanic {
                function: node.name.clone(),
                cause: panic_message(p),
            }),
        };
        let mut h_span = MetricSpan::between(SpanKind::Handler, &ctx, h_start, clock.now_ms());
        if let Some(parent) = &env.parent_id {
            h_span = h_span.with_label(LABEL_PARENT, parent.clone());
        }
        // Resolve every produced name before storing, so a mismatch fails the
        // handler span rather than leaving half-written outputs.
        let resolved = output.and_then(|out| {
            let mut plan = Vec::with_capacity(out.objects.len());
            for (name, bytes) in out.objects {
                let next = g.successors(&node.name, &name).map_err(|e| match e {
                    GraphError::NoBranchMatch { from, data_name } => ExecError::NoBranchMatch { from, data_name },
                    other => ExecError::UnknownFunction(other.to_string()),
                })?;
                let spec = node.output_named(&name).ok_or_else(|| ExecError::UnmatchedOutput {
                    function: node.name.clone(),
                    data_name: name.clone(),
                })?;
                plan.push((spec.target.clone(), bytes, next));
            }
            Ok((plan, out.labels))
        });
        let (plan, labels) = match resolved {
            Ok(v) => v,
            Err(e) => {
                self.record(&mut spans, h_span.fail(&e));
                return Err(e);
            }
        };
        for (k, v) in labels {
            h_span = h_span.with_label(&k, v);
        }
        self.record(&mut spans, h_span);

        // Outputs. Object data feeding a successor is written per invocation
        // so concurrent requests never read each other's data.
        let mut outputs = Vec::new();
        let mut handoffs = Vec::new();
        for (target, bytes, next) in plan {
            let qualify = !node.nexts.is_empty() && self.storage.kind(target.backend()) == Some(BackendKind::Object);
            let r = if qualify {
                target.child(&env.invocation_id)
            } else {
                target
            };
            let obj = DataObject::new(r.key(), bytes, clock.now_ms().max(0.0) as u64);
            let (result, span) = self.storage.timed_store(&r, obj, clock.as_ref(), &ctx).await;
            self.record(&mut spans, span);
            result?;
            outputs.push(r.to_string());
            handoffs.push((r, next));
        }
        drop(permit);

        // Successors.
        let mut calls = Vec::new();
        let mut ordinal = 0;
        for (r, next) in handoffs {
            for target in next {
                let child = env.child(
                    &target.function,
                    ordinal,
                    vec![r.to_string()],
                    clock.now_ms().max(0.0) as u64,
                    node.sync,
                );
                ordinal += 1;
                let invoker = invoker.clone();
                let ctx = &ctx;
                let from = node.tier.as_str();
                calls.push(async move {
                    let (result, span) = invoker.invoke(from, &target, child, ctx).await;
                    (target, result, span)
                });
            }
        }
        let results = futures::future::join_all(calls).await;
        let mut failure = None;
        for (target, result, span) in results {
            let span = match &result {
                Err(e) => span.fail(e),
                Ok(_) => span,
            };
            self.record(&mut spans, span);
            match result {
                Ok(InvokeOutcome::Completed { outputs: o, .. }) => outputs.extend(o),
                Ok(InvokeOutcome::Accepted) => {}
                Err(e) if failure.is_none() => {
                    failure = Some(match e {
                        InvokeError::Timeout { tier, budget_ms } => ExecError::DownstreamTimeout {
                            function: target.function,
                            tier,
                            budget_ms,
                        },
                        other => ExecError::DownstreamFailure {
                            function: target.function,
                            tier: target.tier,
                            cause: other.to_string(),
                        },
                    })
                }
                Err(_) => {}
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let first = spans.iter().map(|s| s.start).fold(started, f64::min);
        let last = spans.iter().map(MetricSpan::end).fold(clock.now_ms(), f64::max);
        Ok(ExecutionResult {
            outputs,
            spans,
            end_to_end_ms: last - first,
        })
    }
}
