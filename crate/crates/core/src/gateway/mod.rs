//! Cross-tier invocation: an in-process invoker with injected network
//! delays, an HTTP invoker, and the per-tier HTTP service.

mod http;
mod server;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

pub use http::HttpInvoker;
pub use server::{bind, router, serve, serve_on, GatewayError, GatewayHandle, GatewayState};

use crate::clock::with_timeout;
use crate::metrics::{MetricSpan, SpanContext};
use crate::runtime::{comm_span, InvocationEnvelope, InvokeError, InvokeOutcome, Invoker, Runtime};
use crate::template::{NextSpec, SyncMode};

/// Dispatches successors to the local runtime after sleeping the one-way
/// delay between the tiers, and again on the way back for sync calls. On
/// the simulated clock the Comm span of a sync hop is exactly twice the
/// one-way delay.
pub struct SimInvoker {
    runtime: Arc<Runtime>,
}

impl SimInvoker {
    pub fn new(runtime: Arc<Runtime>) -> Arc<Self> {
        Arc::new(SimInvoker { runtime })
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs `env` on `runtime` as if it had crossed a link of `one_way`.
pub(crate) async fn dispatch_local(
    runtime: Arc<Runtime>,
    me: Arc<dyn Invoker>,
    from_tier: &str,
    target: &NextSpec,
    env: InvocationEnvelope,
    caller: &SpanContext,
    one_way: Duration,
) -> (Result<InvokeOutcome, InvokeError>, MetricSpan) {
    let clock = runtime.clock().clone();
    let start = clock.now_ms();
    match env.sync {
        SyncMode::Sync => {
            let budget = runtime.config().sync_timeout;
            let call = {
                let clock = clock.clone();
                let env = env.clone();
                async move {
                    clock.sleep(one_way).await;
                    let result = runtime.execute(env, me).await;
                    if result.is_ok() {
                        clock.sleep(one_way).await;
                    }
                    result
                }
            };
            let outcome = with_timeout(clock.as_ref(), budget, call).await;
            let end = clock.now_ms();
            match outcome {
                Some(Ok(r)) => {
                    let d = 2.0 * ms(one_way);
                    let span = comm_span(caller, &env, from_tier, &target.tier, end - d, d);
                    let done = InvokeOutcome::Completed {
                        end_to_end_ms: r.end_to_end_ms,
                        outputs: r.outputs,
                    };
                    (Ok(done), span)
                }
                Some(Err(e)) => {
                    let span = comm_span(caller, &env, from_tier, &target.tier, start, ms(one_way));
                    (Err(InvokeError::Downstream(e.to_string())), span)
                }
                None => {
                    let span = comm_span(caller, &env, from_tier, &target.tier, start, end - start);
                    let err = InvokeError::Timeout {
                        tier: target.tier.clone(),
                        budget_ms: budget.as_millis() as u64,
                    };
                    (Err(err), span)
                }
            }
        }
        SyncMode::Async => {
            let child = env.clone();
            let c = clock.clone();
            clock.spawn(Box::pin(async move {
                c.sleep(one_way).await;
                // Failures are recorded as spans by execute itself.
                let _ = runtime.execute(child, me).await;
            }));
            let span = comm_span(caller, &env, from_tier, &target.tier, start, ms(one_way));
            (Ok(InvokeOutcome::Accepted), span)
        }
    }
}

fn unreachable_span(caller: &SpanContext, env: &InvocationEnvelope, from: &str, to: &str, at: f64) -> MetricSpan {
    comm_span(caller, env, from, to, at, 0.0)
}

#[async_trait]
impl Invoker for SimInvoker {
    async fn invoke(
        self: Arc<Self>,
        from_tier: &str,
        target: &NextSpec,
        env: InvocationEnvelope,
        caller: &SpanContext,
    ) -> (Result<InvokeOutcome, InvokeError>, MetricSpan) {
        let one_way = match self.runtime.topology().one_way(from_tier, &target.tier) {
            Ok(d) => d,
            Err(_) => {
                let now = self.runtime.clock().now_ms();
                let span = unreachable_span(caller, &env, from_tier, &target.tier, now);
                return (Err(InvokeError::TierUnreachable(target.tier.clone())), span);
            }
        };
        let runtime = self.runtime.clone();
        dispatch_local(runtime, self, from_tier, target, env, caller, one_way).await
    }
}
