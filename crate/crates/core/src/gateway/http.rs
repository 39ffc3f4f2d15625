use std::sync::Arc;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::Deserialize;

use super::{dispatch_local, ms, unreachable_span};
use crate::metrics::{MetricSpan, SpanContext};
use crate::runtime::{comm_span, InvocationEnvelope, InvokeError, InvokeOutcome, Invoker, Runtime};
use crate::template::{NextSpec, SyncMode};

/// Invokes successors on other tiers over HTTP; successors on the local
/// tier run in-process. Configured one-way delays are slept on both legs,
/// so real runs see the same network model as simulated ones.
pub struct HttpInvoker {
    runtime: Arc<Runtime>,
    local_tier: Option<String>,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct SyncReply {
    end_to_end_ms: f64,
    #[serde(default)]
    outputs: Vec<String>,
}

#[derive(Deserialize)]
struct ErrorReply {
    error: String,
}

impl HttpInvoker {
    /// `local_tier` is the tier this process serves, if any.
    pub fn new(runtime: Arc<Runtime>, local_tier: Option<&str>) -> Arc<Self> {
        let client = reqwest::Client::builder()
            .timeout(runtime.config().sync_timeout)
            .build()
            .expect("http client");
        Arc::new(HttpInvoker {
            runtime,
            local_tier: local_tier.map(str::to_string),
            client,
        })
    }

    fn url(&self, tier: &str, function: &str) -> Option<reqwest::Url> {
        let base = self.runtime.topology().tier(tier)?.base_url.as_deref()?;
        let mut url = reqwest::Url::parse(base).ok()?;
        url.path_segments_mut()
            .ok()?
            .pop_if_empty()
            .push("function")
            .push(function);
        Some(url)
    }
}

#[async_trait]
impl Invoker for HttpInvoker {
    async fn invoke(
        self: Arc<Self>,
        from_tier: &str,
        target: &NextSpec,
        env: InvocationEnvelope,
        caller: &SpanContext,
    ) -> (Result<InvokeOutcome, InvokeError>, MetricSpan) {
        let clock = self.runtime.clock().clone();
        let unreachable = |at: f64| {
            (
                Err(InvokeError::TierUnreachable(target.tier.clone())),
                unreachable_span(caller, &env, from_tier, &target.tier, at),
            )
        };
        let Ok(one_way) = self.runtime.topology().one_way(from_tier, &target.tier) else {
            return unreachable(clock.now_ms());
        };
        if self.local_tier.as_deref() == Some(target.tier.as_str()) {
            let runtime = self.runtime.clone();
            return dispatch_local(runtime, self, from_tier, target, env, caller, one_way).await;
        }
        let Some(url) = self.url(&target.tier, &target.function) else {
            return unreachable(clock.now_ms());
        };

        let start = clock.now_ms();
        clock.sleep(one_way).await;
        let sent = self.client.post(url).json(&env).send().await;
        let resp = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                let span = comm_span(caller, &env, from_tier, &target.tier, start, clock.now_ms() - start);
                let err = InvokeError::Timeout {
                    tier: target.tier.clone(),
                    budget_ms: self.runtime.config().sync_timeout.as_millis() as u64,
                };
                return (Err(err), span);
            }
            Err(_) => return unreachable(start),
        };
        let status = resp.status();
        let body = resp.bytes().await.unwrap_or_default();
        let outcome = match (env.sync, status) {
            (SyncMode::Sync, StatusCode::OK) => match serde_json::from_slice::<SyncReply>(&body) {
                Ok(r) => {
                    clock.sleep(one_way).await;
                    Ok(InvokeOutcome::Completed {
                        end_to_end_ms: r.end_to_end_ms,
                        outputs: r.outputs,
                    })
                }
                Err(e) => Err(InvokeError::Downstream(format!("malformed reply: {e}"))),
            },
            (SyncMode::Async, StatusCode::ACCEPTED) => Ok(InvokeOutcome::Accepted),
            (_, StatusCode::GATEWAY_TIMEOUT) => Err(InvokeError::Timeout {
                tier: target.tier.clone(),
                budget_ms: self.runtime.config().sync_timeout.as_millis() as u64,
            }),
            (_, s) => {
                let msg = serde_json::from_slice::<ErrorReply>(&body)
                    .map(|e| e.error)
                    .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
                Err(InvokeError::Downstream(format!("status {s}: {msg}")))
            }
        };
        let end = clock.now_ms();
        // The network share of a sync round trip is what the callee did not
        // spend executing.
        let span = match &outcome {
            Ok(InvokeOutcome::Completed { end_to_end_ms, .. }) => {
                let d = (end - start - end_to_end_ms).max(0.0);
                comm_span(caller, &env, from_tier, &target.tier, end - d, d)
            }
            _ => comm_span(
                caller,
                &env,
                from_tier,
                &target.tier,
                start,
                (end - start).max(ms(one_way)),
            ),
        };
        (outcome, span)
    }
}
