use std::collections::VecDeque;
use std::sync::Arc;

use futures::channel::oneshot;
use parking_lot::Mutex;
use thiserror::Error;

/// Replica scaling rule for one function pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoscalePolicy {
    pub min_replicas: u32,
    pub max_replicas: u32,
    /// Relative step per scaling decision, in (0, 1].
    pub factor: f64,
    /// Scale up above this many in-flight invocations per replica.
    pub high_watermark: f64,
    /// Scale down below this many in-flight invocations per replica.
    pub low_watermark: f64,
    pub cooldown_ms: f64,
}

impl Default for AutoscalePolicy {
    fn default() -> Self {
        AutoscalePolicy {
            min_replicas: 25,
            max_replicas: 100,
            factor: 0.25,
            high_watermark: 1.0,
            low_watermark: 0.25,
            cooldown_ms: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid autoscale policy: {0}")]
pub struct InvalidPolicy(pub String);

impl AutoscalePolicy {
    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        if self.min_replicas == 0 || self.min_replicas > self.max_replicas {
            return Err(InvalidPolicy("need 1 <= min_replicas <= max_replicas".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(InvalidPolicy("factor must lie in (0, 1]".into()));
        }
        if !(self.low_watermark >= 0.0 && self.low_watermark < self.high_watermark) {
            return Err(InvalidPolicy("need 0 <= low_watermark < high_watermark".into()));
        }
        if self.cooldown_ms.is_nan() || self.cooldown_ms < 0.0 {
            return Err(InvalidPolicy("cooldown must be non-negative".into()));
        }
        Ok(())
    }
}

// Guards ceil/floor against products like 40 * 1.25 landing a hair off an integer.
const ROUNDING_SLACK: f64 = 1e-9;

/// One scaling decision, assuming the cooldown has elapsed.
pub fn autoscale_tick(replicas: u32, inflight: u32, policy: &AutoscalePolicy) -> u32 {
    let r = f64::from(replicas.max(1));
    let load = f64::from(inflight) / r;
    let next = if load > policy.high_watermark {
        let up = (r * (1.0 + policy.factor) - ROUNDING_SLACK).ceil() as u32;
        up.min(policy.max_replicas)
    } else if load < policy.low_watermark {
        let down = (r * (1.0 - policy.factor) + ROUNDING_SLACK).floor() as u32;
        down.max(policy.min_replicas)
    } else {
        replicas
    };
    next.clamp(policy.min_replicas, policy.max_replicas)
}

/// [`autoscale_tick`] plus cooldown bookkeeping.
#[derive(Debug, Clone)]
pub struct Autoscaler {
    policy: AutoscalePolicy,
    replicas: u32,
    last_change_ms: Option<f64>,
}

impl Autoscaler {
    pub fn new(policy: AutoscalePolicy) -> Self {
        Autoscaler {
            replicas: policy.min_replicas,
            policy,
            last_change_ms: None,
        }
    }

    pub fn replicas(&self) -> u32 {
        self.replicas
    }

    pub fn policy(&self) -> &AutoscalePolicy {
        &self.policy
    }

    /// Returns the replica count after observing `inflight` at `now_ms`.
    pub fn tick(&mut self, now_ms: f64, inflight: u32) -> u32 {
        let cooled = self
            .last_change_ms
            .is_none_or(|t| now_ms - t >= self.policy.cooldown_ms);
        if cooled {
            let next = autoscale_tick(self.replicas, inflight, &self.policy);
            if next != self.replicas {
                self.replicas = next;
                self.last_change_ms = Some(now_ms);
            }
        }
        self.replicas
    }
}

struct PoolState {
    scaler: Autoscaler,
    busy: u32,
    waiting: VecDeque<oneshot::Sender<Permit>>,
}

/// Worker slots for one function. At most `replicas` invocations hold a
/// permit at once; the rest queue in arrival order.
pub struct Pool {
    state: Mutex<PoolState>,
}

/// Admission to run one invocation; released on drop.
pub struct Permit {
    pool: Arc<Pool>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        self.pool.release();
    }
}

impl Pool {
    pub fn new(policy: AutoscalePolicy) -> Arc<Self> {
        Arc::new(Pool {
            state: Mutex::new(PoolState {
                scaler: Autoscaler::new(policy),
                busy: 0,
                waiting: VecDeque::new(),
            }),
        })
    }

    pub async fn acquire(self: &Arc<Self>) -> Permit {
        let rx = {
            let mut st = self.state.lock();
            if st.busy < st.scaler.replicas() && st.waiting.is_empty() {
                st.busy += 1;
                return Permit { pool: self.clone() };
            }
            let (tx, rx) = oneshot::channel();
            st.waiting.push_back(tx);
            rx
        };
        match rx.await {
            Ok(permit) => permit,
            // The pool never drops a waiter without a permit.
            Err(_) => unreachable!("pool dropped a queued waiter"),
        }
    }

    fn release(self: &Arc<Self>) {
        let mut st = self.state.lock();
        st.busy -= 1;
        self.admit(&mut st);
    }

    fn admit(self: &Arc<Self>, st: &mut PoolState) {
        while st.busy < st.scaler.replicas() {
            let Some(tx) = st.waiting.pop_front() else { break };
            st.busy += 1;
            if let Err(permit) = tx.send(Permit { pool: self.clone() }) {
                // Waiter gave up; undo without re-entering the lock.
                std::mem::forget(permit);
                st.busy -= 1;
            }
        }
    }

    /// Invocations running plus queued.
    pub fn inflight(&self) -> u32 {
        let st = self.state.lock();
        st.busy + st.waiting.len() as u32
    }

    pub fn replicas(&self) -> u32 {
        self.state.lock().scaler.replicas()
    }

    /// Runs one autoscale decision; returns the new count if it changed.
    pub fn tick(self: &Arc<Self>, now_ms: f64) -> Option<u32> {
        let mut st = self.state.lock();
        let before = st.scaler.replicas();
        let inflight = st.busy + st.waiting.len() as u32;
        let after = st.scaler.tick(now_ms, inflight);
        if after > before {
            self.admit(&mut st);
        }
        (after != before).then_some(after)
    }
}
