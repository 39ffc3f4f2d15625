//! Time and task spawning, abstracted over real time and the simulated clock.

use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::future::BoxFuture;

/// Source of time plus a spawner. All timing inside the runtime, the
/// invokers and the scheduler goes through this trait so the same code runs
/// on wall-clock time or on the simulated clock.
pub trait Clock: Send + Sync + 'static {
    /// Milliseconds since the clock's epoch.
    fn now_ms(&self) -> f64;

    fn sleep(&self, d: Duration) -> BoxFuture<'static, ()>;

    /// Occupies a worker for `d` of compute. Real clocks busy-wait; the
    /// simulated clock just advances.
    fn compute(&self, d: Duration) -> BoxFuture<'static, ()>;

    fn spawn(&self, fut: BoxFuture<'static, ()>);

    /// True for the deterministic simulated clock.
    fn is_simulated(&self) -> bool {
        false
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Waits for `fut`, giving up after `budget`.
pub async fn with_timeout<T>(
    clock: &dyn Clock,
    budget: Duration,
    fut: impl std::future::Future<Output = T>,
) -> Option<T> {
    use futures::future::{select, Either};
    let fut = std::pin::pin!(fut);
    match select(fut, clock.sleep(budget)).await {
        Either::Left((v, _)) => Some(v),
        Either::Right(_) => None,
    }
}

/// Wall-clock time on the ambient tokio runtime.
#[derive(Debug, Clone)]
pub struct RealClock {
    origin_ms: f64,
    origin: Instant,
}

impl Default for RealClock {
    fn default() -> Self {
        let origin_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() * 1e3)
            .unwrap_or(0.0);
        RealClock {
            origin_ms,
            origin: Instant::now(),
        }
    }
}

impl RealClock {
    pub fn new() -> Self {
        Self::default()
    }
}

fn spin(d: Duration) {
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

impl Clock for RealClock {
    fn now_ms(&self) -> f64 {
        // Monotonic offset from a unix-epoch anchor, so spans from several
        // processes on one host share a timeline.
        self.origin_ms + self.origin.elapsed().as_secs_f64() * 1e3
    }

    fn sleep(&self, d: Duration) -> BoxFuture<'static, ()> {
        Box::pin(tokio::time::sleep(d))
    }

    fn compute(&self, d: Duration) -> BoxFuture<'static, ()> {
        if d.is_zero() {
            return Box::pin(async {});
        }
        Box::pin(async move {
            let _ = tokio::task::spawn_blocking(move || spin(d)).await;
        })
    }

    fn spawn(&self, fut: BoxFuture<'static, ()>) {
        tokio::spawn(fut);
    }
}
