//! A single-threaded discrete-event executor with a virtual clock.
//!
//! Tasks run in FIFO order. When no task is ready, time jumps to the earliest
//! pending timer and every timer due at that instant fires in registration
//! order, so a run is a pure function of its inputs.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::task::{Context, Poll, Wake, Waker};
use std::time::Duration;

use futures::future::BoxFuture;
use parking_lot::Mutex;

use crate::clock::Clock;

#[derive(Default)]
struct State {
    tasks: HashMap<u64, Option<BoxFuture<'static, ()>>>,
    ready: VecDeque<u64>,
    queued: HashSet<u64>,
    timers: BinaryHeap<Reverse<(u64, u64)>>,
    timer_wakers: HashMap<u64, Waker>,
    next_task: u64,
    next_timer: u64,
}

#[derive(Default)]
struct Inner {
    now_ns: AtomicU64,
    state: Mutex<State>,
}

impl Inner {
    fn spawn(&self, fut: BoxFuture<'static, ()>) {
        let mut st = self.state.lock();
        let id = st.next_task;
        st.next_task += 1;
        st.tasks.insert(id, Some(fut));
        st.queued.insert(id);
        st.ready.push_back(id);
    }

    fn schedule(&self, id: u64) {
        let mut st = self.state.lock();
        if st.tasks.contains_key(&id) && st.queued.insert(id) {
            st.ready.push_back(id);
        }
    }
}

struct TaskWaker {
    id: u64,
    inner: Weak<Inner>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref()
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if let Some(inner) = self.inner.upgrade() {
            inner.schedule(self.id);
        }
    }
}

struct Sleep {
    inner: Arc<Inner>,
    deadline: u64,
    timer: Option<u64>,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.inner.now_ns.load(Ordering::SeqCst) >= self.deadline {
            return Poll::Ready(());
        }
        let mut st = self.inner.state.lock();
        let id = match self.timer {
            Some(id) => id,
            None => {
                let id = st.next_timer;
                st.next_timer += 1;
                st.timers.push(Reverse((self.deadline, id)));
                id
            }
        };
        st.timer_wakers.insert(id, cx.waker().clone());
        drop(st);
        self.timer = Some(id);
        Poll::Pending
    }
}

impl Drop for Sleep {
    fn drop(&mut self) {
        if let Some(id) = self.timer {
            self.inner.state.lock().timer_wakers.remove(&id);
        }
    }
}

/// Owner of a simulated run.
pub struct Simulation {
    inner: Arc<Inner>,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            inner: Arc::new(Inner::default()),
        }
    }
}

impl Simulation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> Arc<SimClock> {
        Arc::new(SimClock {
            inner: self.inner.clone(),
        })
    }

    pub fn now_ns(&self) -> u64 {
        self.inner.now_ns.load(Ordering::SeqCst)
    }

    fn poll_task(&self, id: u64) {
        let fut = {
            let mut st = self.inner.state.lock();
            st.queued.remove(&id);
            match st.tasks.get_mut(&id).and_then(Option::take) {
                Some(f) => f,
                None => return,
            }
        };
        let waker = Waker::from(Arc::new(TaskWaker {
            id,
            inner: Arc::downgrade(&self.inner),
        }));
        let mut fut = fut;
        let mut cx = Context::from_waker(&waker);
        let done = fut.as_mut().poll(&mut cx).is_ready();
        let mut st = self.inner.state.lock();
        if done {
            st.tasks.remove(&id);
        } else if let Some(slot) = st.tasks.get_mut(&id) {
            *slot = Some(fut);
        }
    }

    /// Runs every ready task; returns false once nothing is ready.
    fn drain_ready(&self) {
        loop {
            let next = self.inner.state.lock().ready.pop_front();
            match next {
                Some(id) => self.poll_task(id),
                None => return,
            }
        }
    }

    /// Advances to the earliest live timer and wakes everything due then.
    /// Returns false when no timers remain.
    fn advance(&self) -> bool {
        let mut st = self.inner.state.lock();
        let deadline = loop {
            match st.timers.peek() {
                None => return false,
                Some(Reverse((deadline, id))) => {
                    if st.timer_wakers.contains_key(id) {
                        break *deadline;
                    }
                    st.timers.pop();
                }
            }
        };
        let now = self.inner.now_ns.load(Ordering::SeqCst).max(deadline);
        self.inner.now_ns.store(now, Ordering::SeqCst);
        let mut due = Vec::new();
        while let Some(Reverse((d, id))) = st.timers.peek().copied() {
            if d > now {
                break;
            }
            st.timers.pop();
            if let Some(w) = st.timer_wakers.remove(&id) {
                due.push(w);
            }
        }
        drop(st);
        for w in due {
            w.wake();
        }
        true
    }

    /// Drives `fut` to completion on the virtual clock. Other spawned tasks
    /// keep running alongside it; whatever is still pending when `fut`
    /// finishes stays queued.
    ///
    /// Panics if `fut` can never complete (no ready tasks, no timers).
    pub fn block_on<T: Send + 'static>(&self, fut: impl Future<Output = T> + Send + 'static) -> T {
        let slot = Arc::new(Mutex::new(None));
        let out = slot.clone();
        self.inner.spawn(Box::pin(async move {
            *out.lock() = Some(fut.await);
        }));
        loop {
            self.drain_ready();
            if let Some(v) = slot.lock().take() {
                return v;
            }
            if !self.advance() {
                panic!("simulation stalled: main future pending with no ready tasks or timers");
            }
        }
    }

    /// Runs until no task is ready and no timer is pending.
    pub fn run_until_idle(&self) {
        loop {
            self.drain_ready();
            if !self.advance() {
                return;
            }
        }
    }

    /// Number of spawned tasks that have not finished.
    pub fn pending_tasks(&self) -> usize {
        self.inner.state.lock().tasks.len()
    }
}

impl Drop for Simulation {
    fn drop(&mut self) {
        // Unfinished tasks may hold clocks pointing back at us.
        let mut st = self.inner.state.lock();
        let tasks = std::mem::take(&mut st.tasks);
        st.timer_wakers.clear();
        drop(st);
        drop(tasks);
    }
}

/// [`Clock`] backed by a [`Simulation`].
pub struct SimClock {
    inner: Arc<Inner>,
}

impl SimClock {
    pub fn now_ns(&self) -> u64 {
        self.inner.now_ns.load(Ordering::SeqCst)
    }
}

fn as_ns(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

impl Clock for SimClock {
    fn now_ms(&self) -> f64 {
        self.now_ns() as f64 / 1e6
    }

    fn sleep(&self, d: Duration) -> BoxFuture<'static, ()> {
        Box::pin(Sleep {
            inner: self.inner.clone(),
            deadline: self.now_ns().saturating_add(as_ns(d)),
            timer: None,
        })
    }

    fn compute(&self, d: Duration) -> BoxFuture<'static, ()> {
        self.sleep(d)
    }

    fn spawn(&self, fut: BoxFuture<'static, ()>) {
        self.inner.spawn(fut);
    }

    fn is_simulated(&self) -> bool {
        true
    }
}
