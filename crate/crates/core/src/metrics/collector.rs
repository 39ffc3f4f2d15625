use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use super::MetricSpan;

/// Default in-memory span budget before spilling to disk.
pub const DEFAULT_CAPACITY: usize = 1_000_000;

static SPILL_SEQ: AtomicU64 = AtomicU64::new(0);

struct Spill {
    path: PathBuf,
    writer: BufWriter<File>,
}

/// Append-only span sink shared by every component of a run.
///
/// Spans are buffered in memory; once the buffer holds `capacity` spans it
/// is written out as JSON lines to a spill file and cleared.
pub struct Collector {
    buffer: Mutex<Vec<MetricSpan>>,
    capacity: usize,
    spill_dir: PathBuf,
    spill: Mutex<Option<Spill>>,
}

impl Default for Collector {
    fn default() -> Self {
        Collector::new(DEFAULT_CAPACITY, std::env::temp_dir())
    }
}

impl Collector {
    pub fn new(capacity: usize, spill_dir: impl Into<PathBuf>) -> Self {
        Collector {
            buffer: Mutex::new(Vec::new()),
            capacity: capacity.max(1),
            spill_dir: spill_dir.into(),
            spill: Mutex::new(None),
        }
    }

    pub fn record(&self, span: MetricSpan) {
        let full = {
            let mut buf = self.buffer.lock();
            buf.push(span);
            if buf.len() >= self.capacity {
                Some(std::mem::take(&mut *buf))
            } else {
                None
            }
        };
        if let Some(batch) = full {
            self.spill_batch(batch);
        }
    }

    pub fn record_all(&self, spans: impl IntoIterator<Item = MetricSpan>) {
        for s in spans {
            self.record(s);
        }
    }

    fn spill_batch(&self, batch: Vec<MetricSpan>) {
        let mut guard = self.spill.lock();
        if guard.is_none() {
            let path = self.spill_dir.join(format!(
                "edgeflow-spans-{}-{}.jsonl",
                std::process::id(),
                SPILL_SEQ.fetch_add(1, Ordering::Relaxed)
            ));
            match OpenOptions::new().create(true).write(true).truncate(true).open(&path) {
                Ok(f) => {
                    *guard = Some(Spill {
                        path,
                        writer: BufWriter::new(f),
                    })
                }
                Err(_) => {
                    // No spill file possible; keep the batch in memory.
                    drop(guard);
                    self.buffer.lock().splice(0..0, batch);
                    return;
                }
            }
        }
        if let Some(spill) = guard.as_mut() {
            for span in &batch {
                if let Ok(line) = serde_json::to_string(span) {
                    let _ = writeln!(spill.writer, "{line}");
                }
            }
        }
    }

    /// All spans recorded so far: spilled ones first, then buffered ones.
    pub fn snapshot(&self) -> Vec<MetricSpan> {
        let mut out = Vec::new();
        {
            let mut guard = self.spill.lock();
            if let Some(spill) = guard.as_mut() {
                let _ = spill.writer.flush();
                if let Ok(f) = File::open(&spill.path) {
                    for line in BufReader::new(f).lines().map_while(Result::ok) {
                        if let Ok(span) = serde_json::from_str(&line) {
                            out.push(span);
                        }
                    }
                }
            }
        }
        out.extend(self.buffer.lock().iter().cloned());
        out
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        if let Some(spill) = self.spill.get_mut().take() {
            drop(spill.writer);
            let _ = fs::remove_file(spill.path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{SpanContext, SpanKind};
    use std::sync::Arc;

    fn span(i: usize) -> MetricSpan {
        let ctx = SpanContext {
            workflow: "w".into(),
            function: format!("f{}", i % 7),
            tier: "edge".into(),
            request_id: format!("r{i}"),
            invocation_id: format!("r{i}:0"),
        };
        MetricSpan::new(SpanKind::Handler, &ctx, i as f64, 1.0).unwrap()
    }

    #[test]
    fn record_then_snapshot() {
        let c = Collector::default();
        c.record(span(0));
        assert_eq!(c.snapshot().len(), 1);
    }

    #[test]
    fn concurrent_writers_lose_nothing() {
        let c = Arc::new(Collector::default());
        let handles: Vec<_> = (0..100)
            .map(|w| {
                let c = c.clone();
                std::thread::spawn(move || {
                    for i in 0..1000 {
                        c.record(span(w * 1000 + i));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let snap = c.snapshot();
        assert_eq!(snap.len(), 100_000);
        let mut ids: Vec<_> = snap.iter().map(|s| s.request_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn spills_past_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let c = Collector::new(10, dir.path());
        for i in 0..35 {
            c.record(span(i));
        }
        let snap = c.snapshot();
        assert_eq!(snap.len(), 35);
        assert_eq!(
            snap.iter().map(|s| s.start as usize).collect::<Vec<_>>(),
            (0..35).collect::<Vec<_>>()
        );
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        drop(c);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
