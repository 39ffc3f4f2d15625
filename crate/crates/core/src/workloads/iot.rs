//! IoT hub jobs: sensors emitting records into a queue and a time-window
//! index, model training over a window, prediction and ad-hoc queries.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{mix_seed, seeded_rng, DuplicateHandler, Handler, HandlerContext, HandlerOutput, HandlerRegistry};
use crate::storage::DataObject;

pub const SENSORS: &str = "iot_sensors";
pub const TRAIN: &str = "iot_train";
pub const PREDICT: &str = "iot_predict";
pub const QUERY: &str = "iot_query";

pub const SENSOR_DATA: &str = "sensor-data";
pub const MODEL: &str = "model";
pub const PREDICTION: &str = "prediction";
pub const RESULT: &str = "result";

/// Span label naming the query picked; `model` says whether a prediction
/// ran `warm` or `cold`.
pub const LABEL_QUERY: &str = "query";
pub const LABEL_MODEL: &str = "model";

pub const QUERY_POOL: usize = 12;

/// Every record serializes to exactly this many bytes.
pub const RECORD_BYTES: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Ok,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor_id: u32,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    /// °C
    pub temperature: f64,
    /// Fraction in [0, 1].
    pub moisture: f64,
    /// Watts.
    pub power: f64,
    pub health: Health,
    /// ms timestamp
    pub t: u64,
}

fn round(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

impl SensorRecord {
    /// Reading of sensor `id` at `t`. Location is fixed per sensor; the
    /// readings come from `rng`.
    pub fn sample(seed: u64, id: u32, t: u64, rng: &mut impl Rng) -> Self {
        let mut home = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("sensor-{id}")));
        let health = match rng.random_range(0..100) {
            0..=89 => Health::Ok,
            90..=97 => Health::Degraded,
            _ => Health::Failed,
        };
        SensorRecord {
            sensor_id: id,
            latitude: round(home.random_range(-90.0..90.0), 5),
            longitude: round(home.random_range(-180.0..180.0), 5),
            elevation: round(home.random_range(0.0..4000.0), 1),
            temperature: round(rng.random_range(-20.0..45.0), 2),
            moisture: round(rng.random_range(0.0..1.0), 3),
            power: round(rng.random_range(0.5..15.0), 2),
            health,
            t,
        }
    }

    /// Canonical JSON (field order as declared) padded with trailing
    /// whitespace to [`RECORD_BYTES`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("record serializes");
        assert!(bytes.len() <= RECORD_BYTES, "record exceeds its fixed size");
        bytes.resize(RECORD_BYTES, b' ');
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

/// The IoT "database": records in arrival order, readable by time window.
#[derive(Default)]
pub struct WindowIndex {
    records: RwLock<Vec<SensorRecord>>,
}

impl WindowIndex {
    pub fn append(&self, batch: impl IntoIterator<Item = SensorRecord>) {
        let mut recs = self.records.write();
        for r in batch {
            // Firings can overlap; keep the index ordered by time.
            let at = recs.partition_point(|x| x.t <= r.t);
            recs.insert(at, r);
        }
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records with `from < t <= to`.
    pub fn window(&self, from: f64, to: f64) -> Vec<SensorRecord> {
        let recs = self.records.read();
        let lo = recs.partition_point(|r| (r.t as f64) <= from);
        let hi = recs.partition_point(|r| (r.t as f64) <= to);
        recs[lo..hi.max(lo)].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IotCosts {
    pub train: Duration,
    pub predict: Duration,
    pub query: Duration,
}

impl Default for IotCosts {
    fn default() -> Self {
        IotCosts {
            train: Duration::from_millis(2000),
            predict: Duration::from_millis(40),
            query: Duration::from_millis(15),
        }
    }
}

/// Windows here are already time-scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IotParams {
    pub sensors: u32,
    pub train_window: Duration,
    pub predict_window: Duration,
    pub query_window: Duration,
    pub model_bytes: usize,
    pub costs: IotCosts,
}

impl Default for IotParams {
    fn default() -> Self {
        IotParams {
            sensors: 10,
            train_window: Duration::from_secs(30 * 60),
            predict_window: Duration::from_secs(30),
            query_window: Duration::from_secs(30),
            model_bytes: 1 << 20,
            costs: IotCosts::default(),
        }
    }
}

impl IotParams {
    /// Shrinks the windows by `scale` (e.g. 1/60).
    pub fn scaled(mut self, scale: f64) -> Self {
        self.train_window = self.train_window.mul_f64(scale);
        self.predict_window = self.predict_window.mul_f64(scale);
        self.query_window = self.query_window.mul_f64(scale);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no trained model yet")]
pub struct ModelMissing;

struct Model {
    ready_at_ms: f64,
    digest: Arc<Vec<u8>>,
}

/// State the four IoT handlers share within one process.
#[derive(Default)]
pub struct IotState {
    pub index: WindowIndex,
    models: Mutex<Vec<Model>>,
}

impl IotState {
    /// Latest model finished by `now_ms`.
    pub fn model_at(&self, now_ms: f64) -> Result<Arc<Vec<u8>>, ModelMissing> {
        self.models
            .lock()
            .iter()
            .filter(|m| m.ready_at_ms <= now_ms)
            .max_by(|a, b| a.ready_at_ms.total_cmp(&b.ready_at_ms))
            .map(|m| m.digest.clone())
            .ok_or(ModelMissing)
    }
}

fn digest(records: &[SensorRecord], bytes: usize) -> Vec<u8> {
    let mut h = 0u64;
    for r in records {
        h = mix_seed(h, &serde_json::to_string(r).unwrap_or_default());
    }
    let mut out = vec![0u8; bytes];
    ChaCha8Rng::seed_from_u64(h).fill_bytes(&mut out);
    out
}

fn window_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn sensors(params: IotParams, state: Arc<IotState>) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, _: &[DataObject]| {
        let mut rng = ctx.rng();
        let t = ctx.now_ms.max(0.0).round() as u64;
        let batch: Vec<SensorRecord> = (0..params.sensors)
            .map(|id| SensorRecord::sample(ctx.seed, id, t, &mut rng))
            .collect();
        let mut out = HandlerOutput::new(Duration::ZERO);
        for r in &batch {
            out = out.with_object(SENSOR_DATA, r.to_bytes());
        }
        state.index.append(batch);
        Ok(out)
    })
}

pub fn train(params: IotParams, state: Arc<IotState>) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, _: &[DataObject]| {
        let window = state
            .index
            .window(ctx.now_ms - window_ms(params.train_window), ctx.now_ms);
        let model = Arc::new(digest(&window, params.model_bytes));
        state.models.lock().push(Model {
            ready_at_ms: ctx.now_ms + window_ms(ctx.scaled(params.costs.train)),
            digest: model.clone(),
        });
        Ok(HandlerOutput::new(params.costs.train)
            .with_object(MODEL, model.as_ref().clone())
            .with_label("records", window.len().to_string()))
    })
}

/// Predicts from the newest finished model; before any training finishes
/// it answers `cold` instead of failing.
pub fn predict(params: IotParams, state: Arc<IotState>) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, _: &[DataObject]| {
        let window = state
            .index
            .window(ctx.now_ms - window_ms(params.predict_window), ctx.now_ms);
        let mean = window.iter().map(|r| r.temperature).sum::<f64>() / window.len().max(1) as f64;
        let (mode, bias) = match state.model_at(ctx.now_ms) {
            Ok(m) => ("warm", f64::from(m[0]) / 255.0),
            Err(ModelMissing) => ("cold", 0.0),
        };
        let body = serde_json::json!({ "model": mode, "forecast": round(mean + bias, 3), "records": window.len() });
        Ok(HandlerOutput::new(params.costs.predict)
            .with_object(PREDICTION, body.to_string().into_bytes())
            .with_label(LABEL_MODEL, mode))
    })
}

/// Query `q` (0-based) over a window of records.
pub fn run_query(q: usize, window: &[SensorRecord]) -> f64 {
    let n = window.len() as f64;
    let vals = |f: fn(&SensorRecord) -> f64| window.iter().map(f);
    let mean = |f: fn(&SensorRecord) -> f64| if n > 0.0 { vals(f).sum::<f64>() / n } else { 0.0 };
    let max = |f: fn(&SensorRecord) -> f64| vals(f).fold(0.0, f64::max);
    match q {
        0 => mean(|r| r.temperature),
        1 => max(|r| r.temperature),
        2 => mean(|r| r.moisture),
        3 => max(|r| r.moisture),
        4 => mean(|r| r.power),
        5 => max(|r| r.power),
        6 => vals(|r| r.power).sum(),
        7 => window.iter().filter(|r| r.health == Health::Degraded).count() as f64,
        8 => window.iter().filter(|r| r.health == Health::Failed).count() as f64,
        9 => mean(|r| r.elevation),
        10 => window.iter().filter(|r| r.temperature > 30.0).count() as f64,
        _ => n,
    }
}

pub fn query(params: IotParams, state: Arc<IotState>) -> Arc<dyn Handler> {
    Arc::new(move |ctx: &HandlerContext, _: &[DataObject]| {
        let q = ctx.rng().random_range(0..QUERY_POOL);
        let window = state
            .index
            .window(ctx.now_ms - window_ms(params.query_window), ctx.now_ms);
        let body = serde_json::json!({ "query": q, "value": run_query(q, &window), "records": window.len() });
        Ok(HandlerOutput::new(params.costs.query)
            .with_object(RESULT, body.to_string().into_bytes())
            .with_label(LABEL_QUERY, q.to_string()))
    })
}

pub fn register(handlers: &mut HandlerRegistry, params: IotParams) -> Result<Arc<IotState>, DuplicateHandler> {
    let state = Arc::new(IotState::default());
    handlers.register(SENSORS, sensors(params, state.clone()))?;
    handlers.register(TRAIN, train(params, state.clone()))?;
    handlers.register(PREDICT, predict(params, state.clone()))?;
    handlers.register(QUERY, query(params, state.clone()))?;
    Ok(state)
}

/// Independent stream of query picks, for checking coverage without
/// running the workflow.
pub fn query_pick(seed: u64, invocation_id: &str) -> usize {
    seeded_rng(seed, invocation_id).random_range(0..QUERY_POOL)
}
