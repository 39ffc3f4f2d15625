//! Scenario files: which bundles to run, how to load them, on what
//! topology. Same flat `key: value` syntax as templates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::kv;
use crate::runtime::AutoscalePolicy;
use crate::workloads::{IotParams, VideoParams};

pub const TIME_SCALE_ENV: &str = "EDGEFLOW_TIME_SCALE";
pub const DEFAULT_TIME_SCALE: f64 = 1.0 / 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("{}: {message}", .path.display())]
    Io { path: PathBuf, message: String },
    #[error("line {line}: malformed line")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("{0}")]
    Inconsistent(String),
}

impl ScenarioError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Syntax { line }
            | ScenarioError::UnknownKey { line, .. }
            | ScenarioError::DuplicateKey { line, .. }
            | ScenarioError::InvalidValue { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Fixed number of in-flight entry requests.
    Closed,
    /// Fire each workflow's cron burst on schedule.
    Cron,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Memory { budget: Option<u64> },
    File { dir: PathBuf },
    Queue,
    Remote { url: String },
    RemoteQueue { url: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TierSpec {
    pub speed: Option<f64>,
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub workflow_dirs: Vec<PathBuf>,
    pub mode: LoadMode,
    pub concurrency: u32,
    /// Nominal run length, before time scaling.
    pub duration: Duration,
    pub seed: u64,
    pub time_scale: f64,
    pub sync_timeout: Duration,
    /// Real mode: how long to wait for stragglers after the load stops.
    pub drain: Duration,
    pub tiers: BTreeMap<String, TierSpec>,
    /// One-way delays in ms, applied symmetrically.
    pub delays: Vec<(String, String, f64)>,
    pub placement: BTreeMap<String, String>,
    pub backends: BTreeMap<String, BackendSpec>,
    pub autoscale: AutoscalePolicy,
    pub autoscale_interval: Duration,
    pub video: VideoParams,
    pub iot: IotParams,
    /// Raw entries, echoed into reports.
    pub echo: BTreeMap<String, String>,
}

impl Scenario {
    /// Run length after time scaling.
    pub fn scaled_duration(&self) -> Duration {
        self.duration.mul_f64(self.time_scale)
    }

    /// IoT parameters with windows scaled.
    pub fn iot_params(&self) -> IotParams {
        self.iot.scaled(self.time_scale)
    }
}

/// `<int><unit>` with unit ms, s, m or h.
pub fn parse_duration(value: &str) -> Option<Duration> {
    let split = value.find(|c: char| !c.is_ascii_digit())?;
    let (digits, unit) = value.split_at(split);
    let n: u64 = digits.parse().ok()?;
    let ms = match unit {
        "ms" => n,
        "s" => n.checked_mul(1_000)?,
        "m" => n.checked_mul(60_000)?,
        "h" => n.checked_mul(3_600_000)?,
        _ => return None,
    };
    Some(Duration::from_millis(ms))
}

/// A positive fraction `a/b` or decimal.
pub fn parse_scale(value: &str) -> Option<f64> {
    let v = match value.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => value.parse().ok()?,
    };
    (v > 0.0 && v.is_finite()).then_some(v)
}

fn parse_backend(value: &str, base: &Path) -> Option<BackendSpec> {
    let (kind, arg) = match value.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (value, None),
    };
    Some(match (kind, arg) {
        ("memory", None) => BackendSpec::Memory { budget: None },
        ("memory", Some(b)) => BackendSpec::Memory {
            budget: Some(b.parse().ok()?),
        },
        ("queue", None) => BackendSpec::Queue,
        ("file", Some(dir)) => BackendSpec::File { dir: base.join(dir) },
        ("remote", Some(url)) if url.starts_with("http") => BackendSpec::Remote { url: url.to_string() },
        ("remote-queue", Some(url)) if url.starts_with("http") => BackendSpec::RemoteQueue { url: url.to_string() },
        _ => return None,
    })
}

struct Ctx<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Ctx<'_> {
    fn invalid(&self, reason: &str) -> ScenarioError {
        ScenarioError::InvalidValue {
            line: self.line,
            key: self.key.to_string(),
            value: self.value.to_string(),
            reason: reason.to_string(),
        }
    }

    fn num<T: std::str::FromStr>(&self) -> Result<T, ScenarioError> {
        self.value.parse().map_err(|_| self.invalid("not a number"))
    }

    fn prob(&self) -> Result<f64, ScenarioError> {
        let p: f64 = self.num()?;
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            Err(self.invalid("not a probability"))
        }
    }

    fn positive(&self) -> Result<f64, ScenarioError> {
        let v: f64 = self.num()?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid("must be positive"))
        }
    }

    fn duration(&self) -> Result<Duration, ScenarioError> {
        parse_duration(self.value).ok_or_else(|| self.invalid("expected <int>ms|s|m|h"))
    }

    fn ident(&self) -> Result<String, ScenarioError> {
        if kv::is_ident(self.value) {
            Ok(self.value.to_string())
        } else {
            Err(self.invalid("not an identifier"))
        }
    }
}

/// Parses a scenario document. Relative paths resolve against `base`.
/// `scale_override` wins over the file's `time_scale`.
pub fn parse_scenario(text: &str, base: &Path, scale_override: Option<f64>) -> Result<Scenario, ScenarioError> {
    let entries = kv::parse(text).map_err(|line| ScenarioError::Syntax { line })?;
    let mut s = Scenario {
        name: String::new(),
        workflow_dirs: Vec::new(),
        mode: LoadMode::Closed,
        concurrency: 1,
        duration: Duration::ZERO,
        seed: 0,
        time_scale: DEFAULT_TIME_SCALE,
        sync_timeout: Duration::from_secs(30),
        drain: Duration::from_secs(30),
        tiers: BTreeMap::new(),
        delays: Vec::new(),
        placement: BTreeMap::new(),
        backends: BTreeMap::new(),
        autoscale: AutoscalePolicy::default(),
        autoscale_interval: Duration::from_secs(1),
        video: VideoParams::default(),
        iot: IotParams::default(),
        echo: BTreeMap::new(),
    };
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &entries {
        if seen.insert(&e.key, e.line).is_some() {
            return Err(ScenarioError::DuplicateKey {
                line: e.line,
                key: e.key.clone(),
            });
        }
        let c = Ctx {
            line: e.line,
            key: &e.key,
            value: &e.value,
        };
        let parts: Vec<&str> = e.key.split('.').collect();
        match parts.as_slice() {
            ["name"] => s.name = c.ident()?,
            ["workflow_dir"] => {
                s.workflow_dirs = e.value.split(',').map(|d| base.join(d.trim())).collect();
            }
            ["mode"] => {
                s.mode = match e.value.as_str() {
                    "closed" => LoadMode::Closed,
                    "cron" => LoadMode::Cron,
                    _ => return Err(c.invalid("expected closed or cron")),
                }
            }
            ["concurrency"] => {
                s.concurrency = c.num()?;
                if s.concurrency == 0 {
                    return Err(c.invalid("must be at least 1"));
                }
            }
            ["duration"] => {
                s.duration = c.duration()?;
                if s.duration.is_zero() {
                    return Err(c.invalid("must be positive"));
                }
            }
            ["seed"] => s.seed = c.num()?,
            ["time_scale"] => {
                s.time_scale = parse_scale(&e.value).ok_or_else(|| c.invalid("expected a positive fraction"))?
            }
            ["sync_timeout"] => s.sync_timeout = c.duration()?,
            ["drain"] => s.drain = c.duration()?,
            ["tier", tier, "speed"] => s.tiers.entry(tier.to_string()).or_default().speed = Some(c.positive()?),
            ["tier", tier, "url"] => s.tiers.entry(tier.to_string()).or_default().url = Some(e.value.clone()),
            ["delay", a, b] => {
                let ms: f64 = c.num()?;
                if !(ms >= 0.0 && ms.is_finite()) {
                    return Err(c.invalid("must be non-negative"));
                }
                s.delays.push((a.to_string(), b.to_string(), ms));
            }
            ["place", function] => {
                s.placement.insert(function.to_string(), c.ident()?);
            }
            ["backend", name] => {
                let spec = parse_backend(&e.value, base).ok_or_else(|| c.invalid("unknown backend spec"))?;
                s.backends.insert(name.to_string(), spec);
            }
            ["autoscale", field] => {
                let p = &mut s.autoscale;
                match *field {
                    "min" => p.min_replicas = c.num()?,
                    "max" => p.max_replicas = c.num()?,
                    "factor" => p.factor = c.positive()?,
                    "high" => p.high_watermark = c.positive()?,
                    "low" => p.low_watermark = c.num()?,
                    "cooldown" => p.cooldown_ms = c.duration()?.as_secs_f64() * 1e3,
                    "interval" => s.autoscale_interval = c.duration()?,
                    _ => return Err(unknown(e)),
                }
            }
            ["video", field] => {
                let v = &mut s.video;
                match *field {
                    "fps" => v.fps = c.num()?,
                    "chunk_frames" => v.chunk_frames = c.num()?,
                    "frame_bytes" => v.frame_bytes = c.num()?,
                    "motion_pass_p" => v.motion_pass_p = c.prob()?,
                    "face_pass_p" => v.face_pass_p = c.prob()?,
                    _ => return Err(unknown(e)),
                }
            }
            ["video", "cost", stage] => {
                let d = c.duration()?;
                let costs = &mut s.video.costs;
                match *stage {
                    "generator" => costs.generator = d,
                    "motion" => costs.motion = d,
                    "detect" => costs.detect = d,
                    "recognize" => costs.recognize = d,
                    _ => return Err(unknown(e)),
                }
            }
            ["iot", field] => {
                let p = &mut s.iot;
                match *field {
                    "sensors" => p.sensors = c.num()?,
                    "model_bytes" => p.model_bytes = c.num()?,
                    "train_window" => p.train_window = c.duration()?,
                    "predict_window" => p.predict_window = c.duration()?,
                    "query_window" => p.query_window = c.duration()?,
                    _ => return Err(unknown(e)),
                }
            }
            ["iot", "cost", job] => {
                let d = c.duration()?;
                let costs = &mut s.iot.costs;
                match *job {
                    "train" => costs.train = d,
                    "predict" => costs.predict = d,
                    "query" => costs.query = d,
                    _ => return Err(unknown(e)),
                }
            }
            _ => return Err(unknown(e)),
        }
        s.echo.insert(e.key.clone(), e.value.clone());
    }
    for key in ["name", "workflow_dir", "duration"] {
        if !seen.contains_key(key) {
            return Err(ScenarioError::MissingKey(key.to_string()));
        }
    }
    if let Some(scale) = scale_override {
        s.time_scale = scale;
    }
    s.echo.insert("time_scale".into(), s.time_scale.to_string());
    s.echo.insert("seed".into(), s.seed.to_string());
    s.autoscale
        .validate()
        .map_err(|e| ScenarioError::Inconsistent(e.to_string()))?;
    s.video
        .validate()
        .map_err(|e| ScenarioError::Inconsistent(e.to_string()))?;
    Ok(s)
}

fn unknown(e: &kv::Entry) -> ScenarioError {
    ScenarioError::UnknownKey {
        line: e.line,
        key: e.key.clone(),
    }
}

/// Reads a scenario file, honouring the time-scale environment override.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let scale =
        match std::env::var(TIME_SCALE_ENV) {
            Ok(v) => Some(parse_scale(&v).ok_or_else(|| {
                ScenarioError::Inconsistent(format!("{TIME_SCALE_ENV}={v} is not a positive fraction"))
            })?),
            Err(_) => None,
        };
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, base, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "name: s\nworkflow_dir: ../bundle\nduration: 30m\n";

    #[test]
    fn defaults_and_scaling() {
        let s = parse_scenario(MIN, Path::new("/x/y"), None).unwrap();
        assert_eq!(s.workflow_dirs, vec![PathBuf::from("/x/y/../bundle")]);
        assert_eq!(s.mode, LoadMode::Closed);
        assert_eq!(s.scaled_duration(), Duration::from_secs(30));
        assert_eq!(s.echo["time_scale"], (1.0f64 / 60.0).to_string());
        let s = parse_scenario(MIN, Path::new("."), Some(1.0)).unwrap();
        assert_eq!(s.scaled_duration(), Duration::from_secs(1800));
    }

    #[test]
    fn full_document() {
        let doc = format!(
            "{MIN}mode: cron\nseed: 7\ntime_scale: 1/10\ntier.iot.speed: 0.5\ntier.edge.url: http://127.0.0.1:9000\n\
             delay.iot.edge: 2.5\nplace.face_detection: cloud\nbackend.memory: memory:1024\nbackend.q: queue\n\
             backend.r: remote:http://h:1\nautoscale.min: 2\nautoscale.max: 8\nvideo.frame_bytes: 4096\n\
             video.cost.recognize: 30ms\niot.sensors: 100\niot.cost.train: 1s\n"
        );
        let s = parse_scenario(&doc, Path::new("."), None).unwrap();
        assert_eq!(s.mode, LoadMode::Cron);
        assert_eq!(s.seed, 7);
        assert_eq!(s.time_scale, 0.1);
        assert_eq!(s.tiers["iot"].speed, Some(0.5));
        assert_eq!(s.tiers["edge"].url.as_deref(), Some("http://127.0.0.1:9000"));
        assert_eq!(s.delays, vec![("iot".into(), "edge".into(), 2.5)]);
        assert_eq!(s.placement["face_detection"], "cloud");
        assert_eq!(s.backends["memory"], BackendSpec::Memory { budget: Some(1024) });
        assert_eq!(
            s.backends["r"],
            BackendSpec::Remote {
                url: "http://h:1".into()
            }
        );
        assert_eq!(s.autoscale.max_replicas, 8);
        assert_eq!(s.video.frame_bytes, 4096);
        assert_eq!(s.video.costs.recognize, Duration::from_millis(30));
        assert_eq!(s.iot.sensors, 100);
        assert_eq!(s.iot.costs.train, Duration::from_secs(1));
    }

    #[test]
    fn diagnostics_carry_lines() {
        #[allow(clippy::type_complexity)]
        let cases: &[(&str, fn(&ScenarioError) -> bool)] = &[
            ("mode: open\n", |e| {
                matches!(e, ScenarioError::InvalidValue { line: 4, .. })
            }),
            ("concurrency: 0\n", |e| {
                matches!(e, ScenarioError::InvalidValue { line: 4, .. })
            }),
            ("colour: red\n", |e| {
                matches!(e, ScenarioError::UnknownKey { line: 4, .. })
            }),
            ("seed: 1\nseed: 2\n", |e| {
                matches!(e, ScenarioError::DuplicateKey { line: 5, .. })
            }),
            ("oops\n", |e| matches!(e, ScenarioError::Syntax { line: 4 })),
            ("video.face_pass_p: 2\n", |e| {
                matches!(e, ScenarioError::InvalidValue { .. })
            }),
            ("backend.x: tape\n", |e| matches!(e, ScenarioError::InvalidValue { .. })),
            ("autoscale.min: 500\n", |e| matches!(e, ScenarioError::Inconsistent(_))),
            ("sync_timeout: 5\n", |e| matches!(e, ScenarioError::InvalidValue { .. })),
        ];
        for (extra, check) in cases {
            let err = parse_scenario(&format!("{MIN}{extra}"), Path::new("."), None).unwrap_err();
            assert!(check(&err), "{extra:?}: {err:?}");
        }
        let err = parse_scenario("name: s\nduration: 1s\n", Path::new("."), None).unwrap_err();
        assert_eq!(err, ScenarioError::MissingKey("workflow_dir".into()));
        assert!(parse_scenario("name: s\nworkflow_dir: x\nduration: 0s\n", Path::new("."), None).is_err());
    }

    #[test]
    fn durations_and_scales() {
        assert_eq!(parse_duration("250ms"), Some(Duration::from_millis(250)));
        assert_eq!(parse_duration("2h"), Some(Duration::from_secs(7200)));
        assert_eq!(parse_duration("2"), None);
        assert_eq!(parse_duration("ms"), None);
        assert_eq!(parse_scale("1/60"), Some(1.0 / 60.0));
        assert_eq!(parse_scale("0.5"), Some(0.5));
        assert_eq!(parse_scale("0"), None);
        assert_eq!(parse_scale("1/0"), None);
    }
}
