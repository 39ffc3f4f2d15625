//! Function templates: one workflow stage per file.
//!
//! A template is a flat `key: value` document naming the stage, the tier it
//! is deployed on, the handler it wraps, where it reads input from, where its
//! outputs go, and which functions run next. Indexed keys (`output1`,
//! `next_function1`, `next_tier1`, ...) describe fan-out: with indexed
//! outputs they form conditional branches bound by index, without them every
//! indexed successor runs (one-to-many).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::kv;

/// Longest accepted cron period: one day.
pub const MAX_CRON_PERIOD_MS: u64 = 86_400_000;
/// Shortest accepted cron period: one second.
pub const MIN_CRON_PERIOD_MS: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("line {line}: malformed line")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid storage reference `{value}`")]
    InvalidRef { line: usize, value: String },
    #[error("line {line}: invalid cron value `{value}`")]
    InvalidCron { line: usize, value: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("line {line}: index mismatch: {detail}")]
    IndexMismatch { line: usize, detail: String },
    #[error("line {line}: output data name `{name}` declared twice")]
    DuplicateDataName { line: usize, name: String },
}

impl TemplateError {
    /// Source line of the error, when it points at one.
    pub fn line(&self) -> Option<usize> {
        match self {
            TemplateError::Syntax { line }
            | TemplateError::UnknownKey { line, .. }
            | TemplateError::DuplicateKey { line, .. }
            | TemplateError::InvalidRef { line, .. }
            | TemplateError::InvalidCron { line, .. }
            | TemplateError::InvalidValue { line, .. }
            | TemplateError::IndexMismatch { line, .. }
            | TemplateError::DuplicateDataName { line, .. } => Some(*line),
            TemplateError::MissingKey { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid storage reference `{0}`")]
pub struct InvalidRef(pub String);

/// A backend-qualified data key, written `backend://key`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorageRef {
    backend: String,
    key: String,
}

impl StorageRef {
    pub fn new(backend: impl Into<String>, key: impl Into<String>) -> Result<Self, InvalidRef> {
        let backend = backend.into();
        let key = key.into();
        if !kv::is_ident(&backend) || key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(InvalidRef(format!("{backend}://{key}")));
        }
        Ok(StorageRef { backend, key })
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Same backend, `key` extended with a `/suffix` segment.
    pub fn child(&self, suffix: &str) -> StorageRef {
        StorageRef {
            backend: self.backend.clone(),
            key: format!("{}/{}", self.key, suffix),
        }
    }
}

impl fmt::Display for StorageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.backend, self.key)
    }
}

impl FromStr for StorageRef {
    type Err = InvalidRef;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (backend, key) = s.split_once("://").ok_or_else(|| InvalidRef(s.to_string()))?;
        StorageRef::new(backend, key).map_err(|_| InvalidRef(s.to_string()))
    }
}

impl Serialize for StorageRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StorageRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NextSpec {
    pub function: String,
    pub tier: String,
}

impl NextSpec {
    pub fn new(function: impl Into<String>, tier: impl Into<String>) -> Self {
        NextSpec {
            function: function.into(),
            tier: tier.into(),
        }
    }
}

/// One declared output. `branch` is `Some(i)` for `output<i>` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSpec {
    pub branch: Option<u32>,
    pub data_name: String,
    pub target: StorageRef,
}

impl OutputSpec {
    /// The data name of an output is the key of its reference.
    pub fn new(branch: Option<u32>, target: StorageRef) -> Self {
        OutputSpec {
            branch,
            data_name: target.key().to_string(),
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    Sync,
    Async,
}

impl SyncMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Sync => "sync",
            SyncMode::Async => "async",
        }
    }
}

impl FromStr for SyncMode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "sync" => Ok(SyncMode::Sync),
            "async" => Ok(SyncMode::Async),
            _ => Err(()),
        }
    }
}

/// Periodic firing of a workflow entry: `burst` concurrent requests every
/// `period_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CronSpec {
    period_ms: u64,
    burst: u32,
}

impl CronSpec {
    /// Periods are whole seconds between one second and one day.
    pub fn new(period_ms: u64, burst: u32) -> Option<Self> {
        let ok = (MIN_CRON_PERIOD_MS..=MAX_CRON_PERIOD_MS).contains(&period_ms)
            && period_ms.is_multiple_of(1000)
            && burst >= 1;
        ok.then_some(CronSpec { period_ms, burst })
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn burst(&self) -> u32 {
        self.burst
    }

    fn parse_period(value: &str) -> Option<u64> {
        let unit_pos = value.find(|c: char| !c.is_ascii_digit())?;
        let (digits, unit) = value.split_at(unit_pos);
        if digits.is_empty() || (digits.len() > 1 && digits.starts_with('0')) {
            return None;
        }
        let n: u64 = digits.parse().ok()?;
        let scale = match unit {
            "s" => 1_000,
            "m" => 60_000,
            "h" => 3_600_000,
            _ => return None,
        };
        n.checked_mul(scale)
    }

    fn render_period(&self) -> String {
        let ms = self.period_ms;
        if ms.is_multiple_of(3_600_000) {
            format!("{}h", ms / 3_600_000)
        } else if ms.is_multiple_of(60_000) {
            format!("{}m", ms / 60_000)
        } else {
            format!("{}s", ms / 1000)
        }
    }
}

/// One parsed template file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionTemplate {
    pub name: String,
    pub tier: String,
    pub handler: String,
    pub sync: SyncMode,
    pub cron: Option<CronSpec>,
    /// First entry is the primary input, fed by the predecessor.
    pub inputs: Vec<StorageRef>,
    pub outputs: Vec<OutputSpec>,
    /// `(branch_index, next)`; index 0 for unindexed and one-to-many successors.
    pub nexts: Vec<(u32, NextSpec)>,
}

impl FunctionTemplate {
    pub fn is_terminal(&self) -> bool {
        self.nexts.is_empty()
    }

    /// True when outputs carry branch indices, i.e. successors are chosen by
    /// the produced data name.
    pub fn is_branching(&self) -> bool {
        self.outputs.iter().any(|o| o.branch.is_some())
    }

    pub fn primary_input(&self) -> Option<&StorageRef> {
        self.inputs.first()
    }

    pub fn output_named(&self, data_name: &str) -> Option<&OutputSpec> {
        self.outputs.iter().find(|o| o.data_name == data_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Name,
    Tier,
    Handler,
    Sync,
    Cron,
    CronBurst,
    Input(u32),
    Output(Option<u32>),
    NextFunction(Option<u32>),
    NextTier(Option<u32>),
}

fn index_suffix(key: &str, prefix: &str) -> Option<Option<u32>> {
    let rest = key.strip_prefix(prefix)?;
    if rest.is_empty() {
        return Some(None);
    }
    if rest.starts_with('0') || !rest.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok().map(Some)
}

fn classify(key: &str) -> Option<Field> {
    Some(match key {
        "name" => Field::Name,
        "tier" => Field::Tier,
        "handler" => Field::Handler,
        "sync" => Field::Sync,
        "cron" => Field::Cron,
        "cron_burst" => Field::CronBurst,
        _ => {
            // next_tier must be checked before a bare prefix could swallow it.
            if let Some(idx) = index_suffix(key, "next_function") {
                Field::NextFunction(idx)
            } else if let Some(idx) = index_suffix(key, "next_tier") {
                Field::NextTier(idx)
            } else if let Some(idx) = index_suffix(key, "output") {
                Field::Output(idx)
            } else {
                match index_suffix(key, "input")? {
                    None => Field::Input(1),
                    Some(n) if n >= 2 => Field::Input(n),
                    Some(_) => return None,
                }
            }
        }
    })
}

fn mismatch(line: usize, detail: impl Into<String>) -> TemplateError {
    TemplateError::IndexMismatch {
        line,
        detail: detail.into(),
    }
}

fn first_indexed_line<V>(map: &BTreeMap<Option<u32>, (usize, V)>) -> Option<usize> {
    map.iter().find(|(k, _)| k.is_some()).map(|(_, (line, _))| *line)
}

/// Checks that `indices` are exactly `first..=first+len-1`.
fn contiguous_from(indices: impl Iterator<Item = u32>, first: u32) -> bool {
    indices.enumerate().all(|(i, idx)| idx == first + i as u32)
}

/// Parses one template document.
pub fn parse_template(text: &str) -> Result<FunctionTemplate, TemplateError> {
    let entries = kv::parse(text).map_err(|line| TemplateError::Syntax { line })?;

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut scalars: BTreeMap<&'static str, (usize, &str)> = BTreeMap::new();
    let mut inputs: BTreeMap<u32, (usize, StorageRef)> = BTreeMap::new();
    let mut outputs: BTreeMap<Option<u32>, (usize, StorageRef)> = BTreeMap::new();
    let mut next_fns: BTreeMap<Option<u32>, (usize, &str)> = BTreeMap::new();
    let mut next_tiers: BTreeMap<Option<u32>, (usize, &str)> = BTreeMap::new();

    for entry in &entries {
        let line = entry.line;
        let field = classify(&entry.key).ok_or_else(|| TemplateError::UnknownKey {
            line,
            key: entry.key.clone(),
        })?;
        if seen.insert(entry.key.as_str(), line).is_some() {
            return Err(TemplateError::DuplicateKey {
                line,
                key: entry.key.clone(),
            });
        }
        let value = entry.value.as_str();
        let parse_ref = || {
            value.parse::<StorageRef>().map_err(|_| TemplateError::InvalidRef {
                line,
                value: value.to_string(),
            })
        };
        let ident = |key: &str| {
            if kv::is_ident(value) {
                Ok(value)
            } else {
                Err(TemplateError::InvalidValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                })
            }
        };
        match field {
            Field::Name => {
                scalars.insert("name", (line, ident("name")?));
            }
            Field::Tier => {
                scalars.insert("tier", (line, ident("tier")?));
            }
            Field::Handler => {
                scalars.insert("handler", (line, ident("handler")?));
            }
            Field::Sync => {
                scalars.insert("sync", (line, value));
            }
            Field::Cron => {
                scalars.insert("cron", (line, value));
            }
            Field::CronBurst => {
                scalars.insert("cron_burst", (line, value));
            }
            Field::Input(n) => {
                inputs.insert(n, (line, parse_ref()?));
            }
            Field::Output(idx) => {
                outputs.insert(idx, (line, parse_ref()?));
            }
            Field::NextFunction(idx) => {
                next_fns.insert(idx, (line, ident(&entry.key)?));
            }
            Field::NextTier(idx) => {
                next_tiers.insert(idx, (line, ident(&entry.key)?));
            }
        }
    }

    let required = |key: &'static str| {
        scalars
            .get(key)
            .copied()
            .ok_or_else(|| TemplateError::MissingKey { key: key.to_string() })
    };
    let (_, name) = required("name")?;
    let (_, tier) = required("tier")?;
    let (_, handler) = required("handler")?;
    let (sync_line, sync_value) = required("sync")?;
    let sync = sync_value.parse().map_err(|_| TemplateError::InvalidValue {
        line: sync_line,
        key: "sync".into(),
        value: sync_value.into(),
    })?;

    let cron = match (scalars.get("cron"), scalars.get("cron_burst")) {
        (None, None) => None,
        (None, Some(&(line, value))) => {
            return Err(TemplateError::InvalidCron {
                line,
                value: value.to_string(),
            })
        }
        (Some(&(line, value)), burst) => {
            let invalid = |line: usize, value: &str| TemplateError::InvalidCron {
                line,
                value: value.to_string(),
            };
            let period = CronSpec::parse_period(value).ok_or_else(|| invalid(line, value))?;
            let burst = match burst {
                None => 1,
                Some(&(bline, bvalue)) => bvalue
                    .parse::<u32>()
                    .ok()
                    .filter(|b| *b >= 1 && !bvalue.starts_with('+'))
                    .ok_or_else(|| invalid(bline, bvalue))?,
            };
            Some(CronSpec::new(period, burst).ok_or_else(|| invalid(line, value))?)
        }
    };

    if let Some((&last, &(line, _))) = inputs.last_key_value() {
        if !contiguous_from(inputs.keys().copied(), 1) {
            return Err(mismatch(line, format!("input indices must run 1..{last} without gaps")));
        }
    }
    let inputs = inputs.into_values().map(|(_, r)| r).collect();

    // Unindexed and indexed forms of the same entity are contradictory.
    let mixed = |has_plain: bool, indexed_line: Option<usize>, what: &str| match indexed_line {
        Some(line) if has_plain => Err(mismatch(line, format!("both `{what}` and `{what}N` present"))),
        _ => Ok(()),
    };
    mixed(outputs.contains_key(&None), first_indexed_line(&outputs), "output")?;
    mixed(
        next_fns.contains_key(&None),
        first_indexed_line(&next_fns),
        "next_function",
    )?;
    mixed(
        next_tiers.contains_key(&None),
        first_indexed_line(&next_tiers),
        "next_tier",
    )?;

    // next_functionN and next_tierN must pair up index by index.
    for (idx, (line, _)) in &next_fns {
        if !next_tiers.contains_key(idx) {
            return Err(mismatch(*line, "next_function without matching next_tier"));
        }
    }
    for (idx, (line, _)) in &next_tiers {
        if !next_fns.contains_key(idx) {
            return Err(mismatch(*line, "next_tier without matching next_function"));
        }
    }

    let indexed_outputs = outputs.keys().any(Option::is_some);
    let indexed_nexts = next_fns.keys().any(Option::is_some);
    if indexed_outputs {
        let max = outputs.keys().flatten().copied().max().unwrap_or(0);
        if !contiguous_from(outputs.keys().flatten().copied(), 1) {
            let line = outputs.values().map(|(l, _)| *l).max().unwrap_or(0);
            return Err(mismatch(line, format!("output indices must run 1..{max} without gaps")));
        }
        if let Some((line, _)) = next_fns.get(&None) {
            return Err(mismatch(*line, "unindexed next_function with indexed outputs"));
        }
        for (idx, (line, _)) in &next_fns {
            if idx.is_some_and(|i| i > max) {
                return Err(mismatch(*line, "next_function index has no matching output"));
            }
        }
    } else if indexed_nexts && !contiguous_from(next_fns.keys().flatten().copied(), 1) {
        let line = next_fns.values().map(|(l, _)| *l).max().unwrap_or(0);
        return Err(mismatch(line, "next_function indices must run 1..N without gaps"));
    }

    let mut out_specs: Vec<OutputSpec> = Vec::with_capacity(outputs.len());
    for (idx, (line, target)) in outputs {
        let spec = OutputSpec::new(idx, target);
        if out_specs.iter().any(|o| o.data_name == spec.data_name) {
            return Err(TemplateError::DuplicateDataName {
                line,
                name: spec.data_name,
            });
        }
        out_specs.push(spec);
    }

    let nexts = next_fns
        .into_iter()
        .map(|(idx, (_, function))| {
            let (_, tier) = next_tiers[&idx];
            // Without indexed outputs, indexed successors are one-to-many.
            let branch = if indexed_outputs { idx.unwrap_or(0) } else { 0 };
            (branch, NextSpec::new(function, tier))
        })
        .collect();

    Ok(FunctionTemplate {
        name: name.to_string(),
        tier: tier.to_string(),
        handler: handler.to_string(),
        sync,
        cron,
        inputs,
        outputs: out_specs,
        nexts,
    })
}

/// Renders a template in canonical key order. Inverse of [`parse_template`].
pub fn render_template(t: &FunctionTemplate) -> String {
    let mut out = String::new();
    let mut line = |key: &str, value: &dyn fmt::Display| {
        out.push_str(key);
        out.push_str(": ");
        out.push_str(&value.to_string());
        out.push('\n');
    };
    line("name", &t.name);
    line("tier", &t.tier);
    line("handler", &t.handler);
    line("sync", &t.sync.as_str());
    if let Some(cron) = &t.cron {
        line("cron", &cron.render_period());
        if cron.burst != 1 {
            line("cron_burst", &cron.burst);
        }
    }
    for (i, input) in t.inputs.iter().enumerate() {
        if i == 0 {
            line("input", input);
        } else {
            line(&format!("input{}", i + 1), input);
        }
    }
    for output in &t.outputs {
        match output.branch {
            None => line("output", &output.target),
            Some(i) => line(&format!("output{i}"), &output.target),
        }
    }
    // A lone unindexed successor uses the plain keys; everything else is
    // indexed (branch index, or position for one-to-many).
    let key_index = |pos: usize, branch: u32| -> Option<u32> {
        if t.is_branching() {
            Some(branch)
        } else if t.nexts.len() == 1 {
            None
        } else {
            Some(pos as u32 + 1)
        }
    };
    let suffixed = |base: &str, idx: Option<u32>| match idx {
        None => base.to_string(),
        Some(i) => format!("{base}{i}"),
    };
    for (pos, (branch, next)) in t.nexts.iter().enumerate() {
        line(&suffixed("next_function", key_index(pos, *branch)), &next.function);
    }
    for (pos, (branch, next)) in t.nexts.iter().enumerate() {
        line(&suffixed("next_tier", key_index(pos, *branch)), &next.tier);
    }
    out
}
