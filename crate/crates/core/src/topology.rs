//! Tiers, their compute speeds and the one-way delays between them.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("tier `{0}` declared twice")]
    DuplicateTier(String),
    #[error("tier `{0}` has non-positive speed {1}")]
    InvalidSpeed(String, f64),
    #[error("unknown tier `{0}`")]
    UnknownTier(String),
    #[error("delay {0}->{1} must be a non-negative number, got {2}")]
    InvalidDelay(String, String, f64),
    #[error("delay from `{0}` to itself must be 0")]
    NonZeroDiagonal(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierDescriptor {
    pub name: String,
    /// Root URL of the tier's gateway in real mode.
    pub base_url: Option<String>,
    /// Handler cost divisor; 1.0 is the reference machine.
    pub speed: f64,
    pub served_functions: BTreeSet<String>,
}

impl TierDescriptor {
    pub fn new(name: &str, speed: f64) -> Self {
        TierDescriptor {
            name: name.to_string(),
            base_url: None,
            speed,
            served_functions: BTreeSet::new(),
        }
    }
}

pub fn default_speed(tier: &str) -> f64 {
    match tier {
        "iot" => 0.25,
        "cloud" => 2.0,
        _ => 1.0,
    }
}

/// Registered tiers plus a total, zero-diagonal one-way delay matrix.
/// Unset off-diagonal pairs fall back to the reverse direction, then to 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Topology {
    tiers: BTreeMap<String, TierDescriptor>,
    one_way_ms: BTreeMap<(String, String), f64>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    /// `iot`, `edge` and `cloud` at their default speeds, zero delays.
    pub fn three_tier() -> Self {
        let mut t = Topology::new();
        for name in ["iot", "edge", "cloud"] {
            t.add_tier(TierDescriptor::new(name, default_speed(name))).unwrap();
        }
        t
    }

    pub fn add_tier(&mut self, tier: TierDescriptor) -> Result<(), TopologyError> {
        if !(tier.speed > 0.0 && tier.speed.is_finite()) {
            return Err(TopologyError::InvalidSpeed(tier.name, tier.speed));
        }
        if self.tiers.contains_key(&tier.name) {
            return Err(TopologyError::DuplicateTier(tier.name));
        }
        self.tiers.insert(tier.name.clone(), tier);
        Ok(())
    }

    pub fn tier(&self, name: &str) -> Option<&TierDescriptor> {
        self.tiers.get(name)
    }

    pub fn tier_mut(&mut self, name: &str) -> Option<&mut TierDescriptor> {
        self.tiers.get_mut(name)
    }

    pub fn tiers(&self) -> impl Iterator<Item = &TierDescriptor> {
        self.tiers.values()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tiers.contains_key(name)
    }

    pub fn speed(&self, name: &str) -> Option<f64> {
        self.tiers.get(name).map(|t| t.speed)
    }

    pub fn set_delay(&mut self, a: &str, b: &str, ms: f64) -> Result<(), TopologyError> {
        for t in [a, b] {
            if !self.contains(t) {
                return Err(TopologyError::UnknownTier(t.to_string()));
            }
        }
        if !(ms >= 0.0 && ms.is_finite()) {
            return Err(TopologyError::InvalidDelay(a.into(), b.into(), ms));
        }
        if a == b && ms != 0.0 {
            return Err(TopologyError::NonZeroDiagonal(a.into()));
        }
        self.one_way_ms.insert((a.to_string(), b.to_string()), ms);
        Ok(())
    }

    /// Sets both directions.
    pub fn set_symmetric_delay(&mut self, a: &str, b: &str, ms: f64) -> Result<(), TopologyError> {
        self.set_delay(a, b, ms)?;
        self.set_delay(b, a, ms)
    }

    pub fn one_way_ms(&self, from: &str, to: &str) -> Result<f64, TopologyError> {
        for t in [from, to] {
            if !self.contains(t) {
                return Err(TopologyError::UnknownTier(t.to_string()));
            }
        }
        if from == to {
            return Ok(0.0);
        }
        let key = |a: &str, b: &str| (a.to_string(), b.to_string());
        Ok(self
            .one_way_ms
            .get(&key(from, to))
            .or_else(|| self.one_way_ms.get(&key(to, from)))
            .copied()
            .unwrap_or(0.0))
    }

    pub fn one_way(&self, from: &str, to: &str) -> Result<Duration, TopologyError> {
        self.one_way_ms(from, to).map(|ms| Duration::from_secs_f64(ms / 1e3))
    }
}
