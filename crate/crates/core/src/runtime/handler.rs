use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::envelope::seeded_rng;
use crate::storage::DataObject;

/// What a handler sees about the invocation it serves.
#[derive(Debug, Clone)]
pub struct HandlerContext {
    pub workflow: String,
    pub function: String,
    pub tier: String,
    pub request_id: String,
    pub invocation_id: String,
    pub seed: u64,
    /// Clock reading when the handler started.
    pub now_ms: f64,
    /// Speed factor of the executing tier.
    pub speed: f64,
}

impl HandlerContext {
    /// Wall time `cost` takes on this tier.
    pub fn scaled(&self, cost: Duration) -> Duration {
        cost.div_f64(self.speed)
    }

    /// RNG determined by the run seed and the invocation id.
    pub fn rng(&self) -> ChaCha8Rng {
        seeded_rng(self.seed, &self.invocation_id)
    }
}

/// Named objects a handler produced plus the compute it claims.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandlerOutput {
    /// `(data_name, bytes)`; the name selects the output spec and branch.
    pub objects: Vec<(String, Vec<u8>)>,
    /// Compute cost at reference speed; the runtime scales it by the tier's
    /// speed factor.
    pub cost: Duration,
    /// Extra labels attached to the Handler span.
    pub labels: BTreeMap<String, String>,
}

impl HandlerOutput {
    pub fn new(cost: Duration) -> Self {
        HandlerOutput {
            cost,
            ..Default::default()
        }
    }

    pub fn with_object(mut self, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.objects.push((name.into(), bytes));
        self
    }

    pub fn with_label(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct HandlerError(pub String);

pub trait Handler: Send + Sync {
    fn call(&self, ctx: &HandlerContext, inputs: &[DataObject]) -> Result<HandlerOutput, HandlerError>;
}

impl<F> Handler for F
where
    F: Fn(&HandlerContext, &[DataObject]) -> Result<HandlerOutput, HandlerError> + Send + Sync,
{
    fn call(&self, ctx: &HandlerContext, inputs: &[DataObject]) -> Result<HandlerOutput, HandlerError> {
        self(ctx, inputs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("handler `{0}` registered twice")]
pub struct DuplicateHandler(pub String);

#[derive(Default, Clone)]
pub struct HandlerRegistry {
    entries: BTreeMap<String, Arc<dyn Handler>>,
}

impl HandlerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, handler: Arc<dyn Handler>) -> Result<(), DuplicateHandler> {
        if self.entries.contains_key(id) {
            return Err(DuplicateHandler(id.to_string()));
        }
        self.entries.insert(id.to_string(), handler);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Handler>> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Handler that returns nothing and costs nothing.
pub fn noop() -> Arc<dyn Handler> {
    Arc::new(|_: &HandlerContext, _: &[DataObject]| Ok(HandlerOutput::default()))
}

/// Handler that forwards its first input under `name` after `cost`.
pub fn relay(name: &str, cost: Duration) -> Arc<dyn Handler> {
    let name = name.to_string();
    Arc::new(move |_: &HandlerContext, inputs: &[DataObject]| {
        let bytes = inputs.first().map(|o| o.bytes.clone()).unwrap_or_default();
        Ok(HandlerOutput::new(cost).with_object(name.clone(), bytes))
    })
}
