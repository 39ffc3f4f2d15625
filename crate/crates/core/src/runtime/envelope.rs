use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::template::SyncMode;

pub const ENVELOPE_VERSION: u32 = 1;

/// The wire unit of one function call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvocationEnvelope {
    pub version: u32,
    pub workflow: String,
    pub request_id: String,
    pub invocation_id: String,
    pub parent_id: Option<String>,
    pub function: String,
    pub hop: u32,
    /// Serialized storage references handed over by the caller.
    pub data_keys: Vec<String>,
    pub issued_at: u64,
    pub sync: SyncMode,
}

impl InvocationEnvelope {
    /// Entry invocation of a fresh request.
    pub fn entry(workflow: &str, function: &str, request_id: &str, issued_at: u64, sync: SyncMode) -> Self {
        InvocationEnvelope {
            version: ENVELOPE_VERSION,
            workflow: workflow.to_string(),
            request_id: request_id.to_string(),
            invocation_id: format!("{request_id}.0"),
            parent_id: None,
            function: function.to_string(),
            hop: 0,
            data_keys: Vec::new(),
            issued_at,
            sync,
        }
    }

    /// Envelope for the `ordinal`-th successor invoked by this invocation.
    /// Child ids extend the parent id, so they are unique within a request
    /// and identical across runs.
    pub fn child(
        &self,
        function: &str,
        ordinal: usize,
        data_keys: Vec<String>,
        issued_at: u64,
        sync: SyncMode,
    ) -> Self {
        InvocationEnvelope {
            version: ENVELOPE_VERSION,
            workflow: self.workflow.clone(),
            request_id: self.request_id.clone(),
            invocation_id: format!("{}.{ordinal}", self.invocation_id),
            parent_id: Some(self.invocation_id.clone()),
            function: function.to_string(),
            hop: self.hop + 1,
            data_keys,
            issued_at,
            sync,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != ENVELOPE_VERSION {
            return Err(format!("unsupported envelope version {}", self.version));
        }
        if self.request_id.is_empty() || self.invocation_id.is_empty() {
            return Err("empty request or invocation id".into());
        }
        if self.hop == 0 && self.parent_id.is_some() {
            return Err("entry invocation with a parent".into());
        }
        if self.hop > 0 && self.parent_id.is_none() {
            return Err("non-entry invocation without a parent".into());
        }
        Ok(())
    }
}

/// Stable 64-bit mix of a seed and a label (FNV-1a, then a splitmix64
/// finalizer).
pub fn mix_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// RNG for a labelled stream under a run seed.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, label))
}

/// Deterministic uuid-formatted request ids.
pub struct RequestIds {
    rng: ChaCha8Rng,
}

impl RequestIds {
    pub fn new(seed: u64) -> Self {
        RequestIds {
            rng: seeded_rng(seed, "request-ids"),
        }
    }

    pub fn next_id(&mut self) -> String {
        let bytes: [u8; 16] = self.rng.random();
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }
}
