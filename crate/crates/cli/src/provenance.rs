use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stamp embedded in every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    /// SHA-256 of the configuration bytes the command ran with.
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, config: &[u8]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: hex::encode(Sha256::digest(config)),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// `value` with a top-level `provenance` field added.
    pub fn stamp(&self, mut value: serde_json::Value) -> serde_json::Value {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("provenance".into(), self.to_value());
            value
        } else {
            serde_json::json!({ "provenance": self.to_value(), "data": value })
        }
    }
}
