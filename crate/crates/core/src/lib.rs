//! A from-scratch continual-learning laboratory.
//!
//! A small decoder-only transformer learns synthetic facts. Per-neuron
//! training history drives targeted updates, and model-internal features
//! feed classifiers that tell novel, known and contradicting facts apart.

pub mod corpus;
pub mod dissonance;
pub mod error;
pub mod harness;
pub mod model;
pub mod plasticity;
pub mod tracking;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of a value's canonical JSON encoding.
pub fn fingerprint_json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    fingerprint_bytes(&serde_json::to_vec(value).expect("value serializes to JSON"))
}
