//! Stable content hashes of serializable configuration.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Hex SHA-256 of the compact JSON encoding of `value`. Struct fields
/// serialize in declaration order, so the hash is stable across runs.
pub fn json_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
