//! Canonical JSON: sorted keys, no insignificant whitespace, UTF-8.

use serde::Serialize;

use crate::error::Result;

/// Serialize through `serde_json::Value`, whose map type keeps keys sorted.
pub fn canonical<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn canonical_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}
