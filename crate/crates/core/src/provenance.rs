//! Stable configuration hashes.

use serde::Serialize;

use crate::error::Result;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // `Value` objects are `BTreeMap`s, so re-serialising sorts every level.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// `fnv1a64(canonical_json(value))` as 16 lowercase hex digits.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(canonical_json(value)?.as_bytes())))
}
