use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// A malformed command line or configuration key; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Applies `key.path=value` overrides to the serialized form of `base`.
///
/// Every key must already exist in `base`. Values parse as JSON, falling
/// back to a plain string, and the result must deserialize again.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, sets: &[String], prefix: &str) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{s}` is not KEY=VALUE")))?;
        let key = key.trim();
        let path = key.strip_prefix(prefix).unwrap_or(key);
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| UsageError(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    }
    serde_json::from_value(root).map_err(|e| UsageError(format!("invalid override: {e}")).into())
}
