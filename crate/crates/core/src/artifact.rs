//! JSON artifact helpers shared by every serialisable report.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Version stamped into every JSON artifact and the model file header.
pub const SCHEMA_VERSION: u32 = 1;

/// Short content fingerprint, `crc32:xxxxxxxx`.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("crc32:{:08x}", crc32fast::hash(bytes))
}

pub fn fingerprint_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(fingerprint(&serde_json::to_vec(value)?))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Parses an artifact, rejecting any `schema_version` other than ours.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(value)?),
        Some(v) => Err(Error::SchemaVersion { found: v as u32, expected: SCHEMA_VERSION }),
        None => Err(Error::Format("artifact has no schema_version".into())),
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, Debug, PartialEq)]
    struct Doc {
        schema_version: u32,
        x: f64,
    }

    #[test]
    fn version_gate() {
        let ok = from_json::<Doc>(r#"{"schema_version":1,"x":0.1}"#).unwrap();
        assert_eq!(ok.x, 0.1);
        assert!(matches!(
            from_json::<Doc>(r#"{"schema_version":7,"x":0.1}"#),
            Err(Error::SchemaVersion { found: 7, .. })
        ));
        assert!(matches!(from_json::<Doc>(r#"{"x":0.1}"#), Err(Error::Format(_))));
    }

    #[test]
    fn f64_round_trips_losslessly() {
        let d = Doc { schema_version: 1, x: std::f64::consts::PI / 7.0 };
        let back: Doc = from_json(&to_json(&d).unwrap()).unwrap();
        assert_eq!(back.x.to_bits(), d.x.to_bits());
    }
}
