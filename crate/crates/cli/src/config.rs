//! Layered command configuration: built-in defaults, then a JSON file, then
//! `--set key.path=value` overrides. Unknown keys are rejected when the
//! merged object is deserialized into the command's typed config.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn read_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::usage(format!("{}: {e}", path.display()))),
    }
}

/// Recursive merge; `over` wins, nested objects merge key by key.
pub fn merge(base: &mut Map<String, Value>, over: &Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, else as
/// a bare string, so `--set variant=cvcl_t` and `--set peak_lr=1e-3` both work.
pub fn parse_set(arg: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {arg:?} is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_set(obj: &mut Map<String, Value>, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = obj;
    for p in parents {
        let next = cur.entry(p.clone()).or_insert_with(|| Value::Object(Map::new()));
        cur = match next {
            Value::Object(m) => m,
            _ => return Err(CliError::usage(format!("override path {} crosses a non-object", path.join(".")))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// File layer and `--set` layer merged, without defaults.
pub fn user_layer(file: Option<&Path>, sets: &[String]) -> Result<Map<String, Value>, CliError> {
    let mut obj = match file {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    for s in sets {
        let (path, value) = parse_set(s)?;
        apply_set(&mut obj, &path, value)?;
    }
    Ok(obj)
}

pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, user: &Map<String, Value>) -> Result<T, CliError> {
    let mut base = match serde_json::to_value(defaults).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    };
    merge(&mut base, user);
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::usage(format!("config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        b: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        a: usize,
        name: String,
        inner: Inner,
    }

    fn defaults() -> Outer {
        Outer {
            a: 1,
            name: "x".into(),
            inner: Inner { b: 0.5 },
        }
    }

    #[test]
    fn overrides_layer_over_defaults() {
        let user = user_layer(None, &["inner.b=2e-3".into(), "name=cvcl_t".into()]).unwrap();
        let got: Outer = resolve(&defaults(), &user).unwrap();
        assert_eq!(got.inner.b, 2e-3);
        assert_eq!(got.name, "cvcl_t");
        assert_eq!(got.a, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let user = user_layer(None, &["inner.c=1".into()]).unwrap();
        let err = resolve(&defaults(), &user).unwrap_err().to_string();
        assert!(err.contains("unknown field `c`"), "{err}");
        let user = user_layer(None, &["bogus=1".into()]).unwrap();
        assert!(resolve(&defaults(), &user).is_err());
    }

    #[test]
    fn malformed_overrides() {
        assert!(parse_set("novalue").is_err());
        assert!(parse_set("a..b=1").is_err());
        let mut obj = Map::new();
        apply_set(&mut obj, &["a".into()], Value::from(1)).unwrap();
        assert!(apply_set(&mut obj, &["a".into(), "b".into()], Value::from(1)).is_err());
    }
}
