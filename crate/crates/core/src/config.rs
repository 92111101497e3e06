//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, nested fields use dotted
//! keys (`cluster.eps_quantile = 0.02`). Lists are comma separated and an
//! empty value or `none` clears an optional field.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{AbmtError, Result};

/// Applies one `key = value` assignment to any serde-backed config.
pub fn set_field<T: Serialize + DeserializeOwned>(config: &T, key: &str, raw: &str) -> Result<T> {
    let mut root = serde_json::to_value(config)?;
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| AbmtError::Parameter(format!("unknown config key {key:?}")))?;
    }
    *slot = parse_like(slot, raw.trim()).map_err(|m| AbmtError::Parameter(format!("{key}: {m}")))?;
    serde_json::from_value(root).map_err(|e| AbmtError::Parameter(format!("{key}: {e}")))
}

fn parse_scalar(raw: &str) -> Value {
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::from(f);
    }
    Value::String(raw.to_string())
}

fn parse_like(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    if raw.is_empty() || raw == "none" {
        return Ok(Value::Null);
    }
    match current {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_f64() => raw.parse::<f64>().map(Value::from).map_err(|e| e.to_string()),
        Value::Number(_) => match raw.parse::<u64>() {
            Ok(u) => Ok(Value::from(u)),
            Err(_) => raw.parse::<f64>().map(Value::from).map_err(|e| e.to_string()),
        },
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => Ok(Value::Array(
            raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_scalar).collect(),
        )),
        Value::Null => Ok(parse_scalar(raw)),
        Value::Object(_) => Err("cannot assign a scalar to a section".into()),
    }
}

/// Parses a config file and applies every assignment on top of `base`.
pub fn apply_file<T: Serialize + DeserializeOwned>(base: T, text: &str) -> Result<T> {
    let mut config = base;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| AbmtError::Parse {
            line: n + 1,
            msg: "expected `key = value`".into(),
        })?;
        config = set_field(&config, key.trim(), value).map_err(|e| AbmtError::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
    }
    Ok(config)
}

/// `key = value` lines for every leaf field, in declaration order.
pub fn to_file<T: Serialize>(config: &T) -> Result<String> {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(|i| i.to_string()).collect();
                out.push_str(&format!("{prefix} = {}\n", parts.join(", ")));
            }
            Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
            Value::Null => out.push_str(&format!("{prefix} = none\n")),
            other => out.push_str(&format!("{prefix} = {other}\n")),
        }
    }
    let mut out = String::new();
    walk("", &serde_json::to_value(config)?, &mut out);
    Ok(out)
}
