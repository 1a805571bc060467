//! Canonical JSON emission: keys in sorted order (serde_json's default map
//! is a BTreeMap), floats printed with 17 significant digits, non-finite
//! floats as null, LF endings. Identical inputs give identical bytes.

use serde::Serialize;
use serde_json::Value;
use std::io::Write;
use std::path::Path;

/// 17 significant digits, enough to round-trip any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return "null".to_string();
    }
    format!("{x:.16e}")
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt_f64(n.as_f64().expect("is_f64 checked")));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serialization"));
                out.push(':');
                write_value(item, out);
            }
            out.push('}');
        }
    }
}

/// Serializes to canonical JSON text (single line, trailing newline).
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    out.push('\n');
    Ok(out)
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.persist(path)?;
    Ok(())
}
