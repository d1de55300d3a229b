//! One JSON object per line on stderr, keys sorted.

use serde_json::{json, Value};

/// Logs a phase of `cmd`; object fields of `fields` are merged in.
pub fn log(cmd: &str, phase: &str, fields: Value) {
    let mut line = json!({"cmd": cmd, "phase": phase});
    if let (Some(dst), Value::Object(src)) = (line.as_object_mut(), fields) {
        dst.extend(src);
    }
    eprintln!("{line}");
}
