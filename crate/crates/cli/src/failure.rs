use serde_json::json;
use sweetexit::Error;

/// Exit status and machine-readable kind of a failure.
pub fn classify(err: &Error) -> (i32, &'static str) {
    match err {
        Error::Io { .. } => (3, "io"),
        Error::Config(_) => (4, "config"),
        Error::Data { .. } => (5, "data"),
        Error::Diverged { .. } => (6, "diverged"),
        Error::Checkpoint(_) => (7, "checkpoint"),
        Error::Validation(_) | Error::Shape { .. } | Error::UndefinedSimilarity => (8, "validation"),
        Error::Json(_) => (9, "json"),
    }
}

pub const USAGE_STATUS: i32 = 2;

pub fn error_json(kind: &str, err: &dyn std::fmt::Display, details: Option<serde_json::Value>) -> String {
    let mut body = json!({ "kind": kind, "message": err.to_string() });
    if let Some(d) = details {
        body["details"] = d;
    }
    json!({ "error": body }).to_string()
}

pub fn details(err: &Error) -> Option<serde_json::Value> {
    match err {
        Error::Config(problems) => Some(json!(problems)),
        Error::Data { path, line, .. } => Some(json!({ "path": path, "line": line })),
        Error::Io { path, .. } => Some(json!({ "path": path })),
        Error::Diverged { step, regime, loss } => Some(json!({ "step": step, "regime": regime, "loss": loss.to_string() })),
        _ => None,
    }
}
