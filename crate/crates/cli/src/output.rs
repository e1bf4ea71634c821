//! Output conventions shared by all subcommands: every artifact embeds the
//! resolved configuration, seed, and tool version so a run can be reproduced
//! bit-for-bit from its own outputs. CSV files carry the embedding as a
//! single leading `#` comment line; JSON files carry `config` and `version`
//! fields.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
    pub detail: Option<serde_json::Value>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            exit_code: 1,
            detail: None,
        }
    }

    pub fn with_exit(mut self, code: i32) -> Self {
        self.exit_code = code;
        self
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }

    /// Machine-readable error document for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut doc = serde_json::json!({
            "error": self.message,
            "kind": self.kind,
            "version": VERSION,
        });
        if let Some(d) = &self.detail {
            doc["detail"] = d.clone();
        }
        doc
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

pub fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{context}: {e}"))
}

/// Writes a CSV body prefixed with the config comment line.
pub fn write_csv_with_config<F>(
    path: &Path,
    config: &impl Serialize,
    body: F,
) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(|e| io_err(&format!("create {path:?}"), e))?;
    let mut w = BufWriter::new(file);
    let cfg = serde_json::to_string(config).expect("config serializes");
    writeln!(w, "# wcps v{VERSION} config={cfg}")
        .and_then(|_| body(&mut w))
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&format!("write {path:?}"), e))
}

/// Writes a JSON document with `version` and `config` merged in.
pub fn write_json_with_config(
    path: &Path,
    config: &impl Serialize,
    payload: serde_json::Value,
) -> Result<(), CliError> {
    let mut doc = payload;
    if !doc.is_object() {
        doc = serde_json::json!({ "result": doc });
    }
    doc["version"] = serde_json::json!(VERSION);
    doc["config"] = serde_json::to_value(config).expect("config serializes");
    let file = File::create(path).map_err(|e| io_err(&format!("create {path:?}"), e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| CliError::new("io", format!("write {path:?}: {e}")))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&format!("write {path:?}"), e))
}

/// Loads a config file written by a previous run (either a bare config
/// object or a document with a `config` field).
pub fn load_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_err(&format!("read config {path:?}"), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::new("parse", format!("config {path:?}: {e}")))?;
    let config_value = match value.get("config") {
        Some(c) => c.clone(),
        None => value,
    };
    serde_json::from_value(config_value)
        .map_err(|e| CliError::new("parse", format!("config {path:?}: {e}")))
}
