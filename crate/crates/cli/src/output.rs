use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INVARIANT: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// An error that knows its exit code.
#[derive(Debug, Clone)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
    /// Offending config field or the violated invariant.
    pub field: Option<String>,
}

impl Failure {
    pub fn config(message: impl Into<String>, field: Option<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
            field,
        }
    }

    pub fn invariant(name: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVARIANT,
            kind: "invariant",
            message: message.into(),
            field: Some(name.into()),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            message: message.into(),
            field: None,
        }
    }

    /// Input and config problems are the caller's; everything else from the
    /// core is a broken numerical invariant.
    pub fn from_core(e: visipruner_core::Error) -> Self {
        use visipruner_core::Error as E;
        match &e {
            E::Config(_) | E::Input(_) => Self::config(e.to_string(), None),
            E::NonFinite(_) => Self::invariant("finite-values", e.to_string()),
            E::DegenerateRow { .. } => Self::invariant("non-empty-softmax-row", e.to_string()),
            E::Causality { .. } => Self::invariant("causality", e.to_string()),
            E::Shape(_) => Self::invariant("shape-agreement", e.to_string()),
            E::State(_) => Self::invariant("state-consistency", e.to_string()),
        }
    }

    pub fn record(&self) -> String {
        let mut err = json!({
            "code": self.code,
            "kind": self.kind,
            "message": self.message,
        });
        if let Some(f) = &self.field {
            let key = if self.kind == "invariant" { "invariant" } else { "field" };
            err[key] = json!(f);
        }
        json!({ "error": err }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{} error at {field}: {}", self.kind, self.message),
            None => write!(f, "{} error: {}", self.kind, self.message),
        }
    }
}

impl std::error::Error for Failure {}

pub fn core<T>(r: visipruner_core::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::from_core)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::invariant("serializable-report", e.to_string()))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// `VISIPRUNER_OUT`, then `--out`, then the config's directory, then `out`.
pub fn resolve_out(flag: Option<PathBuf>, config: Option<PathBuf>) -> PathBuf {
    std::env::var_os("VISIPRUNER_OUT")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or(flag)
        .or(config)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes each file through a temp file in `dir` and renames it into place.
pub fn write_files(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))?;
    for (name, bytes) in files {
        let target = dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Failure::io(format!("temp file in {}: {e}", dir.display())))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| Failure::io(format!("writing {}: {e}", target.display())))?;
        tmp.persist(&target)
            .map_err(|e| Failure::io(format!("renaming into {}: {}", target.display(), e.error)))?;
    }
    Ok(())
}

/// A pass/fail verdict kept apart from the measured value it judges.
#[derive(Debug, Clone, Serialize)]
pub struct Judgment {
    pub name: String,
    pub subject: String,
    pub passed: bool,
    pub value: serde_json::Value,
    pub expected: serde_json::Value,
}

impl Judgment {
    pub fn new(name: &str, subject: &str, passed: bool, value: serde_json::Value, expected: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            subject: subject.into(),
            passed,
            value,
            expected,
        }
    }
}
