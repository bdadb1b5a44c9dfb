use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Package version followed by `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("MSARNN_GIT_DESCRIBE"), ")");

/// Contents of `run.json`: what was run, with which parameters and build.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub version: &'static str,
    pub argv: Vec<String>,
    /// Every parsed flag, defaults included.
    pub args: Value,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub exit_code: Option<u8>,
    pub error: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunRecord {
    pub fn start(args: &impl Serialize, threads: usize) -> Self {
        Self {
            version: VERSION,
            argv: std::env::args().collect(),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            threads,
            started_at: now(),
            finished_at: None,
            exit_code: None,
            error: None,
        }
    }

    pub fn finish(&mut self, exit_code: u8, error: Option<String>) {
        self.finished_at = Some(now());
        self.exit_code = Some(exit_code);
        self.error = error;
    }
}
