use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance record written once by every artifact-producing command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub git_describe: String,
    pub output_dir: PathBuf,
    pub started: String,
    pub finished: String,
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set, as RFC 3339.
pub fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse::<i64>().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs() as i64)
        });
    OffsetDateTime::from_unix_timestamp(secs)
        .unwrap_or(OffsetDateTime::UNIX_EPOCH)
        .format(&Rfc3339)
        .unwrap_or_default()
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, config: Option<&Path>, seed: u64, out: &Path) -> Self {
        Self {
            command: command.into(),
            config: config.map(Path::to_path_buf),
            seed,
            git_describe: git_describe(),
            output_dir: out.to_path_buf(),
            started: timestamp(),
            finished: String::new(),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished = timestamp();
        let path = self.output_dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}
