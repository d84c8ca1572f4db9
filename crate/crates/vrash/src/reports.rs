//! CSV outputs and the run manifest.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vrash_core::models::LATENT_DIM;
use vrash_core::training::MetricRow;
use vrash_core::MetricLog;

pub const METRIC_HEADER: &str = "step,split,ce_total,ce_pitch,ce_octave,ce_delay,kl,beta";

/// Shortest text that parses back to the same `f64`; exponent form for
/// very small or very large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn metric_row_csv(r: &MetricRow) -> String {
    let mut s = format!("{},{}", r.step, r.split.as_str());
    for v in [r.ce_total, r.ce_pitch, r.ce_octave, r.ce_delay, r.kl, r.beta] {
        s.push(',');
        s.push_str(&fmt_f64(v));
    }
    s
}

pub fn metrics_csv(log: &MetricLog) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in &log.rows {
        s.push_str(&metric_row_csv(r));
        s.push('\n');
    }
    s
}

pub fn latent_header() -> String {
    let mut s = String::from("track_id,meta_label");
    for i in 0..LATENT_DIM {
        let _ = write!(s, ",mu{i}");
    }
    s
}

/// Quote a CSV field when it contains a separator, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn latent_row(track_id: &str, label: &str, mu: &[f64]) -> String {
    let mut s = format!("{},{}", csv_field(track_id), csv_field(label));
    for v in mu {
        s.push(',');
        s.push_str(&fmt_f64(*v));
    }
    s
}

/// Provenance of one command invocation. Written before any other output
/// and rewritten with the artifact list once the command finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub corpus_fingerprint: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    pub fn start(command: &str, config: String, corpus_fingerprint: Option<u64>, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            corpus_fingerprint: corpus_fingerprint.map(|f| format!("{f:016x}")).unwrap_or_default(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
            wall_clock_secs: 0.0,
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}
