//! Experiment reports: metric fragments, theorem-check rows, and the
//! hash-stable report body. Wall-clock data lives in a sidecar document so
//! report bodies stay byte-identical across reruns with the same seed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NclError, Result};

/// One measured quantity: {name, value, per-item values, standard error,
/// config echo}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricFragment {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_item: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricFragment {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            per_item: None,
            stderr: None,
            config: None,
        }
    }

    pub fn with_per_item(mut self, items: Vec<f64>) -> Self {
        self.per_item = Some(items);
        self
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = Some(stderr);
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }
}

/// A theorem-suite row: the check, the measured value, the tolerance it was
/// held to, and the verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckRow {
    /// Pass when `measured <= tolerance`.
    pub fn le(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: None,
        }
    }

    /// Pass when `measured >= tolerance`.
    pub fn ge(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured >= tolerance,
            measured,
            tolerance,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// The serialized report body. Deterministic for a fixed config and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// The exact configuration text the run was started with.
    pub config_text: String,
    /// sha256 over the config text and any referenced input files.
    pub content_hash: String,
    pub metrics: Vec<MetricFragment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckRow>,
}

impl ExperimentReport {
    pub fn new(config_text: impl Into<String>, extra_inputs: &[&[u8]]) -> Self {
        let config_text = config_text.into();
        let content_hash = content_hash(config_text.as_bytes(), extra_inputs);
        Self {
            config_text,
            content_hash,
            metrics: Vec::new(),
            checks: Vec::new(),
        }
    }

    /// Add a fragment, rejecting duplicates so every requested metric
    /// appears exactly once.
    pub fn push_metric(&mut self, fragment: MetricFragment) -> Result<()> {
        if self.metrics.iter().any(|m| m.name == fragment.name) {
            return Err(NclError::ConfigInvalid(format!(
                "metric `{}` reported twice",
                fragment.name
            )));
        }
        self.metrics.push(fragment);
        Ok(())
    }

    pub fn push_check(&mut self, row: CheckRow) {
        self.checks.push(row);
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| NclError::ConfigInvalid(format!("report serialize: {e}")))
    }
}

/// sha256 hex digest over the config bytes and any additional inputs.
pub fn content_hash(config: &[u8], extra_inputs: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config);
    for chunk in extra_inputs {
        hasher.update(chunk);
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Run timing, kept out of the report body on purpose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSidecar {
    pub started_unix_ms: u128,
    pub wall_clock_ms: f64,
    pub phases: Vec<(String, f64)>,
}
