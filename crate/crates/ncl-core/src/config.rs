//! Experiment configuration: a nestable key = value tree (TOML) covering
//! the model, encoder, objective, training, and metric settings. All
//! paper-relevant constants surface here with their defaults.

use serde::{Deserialize, Serialize};

use crate::encoders::{AnyEncoder, EncoderInit, MlpEncoder, TabularEncoder};
use crate::error::{NclError, Result};
use crate::latent_model::{
    build_model, LabelMap, LatentClassModel, ModelSpec, PresetSpec,
};
use crate::reparam::NonNegTransform;
use crate::training::{ObjectiveSpec, OptimizerKind, Schedule, TrainConfig};

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Global seed; every stochastic stage derives from it. Required, so no
    /// run depends on implicit entropy.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub model: ModelSection,
    #[serde(default)]
    pub labels: Option<LabelSection>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub n_samples: Option<usize>,
    /// Target maximal class overlap for the `overlap` preset.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    #[serde(default)]
    pub conditional: Option<Vec<Vec<f64>>>,
}

impl ModelSection {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        if let (Some(prior), Some(cond)) = (&self.class_prior, &self.conditional) {
            return Ok(ModelSpec::Explicit(crate::latent_model::ExplicitSpec {
                class_prior: prior.clone(),
                conditional: cond.clone(),
            }));
        }
        let preset = self
            .preset
            .clone()
            .ok_or_else(|| NclError::ConfigInvalid("model needs a preset or explicit arrays".into()))?;
        let m = self
            .m
            .ok_or_else(|| NclError::ConfigInvalid("model.m is required".into()))?;
        let n_samples = self
            .n_samples
            .ok_or_else(|| NclError::ConfigInvalid("model.n_samples is required".into()))?;
        Ok(ModelSpec::Preset(PresetSpec {
            preset,
            m,
            n_samples,
            epsilon: self.epsilon,
            seed: self.seed,
        }))
    }

    pub fn build(&self) -> Result<LatentClassModel> {
        build_model(&self.to_spec()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSection {
    pub n_labels: usize,
    pub assignment: Vec<usize>,
}

impl LabelSection {
    pub fn build(&self) -> Result<LabelMap> {
        LabelMap::new(self.n_labels, self.assignment.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSection {
    #[serde(default = "default_encoder_kind")]
    pub kind: String,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    /// Transform name; "none" or absent disables the output transform.
    #[serde(default)]
    pub transform: Option<String>,
    /// Hidden layer widths (MLP only).
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_init")]
    pub init: EncoderInit,
}

fn default_encoder_kind() -> String {
    "tabular".into()
}

fn default_init() -> EncoderInit {
    EncoderInit::Auto
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: default_encoder_kind(),
            feature_dim: None,
            transform: None,
            hidden: Vec::new(),
            init: EncoderInit::Auto,
        }
    }
}

impl EncoderSection {
    pub fn parse_transform(&self) -> Result<Option<NonNegTransform>> {
        match self.transform.as_deref() {
            None | Some("none") => Ok(None),
            Some(name) => NonNegTransform::parse(name).map(Some),
        }
    }

    /// Build the encoder for a model with `n_samples` samples and `m`
    /// classes (the default feature dimension).
    pub fn build(&self, n_samples: usize, m: usize, seed: u64) -> Result<AnyEncoder> {
        let k = self.feature_dim.unwrap_or(m);
        let transform = self.parse_transform()?;
        match self.kind.as_str() {
            "tabular" => Ok(AnyEncoder::Tabular(TabularEncoder::new(
                n_samples, k, transform, self.init, seed,
            ))),
            "mlp" => {
                let hidden = if self.hidden.is_empty() {
                    vec![2 * n_samples.max(k)]
                } else {
                    self.hidden.clone()
                };
                Ok(AnyEncoder::Mlp(MlpEncoder::with_one_hot_input(
                    n_samples, &hidden, k, transform, seed,
                )?))
            }
            other => Err(NclError::ConfigInvalid(format!(
                "unknown encoder kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveSection {
    #[serde(default = "default_objective_kind")]
    pub kind: String,
    /// l1 regularization weight; 0.01 is the reference tradeoff value.
    #[serde(default)]
    pub l1_lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub cosine: bool,
    /// Cross-entropy only: apply the transform to features and class
    /// embeddings (the NCE variant).
    #[serde(default)]
    pub nonneg: bool,
}

fn default_objective_kind() -> String {
    "spectral".into()
}

fn default_temperature() -> f64 {
    0.5
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            kind: default_objective_kind(),
            l1_lambda: 0.0,
            temperature: default_temperature(),
            cosine: false,
            nonneg: false,
        }
    }
}

impl ObjectiveSection {
    pub fn build(
        &self,
        model: &LatentClassModel,
        labels: Option<&LabelMap>,
        transform: Option<NonNegTransform>,
    ) -> Result<ObjectiveSpec> {
        match self.kind.as_str() {
            "spectral" => Ok(ObjectiveSpec::Spectral {
                l1_lambda: self.l1_lambda,
            }),
            "infonce" => Ok(ObjectiveSpec::InfoNce {
                temperature: self.temperature,
                cosine: self.cosine,
                l1_lambda: self.l1_lambda,
            }),
            "cross_entropy" => {
                let map = labels
                    .cloned()
                    .unwrap_or_else(|| LabelMap::identity(model.n_classes()));
                let hard = map.hard_labels(model)?;
                Ok(ObjectiveSpec::CrossEntropy {
                    labels: hard,
                    n_labels: map.n_labels(),
                    nonneg: if self.nonneg {
                        Some(transform.unwrap_or(NonNegTransform::Relu))
                    } else {
                        None
                    },
                })
            }
            other => Err(NclError::ConfigInvalid(format!(
                "unknown objective `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub negatives: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_backtracking")]
    pub backtracking: bool,
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Gd
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_schedule() -> Schedule {
    Schedule::Constant
}
fn default_steps() -> usize {
    2000
}
fn default_tolerance() -> f64 {
    1e-13
}
fn default_window() -> usize {
    50
}
fn default_backtracking() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            learning_rate: default_learning_rate(),
            schedule: default_schedule(),
            steps: default_steps(),
            batch_size: 0,
            negatives: 0,
            tolerance: default_tolerance(),
            convergence_window: default_window(),
            backtracking: default_backtracking(),
            snapshot_every: 0,
        }
    }
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            schedule: self.schedule,
            steps: self.steps,
            batch_size: self.batch_size,
            negatives: self.negatives,
            tolerance: self.tolerance,
            convergence_window: self.convergence_window,
            backtracking: self.backtracking,
            seed,
            snapshot_every: self.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSection {
    #[serde(default = "default_metric_names")]
    pub names: Vec<String>,
    /// Zero-element threshold for sparsity and activation counts.
    #[serde(default = "default_threshold")]
    pub sparsity_threshold: f64,
    #[serde(default = "default_threshold")]
    pub activation_threshold: f64,
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    #[serde(default = "default_sepin_k")]
    pub sepin_k: usize,
    #[serde(default = "default_sepin_batch")]
    pub sepin_batch: usize,
    #[serde(default = "default_sepin_batch")]
    pub sepin_negatives: usize,
    #[serde(default = "default_sepin_replicates")]
    pub sepin_replicates: usize,
    #[serde(default)]
    pub sepin_normalize_rows: bool,
    #[serde(default = "default_probe_lr")]
    pub probe_learning_rate: f64,
    #[serde(default = "default_probe_steps")]
    pub probe_max_steps: usize,
}

fn default_metric_names() -> Vec<String> {
    ["sparsity", "correlation", "class_consistency", "expected_activation"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn default_threshold() -> f64 {
    1e-5
}
fn default_retrieval_k() -> usize {
    10
}
fn default_sepin_k() -> usize {
    1
}
fn default_sepin_batch() -> usize {
    128
}
fn default_sepin_replicates() -> usize {
    32
}
fn default_probe_lr() -> f64 {
    1.0
}
fn default_probe_steps() -> usize {
    3000
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            names: default_metric_names(),
            sparsity_threshold: default_threshold(),
            activation_threshold: default_threshold(),
            retrieval_k: default_retrieval_k(),
            sepin_k: default_sepin_k(),
            sepin_batch: default_sepin_batch(),
            sepin_negatives: default_sepin_batch(),
            sepin_replicates: default_sepin_replicates(),
            sepin_normalize_rows: false,
            probe_learning_rate: default_probe_lr(),
            probe_max_steps: default_probe_steps(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NclError::ConfigInvalid(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| NclError::ConfigInvalid(format!("config serialize: {e}")))
    }

    pub fn label_map(&self, model: &LatentClassModel) -> Result<LabelMap> {
        match &self.labels {
            Some(section) => {
                let map = section.build()?;
                if map.n_classes() != model.n_classes() {
                    return Err(NclError::LabelMapMismatch(format!(
                        "{} classes in the label map, {} in the model",
                        map.n_classes(),
                        model.n_classes()
                    )));
                }
                Ok(map)
            }
            None => Ok(LabelMap::identity(model.n_classes())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 42
output_dir = "out"

[model]
preset = "one_hot"
m = 5
n_samples = 50

[encoder]
kind = "tabular"
feature_dim = 5
transform = "relu"

[objective]
kind = "spectral"

[train]
learning_rate = 0.5
steps = 100

[metrics]
names = ["sparsity", "correlation"]
"#;

    #[test]
    fn sample_config_parses_and_builds() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 42);
        let model = cfg.model.build().unwrap();
        assert_eq!(model.n_samples(), 50);
        let enc = cfg.encoder.build(50, 5, cfg.seed).unwrap();
        assert_eq!(enc.as_dyn().feature_dim(), 5);
        let transform = cfg.encoder.parse_transform().unwrap();
        assert_eq!(transform, Some(NonNegTransform::Relu));
        let objective = cfg
            .objective
            .build(&model, None, transform)
            .unwrap();
        assert!(matches!(objective, ObjectiveSpec::Spectral { .. }));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(again.seed, cfg.seed);
        assert_eq!(again.train.steps, cfg.train.steps);
        assert_eq!(again.metrics.names, cfg.metrics.names);
    }

    #[test]
    fn unknown_transform_is_a_load_error() {
        let bad = SAMPLE.replace("\"relu\"", "\"tanh\"");
        let cfg = ExperimentConfig::from_toml(&bad).unwrap();
        assert!(cfg.encoder.parse_transform().is_err());
    }

    #[test]
    fn explicit_model_arrays_take_precedence() {
        let text = r#"
seed = 1

[model]
class_prior = [0.5, 0.5]
conditional = [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let model = cfg.model.build().unwrap();
        assert_eq!(model.n_classes(), 2);
        assert_eq!(model.n_samples(), 4);
    }
}
