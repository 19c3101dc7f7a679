//! Experiment manifests: what to train and which metrics to compute.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FieldError, Result};
use crate::local::surface::{DirectionNorm, DEFAULT_RESOLUTION, DEFAULT_WARMUP_BATCHES};
use crate::model::{layout_for, Activation, NetworkSpec, OutputHead, TrainConfig};
use crate::tda::Connectivity;

/// Bumped whenever pipeline output for an unchanged manifest would change.
pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Model metrics the records must carry.
    #[serde(default)]
    pub metrics: Vec<String>,
    pub task: TaskSpec,
    pub configs: Vec<ModelConfig>,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// Two-moons classification.
    Classification {
        n: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default)]
        corruption: f64,
    },
    /// Periodic 1D convection; each config supplies its own `beta`.
    Pinn {
        n_u: usize,
        n_f: usize,
        n_b: usize,
        #[serde(default)]
        data_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub batchnorm: bool,
    /// Defaults to the task's natural head.
    #[serde(default)]
    pub output_head: Option<OutputHead>,
    /// Convection coefficient, PINN tasks only.
    #[serde(default)]
    pub beta: Option<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub hessian_k: usize,
    pub hessian_seed: u64,
    pub resolution: usize,
    pub range: f64,
    pub warmup_batches: usize,
    pub direction_seed: u64,
    pub direction_norm: DirectionNorm,
    pub mc_grid_points: usize,
    pub connector_steps: usize,
    pub connector_lr: f64,
    pub connector_seed: u64,
    pub probe_count: usize,
    pub probe_seed: u64,
    pub connectivity: Connectivity,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            hessian_k: 10,
            hessian_seed: 0,
            resolution: DEFAULT_RESOLUTION,
            range: 1.0,
            warmup_batches: DEFAULT_WARMUP_BATCHES,
            direction_seed: 0,
            direction_norm: DirectionNorm::Filter,
            mc_grid_points: crate::global::connector::DEFAULT_GRID_POINTS,
            connector_steps: 200,
            connector_lr: 0.01,
            connector_seed: 0,
            probe_count: crate::global::cka::DEFAULT_PROBE_COUNT,
            probe_seed: 0,
            connectivity: Connectivity::Four,
        }
    }
}

impl TaskSpec {
    pub fn default_head(&self) -> OutputHead {
        match self {
            TaskSpec::Classification { .. } => OutputHead::Classification,
            TaskSpec::Pinn { .. } => OutputHead::Regression,
        }
    }

    pub fn known_metrics(&self) -> &'static [&'static str] {
        match self {
            TaskSpec::Classification { .. } => &["loss", "accuracy"],
            TaskSpec::Pinn { .. } => &["loss", "rel_l2_error"],
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, task: &TaskSpec) -> NetworkSpec {
        NetworkSpec {
            layer_widths: self.layer_widths.clone(),
            activation: self.activation,
            residual: self.residual,
            batchnorm: self.batchnorm,
            output_head: self.output_head.unwrap_or_else(|| task.default_head()),
        }
    }

    pub fn model_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", self.id)
    }
}

/// One model to train.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub model_id: String,
    pub config_index: usize,
    pub seed: u64,
}

impl Manifest {
    /// Every `(config, seed)` model in manifest order.
    pub fn models(&self) -> Vec<ModelPlan> {
        self.configs
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                c.seeds.iter().map(move |&seed| ModelPlan {
                    model_id: c.model_id(seed),
                    config_index: ci,
                    seed,
                })
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form plus [`PIPELINE_VERSION`].
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("manifest serializes");
        let mut h = Sha256::new();
        h.update(format!("lossatlas/{PIPELINE_VERSION}\n").as_bytes());
        h.update(canonical.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn experiment_id(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// All field-level problems, empty when the manifest is usable.
    pub fn check(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, msg: String| errs.push(FieldError::new(field, msg));
        if self.name.trim().is_empty() {
            push("name", "must not be empty".into());
        }
        let known = self.task.known_metrics();
        for (i, m) in self.metrics.iter().enumerate() {
            if !known.contains(&m.as_str()) {
                push(&format!("metrics[{i}]"), format!("unknown metric {m:?}, expected one of {known:?}"));
            }
        }
        match &self.task {
            TaskSpec::Classification { n, corruption, .. } => {
                if *n < 4 {
                    push("task.n", format!("must be >= 4, got {n}"));
                }
                if !(0.0..=1.0).contains(corruption) {
                    push("task.corruption", format!("must lie in [0, 1], got {corruption}"));
                }
            }
            TaskSpec::Pinn { n_u, n_f, n_b, .. } => {
                for (name, v) in [("task.n_u", n_u), ("task.n_f", n_f), ("task.n_b", n_b)] {
                    if *v == 0 {
                        push(name, "must be >= 1".into());
                    }
                }
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            push("train.epochs", "must be >= 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            push("train.learning_rate", format!("must be positive, got {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            push("train.momentum", format!("must lie in [0, 1), got {}", t.momentum));
        }

        if self.configs.is_empty() {
            push("configs", "at least one model configuration is required".into());
        }
        let mut ids = BTreeSet::new();
        let mut min_params = usize::MAX;
        for (i, c) in self.configs.iter().enumerate() {
            let at = |f: &str| format!("configs[{i}].{f}");
            if c.id.is_empty() || !c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.') {
                push(&at("id"), format!("{:?} must be non-empty and use only letters, digits, '_' or '.'", c.id));
            }
            if !ids.insert(c.id.clone()) {
                push(&at("id"), format!("duplicate config id {:?}", c.id));
            }
            if c.seeds.is_empty() {
                push(&at("seeds"), "at least one seed is required".into());
            }
            let distinct: BTreeSet<_> = c.seeds.iter().collect();
            if distinct.len() != c.seeds.len() {
                push(&at("seeds"), "seeds must be distinct".into());
            }
            let spec = c.spec(&self.task);
            match spec.validate() {
                Err(e) => push(&at("layer_widths"), config_message(e)),
                Ok(()) => {
                    min_params = min_params.min(layout_for(&spec).iter().map(|s| s.len()).sum());
                    let (input, output) = (spec.input_dim(), spec.output_dim());
                    match &self.task {
                        TaskSpec::Classification { .. } => {
                            if input != 2 || output != 2 {
                                push(&at("layer_widths"), format!(
                                    "two-moons needs 2 inputs and 2 outputs, got {input} and {output}"
                                ));
                            }
                            if spec.output_head != OutputHead::Classification {
                                push(&at("output_head"), "classification tasks need a classification head".into());
                            }
                            if c.beta.is_some() {
                                push(&at("beta"), "only PINN tasks take beta".into());
                            }
                        }
                        TaskSpec::Pinn { .. } => {
                            if input != 2 || output != 1 {
                                push(&at("layer_widths"), format!(
                                    "PINN networks map (x, t) to u: need 2 inputs and 1 output, got {input} and {output}"
                                ));
                            }
                            if spec.output_head != OutputHead::Regression {
                                push(&at("output_head"), "PINN tasks need a regression head".into());
                            }
                            if spec.batchnorm {
                                push(&at("batchnorm"), "PINN residuals need input derivatives, unsupported through BatchNorm".into());
                            }
                            match c.beta {
                                None => push(&at("beta"), "PINN configs need beta".into()),
                                Some(b) if !(b > 0.0 && b.is_finite()) => {
                                    push(&at("beta"), format!("must be positive, got {b}"))
                                }
                                _ => {}
                            }
                        }
                    }
                }
            }
        }

        let a = &self.analysis;
        if a.hessian_k == 0 {
            push("analysis.hessian_k", "must be >= 1".into());
        } else if min_params != usize::MAX && a.hessian_k > min_params {
            push("analysis.hessian_k", format!("exceeds the smallest parameter count {min_params}"));
        }
        if a.resolution < 5 || a.resolution.is_multiple_of(2) {
            push("analysis.resolution", format!("must be odd and >= 5, got {}", a.resolution));
        }
        if !(a.range > 0.0 && a.range.is_finite()) {
            push("analysis.range", format!("must be positive, got {}", a.range));
        }
        if a.mc_grid_points < 3 {
            push("analysis.mc_grid_points", format!("must be >= 3, got {}", a.mc_grid_points));
        }
        if !(a.connector_lr > 0.0 && a.connector_lr.is_finite()) {
            push("analysis.connector_lr", format!("must be positive, got {}", a.connector_lr));
        }
        if a.probe_count < 2 {
            push("analysis.probe_count", format!("must be >= 2, got {}", a.probe_count));
        }
        errs
    }
}

fn config_message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Parse a manifest from TOML, or JSON when the text starts with `{`, and
/// validate it. Every problem is reported as a [`FieldError`].
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: serde_json::Value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text)
            .map_err(|e| Error::Manifest(vec![FieldError::new("<document>", e.to_string())]))?
    } else {
        toml::from_str(text)
            .map_err(|e| Error::Manifest(vec![FieldError::new("<document>", e.message().to_string())]))?
    };
    let manifest: Manifest = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<document>".to_string() } else { path };
        Error::Manifest(vec![FieldError::new(field, e.into_inner().to_string())])
    })?;
    let errs = manifest.check();
    if errs.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Manifest(errs))
    }
}

pub fn manifest_to_toml(manifest: &Manifest) -> String {
    toml::to_string(manifest).expect("manifest serializes to TOML")
}
