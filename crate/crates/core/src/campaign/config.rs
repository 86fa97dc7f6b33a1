//! Campaign specification and its TOML-subset config file.
//!
//! Every key is optional except `experiment`. Scalars and lists are both
//! accepted for the grid axes (`mlp_depth`, `mlp_hidden`, `embed_dim`,
//! `dense_dim`, `sparse_dim`, `sparsity`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inject::{FloatField, TargetSelector};
use crate::mitigate::{ClipMode, MitigationKind, MitigationPolicy};
use crate::model::{DummyModelConfig, GRID_WIDTHS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{}: {reason}", location(.key, .line))]
    Invalid {
        key: String,
        line: Option<usize>,
        reason: String,
    },
}

fn location(key: &str, line: &Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}, key `{key}`"),
        None => format!("key `{key}`"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DummyRmse,
    CtrAuc,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::DummyRmse => "dummy_rmse",
            ExperimentKind::CtrAuc => "ctr_auc",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dummy_rmse" => Ok(ExperimentKind::DummyRmse),
            "ctr_auc" => Ok(ExperimentKind::CtrAuc),
            other => Err(format!("unknown experiment `{other}` (expected dummy_rmse or ctr_auc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" => Ok(OutputFormat::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

/// Settings used only by `ctr_auc` campaigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrSettings {
    pub train_samples: usize,
    pub noise: f64,
    pub use_fm: bool,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

impl Default for CtrSettings {
    fn default() -> Self {
        Self {
            train_samples: 20_000,
            noise: 1.0,
            use_fm: false,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 64,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSpec {
    pub experiment: ExperimentKind,
    pub grid: Vec<DummyModelConfig>,
    /// Evaluation batch size for `dummy_rmse`.
    pub samples: usize,
    pub sparsities: Vec<f64>,
    pub bers: Vec<f64>,
    pub targets: Vec<TargetSelector>,
    pub mitigations: Vec<MitigationPolicy>,
    pub runs: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
    pub invalid_threshold: usize,
    /// 0 uses every available core.
    pub workers: usize,
    pub wall_time: bool,
    pub ctr: CtrSettings,
}

pub fn default_bers() -> Vec<f64> {
    vec![1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2]
}

impl CampaignSpec {
    /// Documented defaults: 4x4 width grid at depth 1, decade BER sweep, 10 runs.
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            grid: DummyModelConfig::width_grid(1),
            samples: 128,
            sparsities: vec![0.001, 0.01],
            bers: default_bers(),
            targets: vec![TargetSelector::EntireModel, TargetSelector::Mlp, TargetSelector::Embedding],
            mitigations: vec![MitigationPolicy::default()],
            runs: 10,
            seed: 0,
            output: None,
            format: OutputFormat::Csv,
            invalid_threshold: crate::metrics::DEFAULT_INVALID_THRESHOLD,
            workers: 0,
            wall_time: false,
            ctr: CtrSettings::default(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.grid.len() * self.sparsities.len() * self.bers.len() * self.targets.len() * self.mitigations.len() * self.runs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| {
            Err(ConfigError::Invalid {
                key: key.into(),
                line: None,
                reason,
            })
        };
        if self.grid.is_empty() {
            return bad("mlp_hidden", "design grid is empty".into());
        }
        for cfg in &self.grid {
            if let Err(e) = cfg.validate() {
                return bad("mlp_depth", e.to_string());
            }
        }
        if self.bers.is_empty() {
            return bad("bers", "at least one ber is required".into());
        }
        if let Some(b) = self.bers.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return bad("bers", format!("ber {b} outside [0, 1]"));
        }
        if self.sparsities.is_empty() {
            return bad("sparsity", "at least one sparsity is required".into());
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return bad("sparsity", format!("sparsity {s} outside (0, 1)"));
        }
        if self.targets.is_empty() {
            return bad("targets", "at least one target is required".into());
        }
        if self.mitigations.is_empty() {
            return bad("mitigations", "at least one mitigation is required".into());
        }
        for m in &self.mitigations {
            if let Err(e) = m.validate() {
                return bad("mitigations", e);
            }
        }
        if self.runs == 0 {
            return bad("runs", "runs must be >= 1".into());
        }
        if self.samples == 0 {
            return bad("samples", "samples must be >= 1".into());
        }
        if self.invalid_threshold == 0 {
            return bad("invalid_threshold", "invalid_threshold must be >= 1".into());
        }
        let c = &self.ctr;
        if !(c.noise >= 0.0) {
            return bad("noise", format!("noise {} must be >= 0", c.noise));
        }
        if !(c.learning_rate >= 0.0 && c.learning_rate.is_finite()) {
            return bad("learning_rate", format!("learning_rate {} must be finite and >= 0", c.learning_rate));
        }
        if c.epochs == 0 || c.batch_size == 0 {
            return bad("epochs", "epochs and batch_size must be >= 1".into());
        }
        if self.experiment == ExperimentKind::CtrAuc && c.train_samples < 20 {
            return bad("train_samples", "train_samples must be >= 20".into());
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: String,
    mlp_depth: Option<OneOrMany<usize>>,
    mlp_hidden: Option<OneOrMany<usize>>,
    embed_dim: Option<OneOrMany<usize>>,
    dense_dim: Option<OneOrMany<usize>>,
    sparse_dim: Option<OneOrMany<usize>>,
    samples: Option<usize>,
    sparsity: Option<OneOrMany<f64>>,
    bers: Option<Vec<f64>>,
    targets: Option<Vec<String>>,
    mitigations: Option<Vec<String>>,
    clip_mode: Option<String>,
    clip_threshold: Option<f32>,
    clip_range: Option<f32>,
    abft_tolerance: Option<f32>,
    abft_max_retries: Option<u32>,
    sbp_fields: Option<Vec<String>>,
    runs: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    format: Option<String>,
    invalid_threshold: Option<usize>,
    workers: Option<usize>,
    wall_time: Option<bool>,
    train_samples: Option<usize>,
    noise: Option<f64>,
    use_fm: Option<bool>,
    learning_rate: Option<f32>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    patience: Option<usize>,
}

/// 1-based line of the first assignment to `key`.
fn line_of(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

pub fn parse_config_str(source: &str) -> Result<CampaignSpec, ConfigError> {
    let raw: RawConfig = toml::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let invalid = |key: &str, reason: String| ConfigError::Invalid {
        key: key.into(),
        line: line_of(source, key),
        reason,
    };
    let experiment: ExperimentKind = raw.experiment.parse().map_err(|e| invalid("experiment", e))?;
    let mut spec = CampaignSpec::new(experiment);

    let axis = |v: Option<OneOrMany<usize>>, default: Vec<usize>| v.map(OneOrMany::into_vec).unwrap_or(default);
    let defaults = DummyModelConfig::default();
    let depths = axis(raw.mlp_depth, vec![defaults.mlp_depth]);
    let hiddens = axis(raw.mlp_hidden, GRID_WIDTHS.to_vec());
    let embeds = axis(raw.embed_dim, GRID_WIDTHS.to_vec());
    let denses = axis(raw.dense_dim, vec![defaults.dense_dim]);
    let sparses = axis(raw.sparse_dim, vec![defaults.sparse_dim]);
    spec.grid.clear();
    for &mlp_depth in &depths {
        for &mlp_hidden in &hiddens {
            for &embed_dim in &embeds {
                for &dense_dim in &denses {
                    for &sparse_dim in &sparses {
                        spec.grid.push(DummyModelConfig {
                            mlp_depth,
                            mlp_hidden,
                            embed_dim,
                            dense_dim,
                            sparse_dim,
                        });
                    }
                }
            }
        }
    }
    for (key, vals) in [
        ("mlp_depth", &depths),
        ("mlp_hidden", &hiddens),
        ("embed_dim", &embeds),
        ("dense_dim", &denses),
        ("sparse_dim", &sparses),
    ] {
        if vals.is_empty() || vals.contains(&0) {
            return Err(invalid(key, "values must be non-empty and >= 1".into()));
        }
    }

    if let Some(v) = raw.samples {
        spec.samples = v;
    }
    if let Some(v) = raw.sparsity {
        spec.sparsities = v.into_vec();
    }
    if let Some(v) = raw.bers {
        spec.bers = v;
    }
    if let Some(v) = raw.targets {
        spec.targets = v
            .iter()
            .map(|t| t.parse::<TargetSelector>().map_err(|e| invalid("targets", e.to_string())))
            .collect::<Result<_, _>>()?;
    }

    let mut base = MitigationPolicy::default();
    if let Some(v) = raw.clip_mode {
        base.clip_mode = v.parse::<ClipMode>().map_err(|e| invalid("clip_mode", e))?;
    }
    if let Some(v) = raw.clip_threshold {
        base.clip_threshold = v;
    }
    if let Some(v) = raw.clip_range {
        base.clip_range = (v > 0.0).then_some(v);
    }
    if let Some(v) = raw.abft_tolerance {
        base.abft_tolerance = v;
    }
    if let Some(v) = raw.abft_max_retries {
        base.abft_max_retries = v;
    }
    if let Some(v) = raw.sbp_fields {
        base.sbp_fields = v
            .iter()
            .map(|f| f.parse::<FloatField>().map_err(|e| invalid("sbp_fields", e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    let kinds: Vec<MitigationKind> = match raw.mitigations {
        Some(v) => v
            .iter()
            .map(|m| m.parse::<MitigationKind>().map_err(|e| invalid("mitigations", e)))
            .collect::<Result<_, _>>()?,
        None => vec![MitigationKind::None],
    };
    spec.mitigations = kinds
        .into_iter()
        .map(|kind| MitigationPolicy { kind, ..base.clone() })
        .collect();

    if let Some(v) = raw.runs {
        spec.runs = v;
    }
    if let Some(v) = raw.seed {
        spec.seed = v;
    }
    spec.output = raw.output;
    if let Some(v) = raw.format {
        spec.format = v.parse().map_err(|e| invalid("format", e))?;
    }
    if let Some(v) = raw.invalid_threshold {
        spec.invalid_threshold = v;
    }
    if let Some(v) = raw.workers {
        spec.workers = v;
    }
    if let Some(v) = raw.wall_time {
        spec.wall_time = v;
    }
    let c = &mut spec.ctr;
    if let Some(v) = raw.train_samples {
        c.train_samples = v;
    }
    if let Some(v) = raw.noise {
        c.noise = v;
    }
    if let Some(v) = raw.use_fm {
        c.use_fm = v;
    }
    if let Some(v) = raw.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = raw.epochs {
        c.epochs = v;
    }
    if let Some(v) = raw.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = raw.patience {
        c.patience = v;
    }

    spec.validate().map_err(|e| match e {
        ConfigError::Invalid { key, reason, .. } => ConfigError::Invalid {
            line: line_of(source, &key),
            key,
            reason,
        },
        other => other,
    })?;
    Ok(spec)
}

pub fn parse_config(path: &Path) -> Result<CampaignSpec, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&source)
}
