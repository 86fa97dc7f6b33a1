//! Campaign execution: golden model per design point, then one injected
//! evaluation per (ber, target, mitigation, run).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{CampaignSpec, ExperimentKind};
use crate::datagen::{gen_batch, gen_labeled, split_indices, splitmix64, SyntheticBatch};
use crate::inject::{apply_error_map, build_error_map, InjectionConfig, TargetSelector};
use crate::metrics::{auc_roc, rmse_with_validity, Classification};
use crate::mitigate::{AbftStatus, ClipMode, MitigationKind, MitigationPolicy};
use crate::model::{train_ctr, AbftGuard, DummyModelConfig, ForwardOptions, ModelGraph, TrainConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbftSummary {
    pub detected: bool,
    pub retries_used: u32,
    pub unrecoverable: bool,
    pub checks_failed: usize,
}

/// One evaluated run. `abft` and `error` appear only in jsonl output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentKind,
    pub mlp_depth: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub dense_dim: usize,
    pub sparse_dim: usize,
    pub sparsity: f64,
    pub target: String,
    pub mitigation: MitigationKind,
    pub clip_mode: Option<ClipMode>,
    pub clip_t: Option<f32>,
    pub ber: f64,
    pub run_seed: u64,
    pub metric: String,
    #[serde(with = "super::output::float_repr")]
    pub value: f64,
    pub n_inf: usize,
    pub n_nan: usize,
    pub classification: Classification,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abft: Option<AbftSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl RunRecord {
    pub fn config(&self) -> DummyModelConfig {
        DummyModelConfig {
            mlp_depth: self.mlp_depth,
            mlp_hidden: self.mlp_hidden,
            embed_dim: self.embed_dim,
            dense_dim: self.dense_dim,
            sparse_dim: self.sparse_dim,
        }
    }
}

/// Clean-model reference score for one design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub config: DummyModelConfig,
    pub sparsity: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignOutcome {
    pub records: Vec<RunRecord>,
    pub baselines: Vec<Baseline>,
}

const MODEL_STREAM: u64 = u64::MAX;
const DATA_STREAM: u64 = u64::MAX - 1;
const TRAIN_STREAM: u64 = u64::MAX - 2;

/// Per-run seed; stable across re-executions and shared by every
/// (ber, target, mitigation) cell of the run so comparisons are paired.
pub fn derive_seed(base: u64, point: u64, run: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ point) ^ run)
}

struct Evaluation {
    value: f64,
    n_inf: usize,
    n_nan: usize,
    classification: Classification,
    abft: Option<AbftSummary>,
}

/// Everything a run needs that is fixed per design point.
struct Point<'a> {
    spec: &'a CampaignSpec,
    golden: ModelGraph,
    checksum: u32,
    guard: AbftGuard,
    inputs: SyntheticBatch,
    /// Clean outputs per mitigation (dummy_rmse only).
    references: Vec<Tensor>,
}

impl Point<'_> {
    fn evaluate(&self, model: &ModelGraph, policy: &MitigationPolicy) -> Result<Evaluation, String> {
        let opts = ForwardOptions::for_policy(policy, Some(&self.guard));
        let out = model
            .forward_batch(&self.inputs.dense, &self.inputs.sparse, opts)
            .map_err(|e| e.to_string())?;
        let abft = (policy.kind == MitigationKind::Abft).then(|| summarize(out.abft, out.abft_checks_failed));
        let threshold = self.spec.invalid_threshold;
        match self.spec.experiment {
            ExperimentKind::DummyRmse => {
                let m = self.spec.mitigations.iter().position(|p| p == policy).expect("policy from spec");
                let r = rmse_with_validity(&self.references[m], &out.output, threshold).map_err(|e| e.to_string())?;
                Ok(Evaluation {
                    value: r.rmse,
                    n_inf: r.n_inf,
                    n_nan: r.n_nan,
                    classification: r.classification,
                    abft,
                })
            }
            ExperimentKind::CtrAuc => {
                let (n_inf, n_nan) = count_non_finite(out.output.data());
                let scores: Vec<f64> = out.output.data().iter().map(|&v| v as f64).collect();
                let labels = labels_of(&self.inputs);
                let auc = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
                Ok(Evaluation {
                    value: auc,
                    n_inf,
                    n_nan,
                    classification: Classification::from_counts(n_inf, n_nan, threshold),
                    abft,
                })
            }
        }
    }
}

fn summarize(s: AbftStatus, checks_failed: usize) -> AbftSummary {
    AbftSummary {
        detected: s.detected,
        retries_used: s.retries_used,
        unrecoverable: s.unrecoverable,
        checks_failed,
    }
}

fn count_non_finite(v: &[f32]) -> (usize, usize) {
    (
        v.iter().filter(|x| x.is_infinite()).count(),
        v.iter().filter(|x| x.is_nan()).count(),
    )
}

fn labels_of(b: &SyntheticBatch) -> Vec<bool> {
    b.labels
        .as_ref()
        .map(|l| l.iter().map(|&y| y > 0.5).collect())
        .unwrap_or_default()
}

fn metric_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::DummyRmse => "rmse",
        ExperimentKind::CtrAuc => "auc",
    }
}

#[derive(Clone, Copy)]
struct Task {
    ber: usize,
    target: usize,
    mitigation: usize,
    run: usize,
}

fn tasks(spec: &CampaignSpec) -> Vec<Task> {
    let mut out = Vec::with_capacity(spec.bers.len() * spec.targets.len() * spec.mitigations.len() * spec.runs);
    for ber in 0..spec.bers.len() {
        for target in 0..spec.targets.len() {
            for mitigation in 0..spec.mitigations.len() {
                for run in 0..spec.runs {
                    out.push(Task { ber, target, mitigation, run });
                }
            }
        }
    }
    out
}

fn prepare<'s>(
    spec: &'s CampaignSpec,
    cfg_idx: usize,
    cfg: &DummyModelConfig,
    sparsity: f64,
    point_idx: usize,
) -> Result<(Point<'s>, Baseline), String> {
    let model_seed = derive_seed(spec.seed, cfg_idx as u64, MODEL_STREAM);
    let data_seed = derive_seed(spec.seed, point_idx as u64, DATA_STREAM);
    let (golden, inputs, baseline) = match spec.experiment {
        ExperimentKind::DummyRmse => {
            let golden = ModelGraph::build_dummy(cfg, model_seed).map_err(|e| e.to_string())?;
            let inputs =
                gen_batch(spec.samples, cfg.dense_dim, cfg.sparse_dim, sparsity, data_seed).map_err(|e| e.to_string())?;
            (golden, inputs, 0.0)
        }
        ExperimentKind::CtrAuc => {
            let c = &spec.ctr;
            let data = gen_labeled(c.train_samples, cfg, sparsity, c.noise, data_seed).map_err(|e| e.to_string())?;
            let split = split_indices(data.len(), data_seed);
            let (train, val, test) = (data.subset(&split.train), data.subset(&split.val), data.subset(&split.test));
            let mut model = ModelGraph::build_ctr(cfg, c.use_fm, model_seed).map_err(|e| e.to_string())?;
            let tc = TrainConfig {
                learning_rate: c.learning_rate,
                epochs: c.epochs,
                batch_size: c.batch_size,
                patience: c.patience,
                seed: derive_seed(spec.seed, point_idx as u64, TRAIN_STREAM),
            };
            train_ctr(&mut model, &train, &val, &tc).map_err(|e| e.to_string())?;
            let out = model
                .forward_batch(&test.dense, &test.sparse, ForwardOptions::default())
                .map_err(|e| e.to_string())?;
            let scores: Vec<f64> = out.output.data().iter().map(|&v| v as f64).collect();
            let auc = auc_roc(&scores, &labels_of(&test)).map_err(|e| e.to_string())?;
            (model, test, auc)
        }
    };
    let guard = AbftGuard::capture(&golden);
    let mut point = Point {
        spec,
        checksum: golden.checksum(),
        golden,
        guard,
        inputs,
        references: Vec::new(),
    };
    if spec.experiment == ExperimentKind::DummyRmse {
        for policy in &spec.mitigations {
            let opts = ForwardOptions::for_policy(policy, Some(&point.guard));
            let out = point
                .golden
                .forward_batch(&point.inputs.dense, &point.inputs.sparse, opts)
                .map_err(|e| e.to_string())?;
            point.references.push(out.output);
        }
    }
    let baseline = Baseline {
        config: *cfg,
        sparsity,
        metric: metric_name(spec.experiment).into(),
        value: baseline,
    };
    Ok((point, baseline))
}

fn blank_record(spec: &CampaignSpec, cfg: &DummyModelConfig, sparsity: f64, task: Task, run_seed: u64) -> RunRecord {
    let policy = &spec.mitigations[task.mitigation];
    let clip = policy.kind == MitigationKind::Clip;
    RunRecord {
        experiment: spec.experiment,
        mlp_depth: cfg.mlp_depth,
        mlp_hidden: cfg.mlp_hidden,
        embed_dim: cfg.embed_dim,
        dense_dim: cfg.dense_dim,
        sparse_dim: cfg.sparse_dim,
        sparsity,
        target: spec.targets[task.target].label(),
        mitigation: policy.kind,
        clip_mode: clip.then_some(policy.clip_mode),
        clip_t: clip.then_some(policy.clip_threshold),
        ber: spec.bers[task.ber],
        run_seed,
        metric: metric_name(spec.experiment).into(),
        value: f64::NAN,
        n_inf: 0,
        n_nan: 0,
        classification: Classification::Numeric,
        abft: None,
        error: None,
        wall_time_s: None,
    }
}

fn error_record(mut r: RunRecord, msg: String) -> RunRecord {
    r.metric = "error".into();
    r.error = Some(msg);
    r
}

fn inject_and_evaluate(
    point: &Point<'_>,
    replica: &mut ModelGraph,
    target: &TargetSelector,
    policy: &MitigationPolicy,
    ber: f64,
    run_seed: u64,
) -> Result<Evaluation, String> {
    let icfg = InjectionConfig::new(ber, target.clone(), run_seed).with_mask(policy.protected_mask());
    let map = build_error_map(replica, &icfg).map_err(|e| e.to_string())?;
    apply_error_map(replica, &map).map_err(|e| e.to_string())?;
    let eval = point.evaluate(replica, policy);
    apply_error_map(replica, &map).map_err(|e| e.to_string())?;
    if replica.checksum() != point.checksum {
        *replica = point.golden.clone();
        return Err("model not restored to golden after run".into());
    }
    eval
}

fn run_point(
    spec: &CampaignSpec,
    point: &Point<'_>,
    cfg: &DummyModelConfig,
    sparsity: f64,
    cfg_idx: usize,
) -> Vec<RunRecord> {
    tasks(spec)
        .par_iter()
        .map_init(
            || point.golden.clone(),
            |replica, &task| {
                let started = Instant::now();
                let run_seed = derive_seed(spec.seed, cfg_idx as u64, task.run as u64);
                let mut rec = blank_record(spec, cfg, sparsity, task, run_seed);
                let policy = &spec.mitigations[task.mitigation];
                match inject_and_evaluate(point, replica, &spec.targets[task.target], policy, rec.ber, run_seed) {
                    Ok(e) => {
                        rec.value = e.value;
                        rec.n_inf = e.n_inf;
                        rec.n_nan = e.n_nan;
                        rec.classification = e.classification;
                        rec.abft = e.abft;
                    }
                    Err(msg) => rec = error_record(rec, msg),
                }
                if spec.wall_time {
                    rec.wall_time_s = Some(started.elapsed().as_secs_f64());
                }
                rec
            },
        )
        .collect()
}

/// Runs every design point in order; records come out in canonical
/// (point, ber, target, mitigation, run) order regardless of worker count.
pub fn run_campaign_detailed(spec: &CampaignSpec) -> Result<CampaignOutcome, CampaignError> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| CampaignError::Pool(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.record_count());
    let mut baselines = Vec::new();
    for (cfg_idx, cfg) in spec.grid.iter().enumerate() {
        for (s_idx, &sparsity) in spec.sparsities.iter().enumerate() {
            let point_idx = cfg_idx * spec.sparsities.len() + s_idx;
            match prepare(spec, cfg_idx, cfg, sparsity, point_idx) {
                Ok((point, baseline)) => {
                    records.extend(pool.install(|| run_point(spec, &point, cfg, sparsity, cfg_idx)));
                    baselines.push(baseline);
                }
                Err(msg) => {
                    for task in tasks(spec) {
                        let seed = derive_seed(spec.seed, cfg_idx as u64, task.run as u64);
                        records.push(error_record(blank_record(spec, cfg, sparsity, task, seed), msg.clone()));
                    }
                }
            }
        }
    }
    Ok(CampaignOutcome { records, baselines })
}

pub fn run_campaign(spec: &CampaignSpec) -> Result<Vec<RunRecord>, CampaignError> {
    Ok(run_campaign_detailed(spec)?.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mitigate::MitigationPolicy;

    fn small_spec(kind: ExperimentKind) -> CampaignSpec {
        let mut spec = CampaignSpec::new(kind);
        spec.grid = vec![DummyModelConfig {
            mlp_depth: 1,
            mlp_hidden: 16,
            embed_dim: 8,
            dense_dim: 12,
            sparse_dim: 300,
        }];
        spec.sparsities = vec![0.02];
        spec.samples = 32;
        spec.runs = 2;
        spec.ctr.train_samples = 600;
        spec.ctr.epochs = 2;
        spec
    }

    #[test]
    fn zero_ber_gives_zero_rmse_for_every_mitigation() {
        let mut spec = small_spec(ExperimentKind::DummyRmse);
        spec.bers = vec![0.0];
        spec.mitigations = [MitigationKind::None, MitigationKind::Clip, MitigationKind::Sbp, MitigationKind::Abft]
            .into_iter()
            .map(MitigationPolicy::with_kind)
            .collect();
        let recs = run_campaign(&spec).unwrap();
        assert_eq!(recs.len(), spec.record_count());
        for r in &recs {
            assert_eq!(r.value, 0.0, "{r:?}");
            assert_eq!(r.classification, Classification::Numeric);
            assert!(r.error.is_none());
        }
        let abft = recs.iter().find(|r| r.mitigation == MitigationKind::Abft).unwrap();
        assert_eq!(abft.abft.map(|a| a.detected), Some(false));
    }

    #[test]
    fn zero_ber_auc_equals_baseline() {
        let mut spec = small_spec(ExperimentKind::CtrAuc);
        spec.bers = vec![0.0];
        spec.targets = vec![TargetSelector::EntireModel];
        let out = run_campaign_detailed(&spec).unwrap();
        let base = out.baselines[0].value;
        assert!(out.records.iter().all(|r| r.value == base));
    }

    #[test]
    fn worker_count_does_not_change_records() {
        let mut spec = small_spec(ExperimentKind::DummyRmse);
        spec.bers = vec![1e-4, 1e-2];
        spec.runs = 3;
        spec.workers = 1;
        let a = run_campaign(&spec).unwrap();
        spec.workers = 3;
        let b = run_campaign(&spec).unwrap();
        let eq = a.iter().zip(&b).all(|(x, y)| {
            x.value.to_bits() == y.value.to_bits() && x.run_seed == y.run_seed && x.n_nan == y.n_nan
        });
        assert!(eq && a.len() == b.len());
    }

    #[test]
    fn unresolvable_target_yields_error_rows() {
        let mut spec = small_spec(ExperimentKind::DummyRmse);
        spec.bers = vec![1e-3];
        spec.targets = vec![TargetSelector::Named(vec!["missing".into()])];
        let recs = run_campaign(&spec).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.metric == "error" && r.error.is_some()));
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
    }
}
