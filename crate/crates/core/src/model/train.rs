//! Minibatch SGD on binary cross-entropy with hand-derived gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ForwardOptions, ForwardTrace, Head, ModelError, ModelGraph};
use crate::datagen::SyntheticBatch;
use crate::metrics::{auc_roc, MetricsError};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricsError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 64,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_val_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_auc_history: Vec<f64>,
}

/// Mean-loss gradients. The embedding table is kept sparse by row.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub dense: Vec<Option<Tensor>>,
    pub embedding_rows: BTreeMap<usize, Vec<f32>>,
}

impl Gradients {
    /// Gradient for one parameter as a full tensor of its shape.
    pub fn materialize(&self, model: &ModelGraph, param: usize) -> Tensor {
        if let Some(g) = &self.dense[param] {
            return g.clone();
        }
        let t = model.tensor(param);
        let mut out = Tensor::zeros(t.shape());
        let d = t.cols();
        for (&r, g) in &self.embedding_rows {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(g);
        }
        out
    }
}

fn bce_with_logit(z: f32, y: f32) -> f64 {
    let (z, y) = (z as f64, y as f64);
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// `Aᵀ × G` for `A: [n × p]`, `G: [n × q]`.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (n, p, q) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0f32; p * q];
    for s in 0..n {
        let gr = g.row(s);
        for (i, &av) in a.row(s).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[i * q..(i + 1) * q].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    Tensor::matrix(p, q, out).expect("shape matches data")
}

/// `G × Wᵀ` for `G: [n × q]`, `W: [p × q]`.
fn matmul_nt(g: &Tensor, w: &Tensor) -> Tensor {
    let (n, p) = (g.rows(), w.rows());
    let mut out = vec![0.0f32; n * p];
    for s in 0..n {
        let gr = g.row(s);
        for i in 0..p {
            out[s * p + i] = w.row(i).iter().zip(gr).fold(0.0f32, |acc, (a, b)| acc + a * b);
        }
    }
    Tensor::matrix(n, p, out).expect("shape matches data")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0f32; g.cols()];
    for s in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(s)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn mask_relu(g: &mut Tensor, pre: &Tensor) {
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Mean BCE loss over the batch and its gradients w.r.t. every parameter.
pub fn batch_gradients(
    model: &ModelGraph,
    dense: &Tensor,
    sparse: &[Vec<usize>],
    labels: &[f32],
) -> Result<(f64, Gradients), TrainError> {
    let Head::Sigmoid { fm } = model.head else {
        return Err(TrainError::Config("training needs a sigmoid head".into()));
    };
    if labels.len() != dense.rows() {
        return Err(TrainError::Config(format!(
            "{} labels for {} samples",
            labels.len(),
            dense.rows()
        )));
    }
    let mut trace = ForwardTrace::default();
    model.forward_impl(dense, sparse, ForwardOptions::default(), &mut trace, true)?;
    let topo = model.topology()?;
    let n = labels.len();
    let inv_n = 1.0 / n as f32;

    let mut loss = 0.0f64;
    let mut g_logit = Vec::with_capacity(n);
    for (&z, &y) in trace.logits.iter().zip(labels) {
        loss += bce_with_logit(z, y);
        g_logit.push((sigmoid(z) - y) * inv_n);
    }
    loss /= n as f64;

    let mut grads = Gradients {
        dense: vec![None; model.params.len()],
        embedding_rows: BTreeMap::new(),
    };

    let mut g = Tensor::matrix(n, 1, g_logit.clone()).map_err(ModelError::from)?;
    for li in (0..topo.top.len()).rev() {
        let l = topo.top[li];
        let input = if li == 0 { &trace.concat } else { &trace.top_act[li - 1] };
        grads.dense[l.weight] = Some(matmul_tn(input, &g));
        grads.dense[l.bias] = Some(column_sums(&g));
        let mut g_in = matmul_nt(&g, model.tensor(l.weight));
        if li > 0 {
            mask_relu(&mut g_in, &trace.top_pre[li - 1]);
        }
        g = g_in;
    }

    let table = model.tensor(topo.embedding);
    let e = table.cols();
    let bottom_out = g.cols() - e;
    for (i, idx) in sparse.iter().enumerate() {
        let g_pooled = &g.row(i)[bottom_out..];
        let total: Vec<f32> = if fm {
            let mut s = vec![0.0f32; e];
            for &f in idx {
                for (a, v) in s.iter_mut().zip(table.row(f)) {
                    *a += v;
                }
            }
            s
        } else {
            Vec::new()
        };
        for &f in idx {
            let row = grads.embedding_rows.entry(f).or_insert_with(|| vec![0.0; e]);
            for (k, r) in row.iter_mut().enumerate() {
                *r += g_pooled[k];
                if fm {
                    *r += g_logit[i] * (total[k] - table.row(f)[k]);
                }
            }
        }
    }

    let mut g_x = Tensor::matrix(
        n,
        bottom_out,
        (0..n).flat_map(|i| g.row(i)[..bottom_out].to_vec()).collect(),
    )
    .map_err(ModelError::from)?;
    let last = topo.bottom.len() - 1;
    mask_relu(&mut g_x, &trace.bottom_pre[last]);
    for li in (0..topo.bottom.len()).rev() {
        let l = topo.bottom[li];
        let input = if li == 0 { dense } else { &trace.bottom_act[li - 1] };
        grads.dense[l.weight] = Some(matmul_tn(input, &g_x));
        grads.dense[l.bias] = Some(column_sums(&g_x));
        if li > 0 {
            let mut g_in = matmul_nt(&g_x, model.tensor(l.weight));
            mask_relu(&mut g_in, &trace.bottom_pre[li - 1]);
            g_x = g_in;
        }
    }
    Ok((loss, grads))
}

fn sgd_step(model: &mut ModelGraph, grads: &Gradients, lr: f32) {
    let emb = model.topology.as_ref().map(|t| t.embedding);
    for (idx, g) in grads.dense.iter().enumerate() {
        if let Some(g) = g {
            for (w, d) in model.params[idx].tensor.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }
    if let Some(emb) = emb {
        let t = &mut model.params[emb].tensor;
        let d = t.cols();
        for (&r, g) in &grads.embedding_rows {
            for (w, gv) in t.data_mut()[r * d..(r + 1) * d].iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
    }
}

/// AUC-ROC of the model's outputs on a labelled batch.
pub fn evaluate_auc(model: &ModelGraph, data: &SyntheticBatch) -> Result<f64, TrainError> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| TrainError::Config("evaluation data is unlabelled".into()))?;
    let out = model.forward_batch(&data.dense, &data.sparse, ForwardOptions::default())?;
    let scores: Vec<f64> = out.output.data().iter().map(|&v| v as f64).collect();
    let labels: Vec<bool> = labels.iter().map(|&y| y > 0.5).collect();
    Ok(auc_roc(&scores, &labels)?)
}

/// Trains in place, keeping the parameters from the epoch with the best
/// validation AUC.
pub fn train_ctr(
    model: &mut ModelGraph,
    train: &SyntheticBatch,
    val: &SyntheticBatch,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("epochs and batch_size must be >= 1".into()));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(TrainError::Config(format!("learning_rate {} out of range", cfg.learning_rate)));
    }
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| TrainError::Config("training data is unlabelled".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = model.clone();
    let mut best_auc = evaluate_auc(model, val)?;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sub = train.subset(chunk);
            let y: Vec<f32> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_gradients(model, &sub.dense, &sub.sparse, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            if cfg.learning_rate > 0.0 {
                sgd_step(model, &grads, cfg.learning_rate);
            }
        }
        let auc = evaluate_auc(model, val)?;
        history.push(auc);
        if auc > best_auc {
            best_auc = auc;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(TrainReport {
        best_val_auc: best_auc,
        best_epoch,
        epochs_run,
        val_auc_history: history,
    })
}
