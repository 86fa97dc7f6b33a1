//! DRS-style models: a dense-feature MLP ("bottom"), a pooled embedding
//! table for the sparse features, concatenation, and a predictor MLP ("top").
//!
//! Dense weights are stored as `[fan_in × fan_out]` so a layer is
//! `X × W + b`, which lets the same matrix feed [`crate::mitigate::abft_gemm`]
//! without transposition.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use train::{batch_gradients, evaluate_auc, train_ctr, Gradients, TrainConfig, TrainError, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mitigate::{abft_embedding_split, abft_gemm_split, AbftStatus, MitigationPolicy, Persistent};
use crate::tensor::{add_row_bias, embedding_bag_into, fm_interaction, gemm, sigmoid, Activation, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model has no DRS topology: {0}")]
    Topology(String),
}

/// Dimensions of a dummy DRS model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DummyModelConfig {
    pub mlp_depth: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub dense_dim: usize,
    pub sparse_dim: usize,
}

impl Default for DummyModelConfig {
    fn default() -> Self {
        Self {
            mlp_depth: 1,
            mlp_hidden: 64,
            embed_dim: 64,
            dense_dim: 128,
            sparse_dim: 8192,
        }
    }
}

pub const GRID_WIDTHS: [usize; 4] = [64, 128, 256, 512];

impl DummyModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("mlp_depth", self.mlp_depth),
            ("mlp_hidden", self.mlp_hidden),
            ("embed_dim", self.embed_dim),
            ("dense_dim", self.dense_dim),
            ("sparse_dim", self.sparse_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// The 16 hidden-size × embedding-size design points at the given depth.
    pub fn width_grid(mlp_depth: usize) -> Vec<DummyModelConfig> {
        let mut out = Vec::with_capacity(16);
        for &mlp_hidden in &GRID_WIDTHS {
            for &embed_dim in &GRID_WIDTHS {
                out.push(DummyModelConfig {
                    mlp_depth,
                    mlp_hidden,
                    embed_dim,
                    ..Default::default()
                });
            }
        }
        out
    }

    /// Closed-form parameter count of [`ModelGraph::build_dummy`].
    pub fn parameter_count(&self) -> usize {
        let (d, h, e, v) = (self.dense_dim, self.mlp_hidden, self.embed_dim, self.sparse_dim);
        let bottom = d * h + h + (self.mlp_depth - 1) * (h * h + h) + h * e + e;
        let top = 2 * e * h + h + h + 1;
        bottom + v * e + top
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mlp,
    Embedding,
}

impl Component {
    pub fn tag(self) -> u8 {
        match self {
            Component::Mlp => 0,
            Component::Embedding => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Component::Mlp),
            1 => Some(Component::Embedding),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor,
}

/// How the final logit is turned into the model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Head {
    /// Raw logit, as in the untrained dummy model.
    #[default]
    Raw,
    /// CTR probability, optionally with a factorization-machine term on the logit.
    Sigmoid { fm: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Topology {
    bottom: Vec<Linear>,
    embedding: usize,
    top: Vec<Linear>,
}

/// Human-readable layer descriptor, in forward order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Dense { weight: String, bias: String, inputs: usize, outputs: usize, relu: bool },
    EmbeddingBag { table: String, rows: usize, dim: usize },
    Concat { width: usize },
    FmInteraction,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    params: Vec<Parameter>,
    topology: Option<Topology>,
    head: Head,
}

/// Per-forward knobs: the hidden activation and optional checksum guards.
#[derive(Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub activation: Activation,
    pub abft: Option<(&'a AbftGuard, &'a MitigationPolicy)>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            abft: None,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    /// Options realizing a mitigation policy at inference time.
    pub fn for_policy(policy: &'a MitigationPolicy, guard: Option<&'a AbftGuard>) -> Self {
        use crate::mitigate::MitigationKind;
        match policy.kind {
            MitigationKind::Clip => Self {
                activation: Activation::Clipped(policy.clip_spec()),
                abft: None,
            },
            MitigationKind::Abft => Self {
                activation: Activation::Relu,
                abft: guard.map(|g| (g, policy)),
            },
            MitigationKind::None | MitigationKind::Sbp => Self::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[n × 1]` raw logits or probabilities, depending on the head.
    pub output: Tensor,
    pub abft: AbftStatus,
    pub abft_checks_failed: usize,
}

/// Row-sum checksums captured from a clean model, one per weight matrix and
/// the embedding table. Biases are not covered.
#[derive(Debug, Clone)]
pub struct AbftGuard {
    checksums: Vec<Option<Vec<f32>>>,
}

impl AbftGuard {
    pub fn capture(model: &ModelGraph) -> Self {
        let checksums = model
            .params
            .iter()
            .map(|p| {
                (p.tensor.rank() == 2).then(|| {
                    (0..p.tensor.rows())
                        .map(|i| p.tensor.row(i).iter().fold(0.0f32, |a, v| a + v))
                        .collect()
                })
            })
            .collect();
        Self { checksums }
    }

    fn get(&self, param: usize) -> &[f32] {
        self.checksums[param].as_deref().expect("checksums exist for rank-2 parameters")
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl ModelGraph {
    /// Untrained dummy model with Kaiming-uniform weights and zero biases.
    pub fn build_dummy(cfg: &DummyModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let linear = |params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng, prefix: &str, i: usize, fan_in: usize, fan_out: usize| {
            params.push(Parameter {
                name: format!("{prefix}.{i}.weight"),
                component: Component::Mlp,
                tensor: Tensor::matrix(fan_in, fan_out, kaiming_uniform(rng, fan_in, fan_in * fan_out))
                    .expect("shape matches data"),
            });
            params.push(Parameter {
                name: format!("{prefix}.{i}.bias"),
                component: Component::Mlp,
                tensor: Tensor::zeros(&[fan_out]),
            });
        };

        let mut widths = vec![cfg.dense_dim];
        widths.extend(std::iter::repeat_n(cfg.mlp_hidden, cfg.mlp_depth));
        widths.push(cfg.embed_dim);
        for (i, w) in widths.windows(2).enumerate() {
            linear(&mut params, &mut rng, "bottom", i, w[0], w[1]);
        }
        params.push(Parameter {
            name: "embedding.weight".into(),
            component: Component::Embedding,
            tensor: Tensor::matrix(
                cfg.sparse_dim,
                cfg.embed_dim,
                kaiming_uniform(&mut rng, cfg.embed_dim, cfg.sparse_dim * cfg.embed_dim),
            )?,
        });
        linear(&mut params, &mut rng, "top", 0, 2 * cfg.embed_dim, cfg.mlp_hidden);
        linear(&mut params, &mut rng, "top", 1, cfg.mlp_hidden, 1);
        Self::from_parameters(params)
    }

    /// Dummy topology with a sigmoid CTR head and an optional FM logit term.
    pub fn build_ctr(cfg: &DummyModelConfig, use_fm: bool, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::build_dummy(cfg, seed)?;
        m.head = Head::Sigmoid { fm: use_fm };
        Ok(m)
    }

    /// Wraps a parameter list, inferring the DRS topology from parameter
    /// names when they follow the `bottom.i.*` / `embedding.weight` /
    /// `top.i.*` scheme. Other lists yield a parameters-only graph.
    pub fn from_parameters(params: Vec<Parameter>) -> Result<Self, ModelError> {
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(ModelError::Config(format!("duplicate parameter `{}`", p.name)));
            }
        }
        let topology = infer_topology(&params)?;
        Ok(Self {
            params,
            topology,
            head: Head::Raw,
        })
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].tensor
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Bitwise equality of all parameters (names, tags, shapes, words).
    pub fn bit_eq(&self, other: &ModelGraph) -> bool {
        self.head == other.head
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.component == b.component && a.tensor.bit_eq(&b.tensor)
            })
    }

    /// CRC32 over every parameter word, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            for w in p.tensor.words() {
                h.update(&w.to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn dense_dim(&self) -> Option<usize> {
        self.topology.as_ref().map(|t| self.params[t.bottom[0].weight].tensor.rows())
    }

    pub fn sparse_dim(&self) -> Option<usize> {
        self.topology.as_ref().map(|t| self.params[t.embedding].tensor.rows())
    }

    pub fn layers(&self) -> Vec<LayerDesc> {
        let Some(t) = &self.topology else { return Vec::new() };
        let dense = |l: &Linear, relu: bool| {
            let w = &self.params[l.weight];
            LayerDesc::Dense {
                weight: w.name.clone(),
                bias: self.params[l.bias].name.clone(),
                inputs: w.tensor.rows(),
                outputs: w.tensor.cols(),
                relu,
            }
        };
        let mut out: Vec<LayerDesc> = t.bottom.iter().map(|l| dense(l, true)).collect();
        let table = &self.params[t.embedding];
        out.push(LayerDesc::EmbeddingBag {
            table: table.name.clone(),
            rows: table.tensor.rows(),
            dim: table.tensor.cols(),
        });
        out.push(LayerDesc::Concat { width: self.params[t.top[0].weight].tensor.rows() });
        let last = t.top.len() - 1;
        out.extend(t.top.iter().enumerate().map(|(i, l)| dense(l, i < last)));
        if let Head::Sigmoid { fm } = self.head {
            if fm {
                out.push(LayerDesc::FmInteraction);
            }
            out.push(LayerDesc::Sigmoid);
        }
        out
    }

    fn topology(&self) -> Result<&Topology, ModelError> {
        self.topology
            .as_ref()
            .ok_or_else(|| ModelError::Topology("parameter names do not describe a DRS model".into()))
    }

    /// Single-sample forward pass of the dummy model; returns the `[1]` output.
    pub fn forward_dummy(&self, dense: &Tensor, sparse_indices: &[usize]) -> Result<Tensor, ModelError> {
        let x = Tensor::matrix(1, dense.len(), dense.data().to_vec())?;
        let out = self.forward_batch(&x, std::slice::from_ref(&sparse_indices.to_vec()), ForwardOptions::default())?;
        Ok(Tensor::vector(out.output.into_data()))
    }

    /// Batched forward pass. Non-finite values propagate; only shape
    /// mismatches are errors.
    pub fn forward_batch(
        &self,
        dense: &Tensor,
        sparse: &[Vec<usize>],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput, ModelError> {
        let mut trace = ForwardTrace::default();
        self.forward_impl(dense, sparse, opts, &mut trace, false)
    }

    fn forward_impl(
        &self,
        dense: &Tensor,
        sparse: &[Vec<usize>],
        opts: ForwardOptions<'_>,
        trace: &mut ForwardTrace,
        record: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let topo = self.topology()?;
        let n = dense.rows();
        if dense.rank() != 2 {
            return Err(TensorError::Dimension("dense input must be [n × dense_dim]".into()).into());
        }
        let dense_dim = self.params[topo.bottom[0].weight].tensor.rows();
        if dense.cols() != dense_dim {
            return Err(TensorError::Dimension(format!(
                "dense width {} but model expects {}",
                dense.cols(),
                dense_dim
            ))
            .into());
        }
        if sparse.len() != n {
            return Err(TensorError::Dimension(format!(
                "{} sparse index lists for {} samples",
                sparse.len(),
                n
            ))
            .into());
        }

        let mut status = AbftStatus::default();
        let failed = std::cell::Cell::new(0usize);
        let linear = |x: &Tensor, l: &Linear, status: &mut AbftStatus| -> Result<Tensor, ModelError> {
            let w = &self.params[l.weight].tensor;
            let mut y = match opts.abft {
                None => gemm(x, w)?,
                Some((guard, policy)) => {
                    let (y, st) = abft_gemm_split(x, w, guard.get(l.weight), policy, &Persistent)?;
                    if st.detected {
                        failed.set(failed.get() + 1);
                    }
                    status.merge(st);
                    y
                }
            };
            add_row_bias(&mut y, &self.params[l.bias].tensor)?;
            Ok(y)
        };

        let mut x = dense.clone();
        for l in &topo.bottom {
            let mut pre = linear(&x, l, &mut status)?;
            if record {
                trace.bottom_pre.push(pre.clone());
            }
            crate::tensor::apply_activation_in_place(&mut pre, opts.activation);
            x = pre;
            if record {
                trace.bottom_act.push(x.clone());
            }
        }

        let table = &self.params[topo.embedding].tensor;
        let e = table.cols();
        let bottom_out = x.cols();
        let width = bottom_out + e;
        let mut z = vec![0.0f32; n * width];
        let mut pooled = vec![0.0f32; e];
        for (i, idx) in sparse.iter().enumerate() {
            match opts.abft {
                None => embedding_bag_into(table, idx, &mut pooled)?,
                Some((guard, policy)) => {
                    let st = abft_embedding_split(table, guard.get(topo.embedding), idx, policy, &Persistent, &mut pooled)?;
                    if st.detected {
                        failed.set(failed.get() + 1);
                    }
                    status.merge(st);
                }
            }
            let row = &mut z[i * width..(i + 1) * width];
            row[..bottom_out].copy_from_slice(x.row(i));
            row[bottom_out..].copy_from_slice(&pooled);
        }
        let mut h = Tensor::matrix(n, width, z)?;
        if record {
            trace.concat = h.clone();
        }

        let last = topo.top.len() - 1;
        for (li, l) in topo.top.iter().enumerate() {
            let mut pre = linear(&h, l, &mut status)?;
            if li < last {
                if record {
                    trace.top_pre.push(pre.clone());
                }
                crate::tensor::apply_activation_in_place(&mut pre, opts.activation);
                if record {
                    trace.top_act.push(pre.clone());
                }
            }
            h = pre;
        }

        if let Head::Sigmoid { fm } = self.head {
            let data = h.data_mut();
            for (i, idx) in sparse.iter().enumerate() {
                if fm {
                    let rows: Vec<&[f32]> = idx.iter().map(|&f| table.row(f)).collect();
                    data[i] += fm_interaction(&rows)?;
                }
                if record {
                    trace.logits.push(data[i]);
                }
                data[i] = sigmoid(data[i]);
            }
        }

        Ok(ForwardOutput {
            output: h,
            abft: status,
            abft_checks_failed: failed.get(),
        })
    }
}

/// Intermediate values recorded for back-propagation.
#[derive(Debug, Default)]
pub(crate) struct ForwardTrace {
    bottom_pre: Vec<Tensor>,
    bottom_act: Vec<Tensor>,
    concat: Tensor,
    top_pre: Vec<Tensor>,
    top_act: Vec<Tensor>,
    logits: Vec<f32>,
}

fn parse_layer_name(name: &str) -> Option<(&str, usize, &str)> {
    let mut it = name.split('.');
    let (stage, idx, kind) = (it.next()?, it.next()?, it.next()?);
    if it.next().is_some() {
        return None;
    }
    Some((stage, idx.parse().ok()?, kind))
}

fn infer_topology(params: &[Parameter]) -> Result<Option<Topology>, ModelError> {
    let find = |n: &str| params.iter().position(|p| p.name == n);
    let Some(embedding) = find("embedding.weight") else {
        return Ok(None);
    };
    let stage = |prefix: &str| -> Vec<Linear> {
        let count = params
            .iter()
            .filter_map(|p| parse_layer_name(&p.name))
            .filter(|(s, _, k)| *s == prefix && *k == "weight")
            .count();
        (0..count)
            .map_while(|i| {
                Some(Linear {
                    weight: find(&format!("{prefix}.{i}.weight"))?,
                    bias: find(&format!("{prefix}.{i}.bias"))?,
                })
            })
            .collect()
    };
    let bottom = stage("bottom");
    let top = stage("top");
    if bottom.is_empty() || top.is_empty() {
        return Ok(None);
    }
    let shape_err = |msg: String| Err(ModelError::Topology(msg));
    let mut width = params[bottom[0].weight].tensor.rows();
    for l in bottom.iter().chain(&top) {
        let w = &params[l.weight].tensor;
        let b = &params[l.bias].tensor;
        if l.weight == top[0].weight {
            width += params[embedding].tensor.cols();
        }
        if w.rank() != 2 || w.rows() != width || b.len() != w.cols() {
            return shape_err(format!("layer `{}` has inconsistent shape", params[l.weight].name));
        }
        width = w.cols();
    }
    if params[embedding].tensor.rank() != 2 {
        return shape_err("embedding table must be rank 2".into());
    }
    if width != 1 {
        return shape_err(format!("predictor output width {width}, expected 1"));
    }
    Ok(Some(Topology { bottom, embedding, top }))
}
