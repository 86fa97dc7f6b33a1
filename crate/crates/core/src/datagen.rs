//! Synthetic inputs: Gaussian dense features, Bernoulli sparse features and
//! planted-signal click labels.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use thiserror::Error;

use crate::model::DummyModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("batch line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("batch i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    /// `[n × dense_dim]`.
    pub dense: Tensor,
    /// Sorted, duplicate-free active rows per sample.
    pub sparse: Vec<Vec<usize>>,
    pub labels: Option<Vec<f32>>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.sparse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sparse.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> SyntheticBatch {
        let d = self.dense.cols();
        let mut dense = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            dense.extend_from_slice(self.dense.row(i));
        }
        SyntheticBatch {
            dense: Tensor::matrix(indices.len(), d, dense).expect("shape matches data"),
            sparse: indices.iter().map(|&i| self.sparse[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// One sample per line: `label<TAB>dense,…<TAB>index,…`. The label
    /// field is empty for unlabelled batches.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        for i in 0..self.len() {
            if let Some(l) = &self.labels {
                write!(w, "{}", l[i])?;
            }
            w.write_all(b"\t")?;
            write_joined(&mut w, self.dense.row(i))?;
            w.write_all(b"\t")?;
            write_joined(&mut w, &self.sparse[i])?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut dense = Vec::new();
        let mut sparse = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |reason: String| DataError::Parse { line: lineno, reason };
            let mut fields = line.split('\t');
            let (Some(label), Some(d), Some(s), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected 3 tab-separated fields".into()));
            };
            if !label.is_empty() {
                labels.push(label.parse::<f32>().map_err(|e| err(format!("label: {e}")))?);
            }
            let row: Vec<f32> = split_list(d).map_err(|e| err(format!("dense: {e}")))?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(err("dense width differs from first line".into()));
            }
            dense.extend(row);
            sparse.push(split_list::<usize>(s).map_err(|e| err(format!("sparse: {e}")))?);
        }
        let n = sparse.len();
        if !labels.is_empty() && labels.len() != n {
            return Err(DataError::Parse {
                line: 0,
                reason: "some samples are missing labels".into(),
            });
        }
        Ok(SyntheticBatch {
            dense: Tensor::matrix(n, width.unwrap_or(0), dense).expect("rows checked"),
            sparse,
            labels: (!labels.is_empty()).then_some(labels),
        })
    }
}

fn write_joined<W: Write, T: std::fmt::Display>(w: &mut W, items: &[T]) -> std::io::Result<()> {
    for (k, v) in items.iter().enumerate() {
        if k > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{v}")?;
    }
    Ok(())
}

fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.parse::<T>().map_err(|e| format!("`{x}`: {e}"))).collect()
}

fn check_sparsity(sparsity: f64) -> Result<(), DataError> {
    if sparsity > 0.0 && sparsity < 1.0 {
        Ok(())
    } else {
        Err(DataError::Config(format!("sparsity {sparsity} must lie in (0, 1)")))
    }
}

/// Active indices of one sample, drawn by geometric gap skipping.
fn sample_active(rng: &mut ChaCha8Rng, geo: &Geometric, sparse_dim: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0u64;
    loop {
        pos = pos.saturating_add(geo.sample(rng));
        if pos >= sparse_dim as u64 {
            return out;
        }
        out.push(pos as usize);
        pos += 1;
    }
}

fn draw_features(
    rng: &mut ChaCha8Rng,
    n: usize,
    dense_dim: usize,
    sparse_dim: usize,
    sparsity: f64,
) -> Result<(Tensor, Vec<Vec<usize>>), DataError> {
    check_sparsity(sparsity)?;
    if dense_dim == 0 || sparse_dim == 0 {
        return Err(DataError::Config("dense_dim and sparse_dim must be >= 1".into()));
    }
    let geo = Geometric::new(sparsity).map_err(|e| DataError::Config(e.to_string()))?;
    let mut dense = Vec::with_capacity(n * dense_dim);
    let mut sparse = Vec::with_capacity(n);
    for _ in 0..n {
        dense.extend((0..dense_dim).map(|_| -> f32 { StandardNormal.sample(&mut *rng) }));
        sparse.push(sample_active(rng, &geo, sparse_dim));
    }
    Ok((Tensor::matrix(n, dense_dim, dense).expect("shape matches data"), sparse))
}

/// Unlabelled batch with `N(0,1)` dense features and Bernoulli(`sparsity`)
/// sparse features.
pub fn gen_batch(
    n: usize,
    dense_dim: usize,
    sparse_dim: usize,
    sparsity: f64,
    seed: u64,
) -> Result<SyntheticBatch, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dense, sparse) = draw_features(&mut rng, n, dense_dim, sparse_dim, sparsity)?;
    Ok(SyntheticBatch { dense, sparse, labels: None })
}

/// Standard deviation of the dense and sparse parts of the planted logit.
const DENSE_SCALE: f64 = 2.0;
const SPARSE_SCALE: f64 = 1.5;

/// Hidden ground-truth scorer behind [`gen_labeled`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub dense_weights: Vec<f32>,
    pub sparse_weights: Vec<f32>,
}

impl PlantedModel {
    pub fn draw(cfg: &DummyModelConfig, sparsity: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let a = DENSE_SCALE / (cfg.dense_dim as f64).sqrt();
        let b = SPARSE_SCALE / (cfg.sparse_dim as f64 * sparsity).max(1.0).sqrt();
        let mut draw = |len: usize, scale: f64| -> Vec<f32> {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect::<Vec<f32>>()
        };
        let dense_weights = draw(cfg.dense_dim, a);
        let sparse_weights = draw(cfg.sparse_dim, b);
        Self { dense_weights, sparse_weights }
    }

    pub fn logit(&self, dense: &[f32], active: &[usize]) -> f64 {
        let d: f64 = dense.iter().zip(&self.dense_weights).map(|(x, w)| *x as f64 * *w as f64).sum();
        d + active.iter().map(|&f| self.sparse_weights[f] as f64).sum::<f64>()
    }

    pub fn logits(&self, batch: &SyntheticBatch) -> Vec<f64> {
        (0..batch.len()).map(|i| self.logit(batch.dense.row(i), &batch.sparse[i])).collect()
    }
}

/// Labelled batch: `label = 1[z + noise·L > 0]` where `z` is the planted
/// logit and `L` is standard logistic noise. At `noise = 1` this is exactly
/// `Bernoulli(sigmoid(z))`; at `noise = 0` it is a hard threshold on `z`.
pub fn gen_labeled(
    n: usize,
    cfg: &DummyModelConfig,
    sparsity: f64,
    noise: f64,
    seed: u64,
) -> Result<SyntheticBatch, DataError> {
    if !(noise >= 0.0) {
        return Err(DataError::Config(format!("noise {noise} must be >= 0")));
    }
    let planted = PlantedModel::draw(cfg, sparsity, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dense, sparse) = draw_features(&mut rng, n, cfg.dense_dim, cfg.sparse_dim, sparsity)?;
    let mut batch = SyntheticBatch { dense, sparse, labels: None };
    let labels = planted
        .logits(&batch)
        .into_iter()
        .map(|z| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let logistic = (u / (1.0 - u)).ln();
            let y = if noise.is_infinite() { logistic } else { z + noise * logistic };
            if y > 0.0 { 1.0 } else { 0.0 }
        })
        .collect();
    batch.labels = Some(labels);
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 8:1:1 train/validation/test partition by hashed sample index.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut s = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    let key = splitmix64(seed);
    for i in 0..n {
        match splitmix64(key ^ i as u64) % 10 {
            0..=7 => s.train.push(i),
            8 => s.val.push(i),
            _ => s.test.push(i),
        }
    }
    s
}
