//! Output-quality metrics: RMSE with invalid-value bookkeeping, AUC-ROC and
//! run aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
}

pub const DEFAULT_INVALID_THRESHOLD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Numeric,
    Inf,
    Nan,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Numeric => "numeric",
            Classification::Inf => "inf",
            Classification::Nan => "nan",
        }
    }

    pub fn from_counts(n_inf: usize, n_nan: usize, invalid_threshold: usize) -> Self {
        if n_nan >= invalid_threshold {
            Classification::Nan
        } else if n_inf >= invalid_threshold {
            Classification::Inf
        } else {
            Classification::Numeric
        }
    }

    pub fn is_invalid(self) -> bool {
        self != Classification::Numeric
    }
}

impl std::str::FromStr for Classification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "numeric" => Ok(Classification::Numeric),
            "inf" => Ok(Classification::Inf),
            "nan" => Ok(Classification::Nan),
            other => Err(format!("unknown classification `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// NaN when no observed entry is finite.
    pub rmse: f64,
    pub n_inf: usize,
    pub n_nan: usize,
    pub classification: Classification,
}

pub fn rmse_with_validity(
    golden: &Tensor,
    observed: &Tensor,
    invalid_threshold: usize,
) -> Result<RmseReport, MetricsError> {
    if golden.shape() != observed.shape() {
        return Err(MetricsError::Shape(format!(
            "golden {:?} vs observed {:?}",
            golden.shape(),
            observed.shape()
        )));
    }
    let (mut n_inf, mut n_nan, mut n) = (0usize, 0usize, 0usize);
    let mut sq = 0.0f64;
    for (&g, &o) in golden.data().iter().zip(observed.data()) {
        if o.is_nan() {
            n_nan += 1;
        } else if o.is_infinite() {
            n_inf += 1;
        } else {
            let d = g as f64 - o as f64;
            sq += d * d;
            n += 1;
        }
    }
    let rmse = if n == 0 { f64::NAN } else { (sq / n as f64).sqrt() };
    Ok(RmseReport {
        rmse,
        n_inf,
        n_nan,
        classification: Classification::from_counts(n_inf, n_nan, invalid_threshold),
    })
}

/// nan → 0.5, +inf → 1, −inf → 0; finite values unchanged.
pub fn sanitize_scores(scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| {
            if s.is_nan() {
                0.5
            } else if s == f64::INFINITY {
                1.0
            } else if s == f64::NEG_INFINITY {
                0.0
            } else {
                s
            }
        })
        .collect()
}

/// Mann-Whitney AUC with average ranks for ties. Scores are sanitized first.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let scores = sanitize_scores(scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum stays integral under tie averaging.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    /// NaN when every run is non-finite.
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub nonfinite_count: usize,
}

pub fn aggregate_runs(values: &[f64]) -> RunAggregate {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (mean, min, max) = if finite.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        // incremental mean is exact for constant inputs
        let mean = finite
            .iter()
            .enumerate()
            .fold(0.0, |m, (k, v)| m + (v - m) / (k + 1) as f64);
        (
            mean,
            finite.iter().copied().fold(f64::INFINITY, f64::min),
            finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    RunAggregate {
        mean,
        min,
        max,
        count: values.len(),
        nonfinite_count: values.len() - finite.len(),
    }
}
