//! Error mitigation: checksum-verified GEMM and embedding lookups (ABFT),
//! clipped activations, and the field masks behind selective bit protection.

use serde::{Deserialize, Serialize};

use crate::inject::{sbp_mask, FloatField};
use crate::tensor::{gemm, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    None,
    Abft,
    Clip,
    Sbp,
}

impl MitigationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MitigationKind::None => "none",
            MitigationKind::Abft => "abft",
            MitigationKind::Clip => "clip",
            MitigationKind::Sbp => "sbp",
        }
    }
}

impl std::str::FromStr for MitigationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "abft" => Ok(Self::Abft),
            "clip" => Ok(Self::Clip),
            "sbp" => Ok(Self::Sbp),
            other => Err(format!("unknown mitigation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `x` inside `[0, T]`, zero elsewhere.
    ZeroOutside,
    /// ReLU6-style: `0` below zero, `T` above `T`.
    Clamp,
}

impl ClipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipMode::ZeroOutside => "zero_outside",
            ClipMode::Clamp => "clamp",
        }
    }
}

impl std::str::FromStr for ClipMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_outside" => Ok(Self::ZeroOutside),
            "clamp" => Ok(Self::Clamp),
            other => Err(format!("unknown clip mode `{other}`")),
        }
    }
}

/// The scalar clipping rule used at hidden activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub mode: ClipMode,
    pub threshold: f32,
    /// Symmetric pre-clamp `[-R, R]` applied before the piecewise rule.
    pub range: Option<f32>,
}

impl ClipSpec {
    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        if x.is_nan() {
            return 0.0;
        }
        let x = match self.range {
            Some(r) => x.clamp(-r, r),
            None => x,
        };
        let t = self.threshold;
        match self.mode {
            ClipMode::ZeroOutside => {
                if (0.0..=t).contains(&x) {
                    x
                } else {
                    0.0
                }
            }
            ClipMode::Clamp => {
                if x < 0.0 {
                    0.0
                } else if x > t {
                    t
                } else {
                    x
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPolicy {
    pub kind: MitigationKind,
    pub clip_mode: ClipMode,
    pub clip_threshold: f32,
    pub clip_range: Option<f32>,
    pub abft_tolerance: f32,
    pub abft_max_retries: u32,
    pub sbp_fields: Vec<FloatField>,
}

impl Default for MitigationPolicy {
    fn default() -> Self {
        Self {
            kind: MitigationKind::None,
            clip_mode: ClipMode::Clamp,
            clip_threshold: 6.0,
            clip_range: Some(6.0),
            abft_tolerance: 1e-4,
            abft_max_retries: 3,
            sbp_fields: vec![FloatField::Sign, FloatField::Exponent],
        }
    }
}

impl MitigationPolicy {
    pub fn with_kind(kind: MitigationKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_threshold > 0.0) {
            return Err(format!("clip threshold must be > 0, got {}", self.clip_threshold));
        }
        if let Some(r) = self.clip_range {
            if !(r > 0.0) {
                return Err(format!("clip range must be > 0, got {r}"));
            }
        }
        if !(self.abft_tolerance > 0.0) {
            return Err(format!("abft tolerance must be > 0, got {}", self.abft_tolerance));
        }
        Ok(())
    }

    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec {
            mode: self.clip_mode,
            threshold: self.clip_threshold,
            range: self.clip_range,
        }
    }

    /// Bits that injection must never touch under this policy.
    pub fn protected_mask(&self) -> u32 {
        match self.kind {
            MitigationKind::Sbp => sbp_mask(&self.sbp_fields),
            _ => 0,
        }
    }
}

/// Scalar clipping rule selected by `policy`.
pub fn clip_activation(x: f32, policy: &MitigationPolicy) -> f32 {
    policy.clip_spec().apply(x)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbftStatus {
    pub detected: bool,
    pub retries_used: u32,
    pub unrecoverable: bool,
}

impl AbftStatus {
    pub fn merge(&mut self, other: AbftStatus) {
        self.detected |= other.detected;
        self.retries_used += other.retries_used;
        self.unrecoverable |= other.unrecoverable;
    }
}

/// Where a re-execution reads its operands from after a failed check.
///
/// The default source hands back the stored (possibly corrupted) operand, so
/// persistent corruption fails every retry. A clean source models transient
/// faults that disappear on re-execution.
pub trait RecoverySource {
    fn operand_for_retry<'a>(&'a self, stored: &'a Tensor, attempt: u32) -> &'a Tensor;
}

pub struct Persistent;

impl RecoverySource for Persistent {
    fn operand_for_retry<'a>(&'a self, stored: &'a Tensor, _attempt: u32) -> &'a Tensor {
        stored
    }
}

/// Re-executes against a known-good copy of the operand.
pub struct CleanCopy<'c>(pub &'c Tensor);

impl RecoverySource for CleanCopy<'_> {
    fn operand_for_retry<'a>(&'a self, _stored: &'a Tensor, _attempt: u32) -> &'a Tensor {
        self.0
    }
}

/// Appends the row-sum column `S_B[i] = Σ_j b[i][j]`.
pub fn augment_checksums(b: &Tensor) -> Result<Tensor, TensorError> {
    if b.rank() != 2 {
        return Err(TensorError::Dimension("checksum augmentation needs rank 2".into()));
    }
    let (k, n) = (b.rows(), b.cols());
    let mut data = Vec::with_capacity(k * (n + 1));
    for i in 0..k {
        let row = b.row(i);
        data.extend_from_slice(row);
        data.push(row.iter().fold(0.0f32, |acc, v| acc + v));
    }
    Tensor::matrix(k, n + 1, data)
}

/// Splits an augmented matrix into its data block and checksum column.
fn split_augmented(b_aug: &Tensor) -> Result<(Tensor, Vec<f32>), TensorError> {
    if b_aug.rank() != 2 || b_aug.cols() < 2 {
        return Err(TensorError::Dimension(
            "augmented operand needs a checksum column".into(),
        ));
    }
    let (k, n1) = (b_aug.rows(), b_aug.cols());
    let n = n1 - 1;
    let mut data = Vec::with_capacity(k * n);
    let mut sums = Vec::with_capacity(k);
    for i in 0..k {
        let row = b_aug.row(i);
        data.extend_from_slice(&row[..n]);
        sums.push(row[n]);
    }
    Ok((Tensor::matrix(k, n, data)?, sums))
}

#[inline]
fn within_tolerance(check: f32, sum: f32, abs_sum: f32, tol: f32) -> bool {
    let diff = (check - sum).abs();
    let scale = check.abs().max(abs_sum).max(1.0);
    // NaN anywhere fails the comparison and counts as a violation.
    diff <= tol * scale
}

/// Row-wise checksum verification of `c` against `check = A·S_B`.
fn rows_consistent(c: &Tensor, check: &[f32], tol: f32) -> bool {
    (0..c.rows()).all(|i| {
        let row = c.row(i);
        let sum = row.iter().fold(0.0f32, |acc, v| acc + v);
        let abs_sum = row.iter().fold(0.0f32, |acc, v| acc + v.abs());
        within_tolerance(check[i], sum, abs_sum, tol)
    })
}

fn mat_vec(a: &Tensor, v: &[f32]) -> Vec<f32> {
    (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(v)
                .fold(0.0f32, |acc, (x, y)| acc + x * y)
        })
        .collect()
}

/// Checksum-verified `A × B` with persistent-fault re-execution.
pub fn abft_gemm(
    a: &Tensor,
    b_aug: &Tensor,
    policy: &MitigationPolicy,
) -> Result<(Tensor, AbftStatus), TensorError> {
    let (b, sums) = split_augmented(b_aug)?;
    abft_gemm_split(a, &b, &sums, policy, &Persistent)
}

/// As [`abft_gemm`], with the data block and checksum column kept apart and a
/// caller-chosen recovery source for retries.
pub fn abft_gemm_split(
    a: &Tensor,
    b: &Tensor,
    checksums: &[f32],
    policy: &MitigationPolicy,
    recovery: &dyn RecoverySource,
) -> Result<(Tensor, AbftStatus), TensorError> {
    if checksums.len() != b.rows() {
        return Err(TensorError::Dimension(format!(
            "{} checksums for {} rows",
            checksums.len(),
            b.rows()
        )));
    }
    let check = mat_vec(a, checksums);
    let tol = policy.abft_tolerance;
    let mut status = AbftStatus::default();
    let mut c = gemm(a, b)?;
    if rows_consistent(&c, &check, tol) {
        return Ok((c, status));
    }
    status.detected = true;
    for attempt in 1..=policy.abft_max_retries {
        status.retries_used = attempt;
        c = gemm(a, recovery.operand_for_retry(b, attempt))?;
        if rows_consistent(&c, &check, tol) {
            return Ok((c, status));
        }
    }
    status.unrecoverable = true;
    Ok((c, status))
}

/// Checksum-verified embedding-bag lookup on a table carrying its row-sum column.
pub fn abft_embedding(
    table_aug: &Tensor,
    indices: &[usize],
    policy: &MitigationPolicy,
) -> Result<(Tensor, AbftStatus), TensorError> {
    let (table, sums) = split_augmented(table_aug)?;
    let mut out = vec![0.0; table.cols()];
    let status = abft_embedding_split(&table, &sums, indices, policy, &Persistent, &mut out)?;
    Ok((Tensor::vector(out), status))
}

pub fn abft_embedding_split(
    table: &Tensor,
    checksums: &[f32],
    indices: &[usize],
    policy: &MitigationPolicy,
    recovery: &dyn RecoverySource,
    out: &mut [f32],
) -> Result<AbftStatus, TensorError> {
    if checksums.len() != table.rows() {
        return Err(TensorError::Dimension(format!(
            "{} checksums for {} rows",
            checksums.len(),
            table.rows()
        )));
    }
    let mut r = 0.0f32;
    for &f in indices {
        let s = checksums
            .get(f)
            .ok_or(TensorError::Index { index: f, rows: table.rows() })?;
        r += *s;
    }
    let consistent = |out: &[f32]| {
        let sum = out.iter().fold(0.0f32, |acc, v| acc + v);
        let abs_sum = out.iter().fold(0.0f32, |acc, v| acc + v.abs());
        within_tolerance(r, sum, abs_sum, policy.abft_tolerance)
    };
    let mut status = AbftStatus::default();
    crate::tensor::embedding_bag_into(table, indices, out)?;
    if consistent(out) {
        return Ok(status);
    }
    status.detected = true;
    for attempt in 1..=policy.abft_max_retries {
        status.retries_used = attempt;
        crate::tensor::embedding_bag_into(recovery.operand_for_retry(table, attempt), indices, out)?;
        if consistent(out) {
            return Ok(status);
        }
    }
    status.unrecoverable = true;
    Ok(status)
}
