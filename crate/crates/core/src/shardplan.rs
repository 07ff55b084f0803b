//! Parameter-shard layout and the closed-form communication analysis.
//!
//! Each residual block carries six weight matrices. They are sharded over
//! the `m` GPUs of a machine along axis 1, except the second MLP matrix,
//! which is sharded along axis 0 (its natural contraction axis). The
//! compressed pipeline communicates low-rank factors P and Q instead of
//! whole shard gradients; [`compression_rate`] gives the analytic payload
//! saving and [`measured_rate`] recovers the same number from a recorded
//! [`CollectiveLedger`].

use crate::cluster::{CollectiveLedger, Group, OpKind};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("{what} = {value} is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        by: usize,
    },
    #[error("ledger has no inter-machine all-reduce tagged \"{0}\"")]
    MissingLedgerEntries(&'static str),
}

/// Ledger tags for the three all-reduce flavors the rate analysis reads.
pub const TAG_P_FACTORS: &str = "p_factors";
pub const TAG_Q_FACTORS: &str = "q_factors";
pub const TAG_UNCOMPRESSED_BASELINE: &str = "uncompressed_baseline";

/// One parameter's placement: its full shape and the per-GPU shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShardSpec {
    pub param_name: String,
    pub full_shape: (usize, usize),
    /// 0 shards rows, 1 shards columns.
    pub shard_axis: usize,
    pub per_gpu_shape: (usize, usize),
    /// Whether gradients for this parameter travel as low-rank factors.
    pub compressed: bool,
}

impl ShardSpec {
    fn new(
        param_name: &str,
        full_shape: (usize, usize),
        shard_axis: usize,
        m: usize,
    ) -> Result<Self, PlanError> {
        let (rows, cols) = full_shape;
        let per_gpu_shape = if shard_axis == 0 {
            if rows % m != 0 {
                return Err(PlanError::NotDivisible {
                    what: "sharded rows",
                    value: rows,
                    by: m,
                });
            }
            (rows / m, cols)
        } else {
            if cols % m != 0 {
                return Err(PlanError::NotDivisible {
                    what: "sharded cols",
                    value: cols,
                    by: m,
                });
            }
            (rows, cols / m)
        };
        Ok(ShardSpec {
            param_name: param_name.to_string(),
            full_shape,
            shard_axis,
            per_gpu_shape,
            compressed: true,
        })
    }

    pub fn per_gpu_elements(&self) -> usize {
        self.per_gpu_shape.0 * self.per_gpu_shape.1
    }

    /// Shapes of the rank factors for this shard at per-GPU rank
    /// `rank_per_gpu`: P is (rows, r) and Q is (r, cols) in the shard's own
    /// frame. Payload totals don't depend on which side gets transposed
    /// internally during factorization.
    pub fn factor_shapes(&self, rank_per_gpu: usize) -> ((usize, usize), (usize, usize)) {
        let (a, b) = self.per_gpu_shape;
        ((a, rank_per_gpu), (rank_per_gpu, b))
    }

    pub fn factor_elements(&self, rank_per_gpu: usize) -> usize {
        let (a, b) = self.per_gpu_shape;
        (a + b) * rank_per_gpu
    }
}

/// The six weight matrices of one residual block, sharded over `m` GPUs.
pub fn plan_resblock(d: usize, m: usize) -> Result<Vec<ShardSpec>, PlanError> {
    if d % m != 0 {
        return Err(PlanError::NotDivisible {
            what: "hidden size",
            value: d,
            by: m,
        });
    }
    Ok(vec![
        ShardSpec::new("q_proj", (d, d), 1, m)?,
        ShardSpec::new("k_proj", (d, d), 1, m)?,
        ShardSpec::new("v_proj", (d, d), 1, m)?,
        ShardSpec::new("post_attn", (d, d), 1, m)?,
        ShardSpec::new("mlp_in", (d, 4 * d), 1, m)?,
        ShardSpec::new("mlp_out", (4 * d, d), 0, m)?,
    ])
}

/// Per-GPU shard-gradient elements across a plan (the uncompressed payload).
pub fn plan_elements(plan: &[ShardSpec]) -> usize {
    plan.iter().map(|s| s.per_gpu_elements()).sum()
}

/// Per-GPU factor elements across a plan at machine-total rank `r`
/// (each GPU carries rank r/m).
pub fn plan_factor_elements(plan: &[ShardSpec], r: usize, m: usize) -> Result<usize, PlanError> {
    if r % m != 0 {
        return Err(PlanError::NotDivisible {
            what: "rank",
            value: r,
            by: m,
        });
    }
    Ok(plan.iter().map(|s| s.factor_elements(r / m)).sum())
}

/// Fraction of gradient payload saved by rank-`r` compression:
/// `1 - r(m+2)/(2dm)`. Negative when compression is not worthwhile.
pub fn compression_rate(d: usize, r: usize, m: usize) -> f64 {
    assert!(r <= d, "rank must not exceed the hidden size");
    1.0 - (r * (m + 2)) as f64 / (2 * d * m) as f64
}

/// The same rate read off a recorded ledger: one minus the ratio of
/// factor all-reduce bytes to whole-gradient all-reduce bytes, counting
/// inter-machine traffic only. Exact because both sides are integer byte
/// counts of the same wire width.
pub fn measured_rate(ledger: &CollectiveLedger) -> Result<f64, PlanError> {
    let bytes = |tag: &'static str| -> Result<u64, PlanError> {
        let total: u64 = ledger
            .entries()
            .iter()
            .filter(|e| e.tag == tag && e.group == Group::Inter && e.op_kind == OpKind::AllReduce)
            .map(|e| e.logical_bytes)
            .sum();
        if total == 0 {
            return Err(PlanError::MissingLedgerEntries(tag));
        }
        Ok(total)
    };
    let p = bytes(TAG_P_FACTORS)?;
    let q = bytes(TAG_Q_FACTORS)?;
    let g = bytes(TAG_UNCOMPRESSED_BASELINE)?;
    Ok(1.0 - (p + q) as f64 / g as f64)
}
