//! Deterministic in-process stand-in for a training cluster.
//!
//! A [`SimCluster`] executes collectives (all-gather, reduce-scatter,
//! all-reduce, broadcast) over plain tensors with fixed reduction order, so
//! every run is bit-identical. Payload sizes are written to a
//! [`CollectiveLedger`] as they happen: logical element counts times the
//! wire width, with no transport constants, which is exactly what the
//! compression-rate arithmetic needs (algorithm factors cancel in ratios).
//!
//! Collectives here are synchronous: each call is a rendezvous of all
//! participants. Overlap of communication with compute is a scheduling
//! concern left to the caller; the ledger's `tag` field is the hook for
//! annotating phases.

use crate::lowp::FloatFormatSpec;
use crate::tensor::Tensor;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("participants disagree on shape: ({0}, {1}) vs ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("cannot split {0} slots into {1} even parts")]
    UnevenPartition(usize, usize),
    #[error("machine index {0} out of range (cluster has {1})")]
    BadMachineIndex(usize, usize),
    #[error("collective with no participants")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Cluster shape: `n_machines` machines of `gpus_per_machine` GPUs each,
/// plus the seed that namespaces every random draw of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Topology {
    pub n_machines: usize,
    pub gpus_per_machine: usize,
    pub run_seed: u64,
}

impl Topology {
    pub fn new(n_machines: usize, gpus_per_machine: usize, run_seed: u64) -> Self {
        assert!(n_machines >= 1 && gpus_per_machine >= 1);
        Topology {
            n_machines,
            gpus_per_machine,
            run_seed,
        }
    }

    pub fn total_gpus(&self) -> usize {
        self.n_machines * self.gpus_per_machine
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpKind {
    AllGather,
    ReduceScatter,
    AllReduce,
    Broadcast,
}

/// Whether a collective ran among the GPUs of one machine or across
/// machines. Intra-machine links are the fast ones; the bandwidth analysis
/// cares about the inter-machine traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Group {
    Intra,
    Inter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub op_kind: OpKind,
    pub group: Group,
    pub element_count: u64,
    pub bits_per_element: u32,
    pub logical_bytes: u64,
    /// Caller-supplied phase label ("p_factors", "param_prefetch", ...).
    pub tag: String,
}

/// Append-only record of every collective's logical payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollectiveLedger {
    entries: Vec<LedgerEntry>,
}

impl CollectiveLedger {
    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_logical_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.logical_bytes).sum()
    }

    pub fn bytes_tagged(&self, tag: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.logical_bytes)
            .sum()
    }

    pub fn bytes_in_group(&self, group: Group) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.logical_bytes)
            .sum()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn record(&mut self, op_kind: OpKind, group: Group, element_count: u64, bits: u32, tag: &str) {
        debug_assert!(element_count * bits as u64 % 8 == 0, "whole bytes only");
        self.entries.push(LedgerEntry {
            op_kind,
            group,
            element_count,
            bits_per_element: bits,
            logical_bytes: element_count * bits as u64 / 8,
            tag: tag.to_string(),
        });
    }
}

/// Run-wide convention for namespacing randomness: fold `salt` into `base`
/// through a splitmix64-style finalizer. Chain calls to namespace by
/// several indices, e.g. `derive_seed(derive_seed(run, shard), step)`.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Wire width for a payload: 16 bits when it travels in one of the
/// low-precision formats (all of which fit sixteen bits), 32 otherwise.
fn wire_bits(fmt: Option<&FloatFormatSpec>) -> u32 {
    match fmt {
        Some(_) => 16,
        None => 32,
    }
}

/// The simulated cluster: topology plus the running byte ledger.
#[derive(Debug, Clone)]
pub struct SimCluster {
    pub topology: Topology,
    pub ledger: CollectiveLedger,
}

impl SimCluster {
    pub fn new(topology: Topology) -> Self {
        SimCluster {
            topology,
            ledger: CollectiveLedger::default(),
        }
    }

    /// Intra-machine all-gather: every GPU contributes its shard and ends
    /// up with the concatenation along `axis` (0 stacks rows, 1 joins
    /// columns). Returns the single gathered tensor all GPUs now hold.
    pub fn all_gather(
        &mut self,
        shards: &[Tensor],
        axis: usize,
        tag: &str,
    ) -> Result<Tensor, ClusterError> {
        if shards.is_empty() {
            return Err(ClusterError::Empty);
        }
        let first = shards[0].shape();
        for s in shards {
            if s.shape() != first {
                return Err(ClusterError::ShapeMismatch(
                    first.0,
                    first.1,
                    s.rows(),
                    s.cols(),
                ));
            }
        }
        let full = Tensor::concat(shards, axis)?;
        let bits = wire_bits(shards[0].format());
        self.ledger
            .record(OpKind::AllGather, Group::Intra, full.len() as u64, bits, tag);
        Ok(full)
    }

    /// Intra-machine reduce-scatter with mean reduction: GPU `k` receives
    /// slice `k` (along `axis`) of the elementwise mean over all inputs.
    /// Summation runs in ascending GPU order, in wide precision. Nonfinite
    /// inputs propagate into the affected slices; callers inspect the
    /// returned shards for finiteness.
    pub fn reduce_scatter_avg(
        &mut self,
        full_grads: &[Tensor],
        axis: usize,
        tag: &str,
    ) -> Result<Vec<Tensor>, ClusterError> {
        let n = full_grads.len();
        if n == 0 {
            return Err(ClusterError::Empty);
        }
        let (rows, cols) = full_grads[0].shape();
        for g in full_grads {
            if g.shape() != (rows, cols) {
                return Err(ClusterError::ShapeMismatch(rows, cols, g.rows(), g.cols()));
            }
        }
        let slots = if axis == 0 { rows } else { cols };
        if slots % n != 0 {
            return Err(ClusterError::UnevenPartition(slots, n));
        }
        let mut mean = full_grads[0].widened();
        for g in &full_grads[1..] {
            mean = mean.add(g)?;
        }
        let mean = mean.scale(1.0 / n as f64);
        let step = slots / n;
        let shards = (0..n)
            .map(|k| {
                if axis == 0 {
                    mean.slice_rows(k * step, (k + 1) * step)
                } else {
                    mean.slice_cols(k * step, (k + 1) * step)
                }
            })
            .collect();
        let bits = wire_bits(full_grads[0].format());
        self.ledger.record(
            OpKind::ReduceScatter,
            Group::Intra,
            (rows * cols) as u64,
            bits,
            tag,
        );
        Ok(shards)
    }

    /// Inter-machine all-reduce with mean reduction. The sum runs as a
    /// fixed pairwise tree over machine index, the mean is taken in wide
    /// precision, then each element is rounded through `fmt` when given.
    /// With `clamp_infinities`, resulting infinities are pulled back to
    /// `fmt`'s largest finite value, keeping the sign; NaN passes through
    /// (a NaN result means the step gets skipped, clamping only rescues
    /// overflow).
    pub fn all_reduce_mean(
        &mut self,
        values: &[Tensor],
        fmt: Option<&FloatFormatSpec>,
        clamp_infinities: bool,
        tag: &str,
    ) -> Result<Tensor, ClusterError> {
        Ok(self
            .all_reduce_mean_checked(values, fmt, clamp_infinities, tag)?
            .0)
    }

    /// [`all_reduce_mean`](Self::all_reduce_mean) plus an out-of-band flag:
    /// true when any input held a nonfinite value or the reduction
    /// overflowed before clamping. Clamping pulls overflowed values back to
    /// finite range on the wire, so this information cannot be recovered
    /// from the payload itself; skip logic must carry it separately.
    pub fn all_reduce_mean_checked(
        &mut self,
        values: &[Tensor],
        fmt: Option<&FloatFormatSpec>,
        clamp_infinities: bool,
        tag: &str,
    ) -> Result<(Tensor, bool), ClusterError> {
        let (result, dirty) = self.all_reduce_unrecorded(values, fmt, clamp_infinities)?;
        self.ledger.record(
            OpKind::AllReduce,
            Group::Inter,
            result.len() as u64,
            wire_bits(fmt),
            tag,
        );
        Ok((result, dirty))
    }

    /// All-reduce a whole list of buffers as one scheduled operation: the
    /// results equal per-buffer [`all_reduce_mean`](Self::all_reduce_mean)
    /// outputs, but the ledger shows a single entry with the summed element
    /// count. `per_machine[i]` is machine `i`'s buffer list; all lists must
    /// be parallel. An empty group records nothing.
    pub fn grouped_all_reduce_mean(
        &mut self,
        per_machine: &[Vec<Tensor>],
        fmt: Option<&FloatFormatSpec>,
        clamp_infinities: bool,
        tag: &str,
    ) -> Result<Vec<Tensor>, ClusterError> {
        Ok(self
            .grouped_all_reduce_mean_checked(per_machine, fmt, clamp_infinities, tag)?
            .0)
    }

    /// Grouped variant of
    /// [`all_reduce_mean_checked`](Self::all_reduce_mean_checked); one flag
    /// per buffer in the group.
    pub fn grouped_all_reduce_mean_checked(
        &mut self,
        per_machine: &[Vec<Tensor>],
        fmt: Option<&FloatFormatSpec>,
        clamp_infinities: bool,
        tag: &str,
    ) -> Result<(Vec<Tensor>, Vec<bool>), ClusterError> {
        if per_machine.is_empty() {
            return Err(ClusterError::Empty);
        }
        let n_buffers = per_machine[0].len();
        for list in per_machine {
            assert_eq!(list.len(), n_buffers, "machines disagree on buffer count");
        }
        if n_buffers == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut results = Vec::with_capacity(n_buffers);
        let mut flags = Vec::with_capacity(n_buffers);
        let mut total_elements = 0u64;
        for b in 0..n_buffers {
            let stack: Vec<Tensor> = per_machine.iter().map(|m| m[b].clone()).collect();
            let (reduced, dirty) = self.all_reduce_unrecorded(&stack, fmt, clamp_infinities)?;
            total_elements += reduced.len() as u64;
            flags.push(dirty);
            results.push(reduced);
        }
        self.ledger.record(
            OpKind::AllReduce,
            Group::Inter,
            total_elements,
            wire_bits(fmt),
            tag,
        );
        Ok((results, flags))
    }

    /// Inter-machine broadcast from `from_machine`: every machine receives
    /// a copy of the source tensor.
    pub fn broadcast(
        &mut self,
        value: &Tensor,
        from_machine: usize,
        tag: &str,
    ) -> Result<Vec<Tensor>, ClusterError> {
        let n = self.topology.n_machines;
        if from_machine >= n {
            return Err(ClusterError::BadMachineIndex(from_machine, n));
        }
        let bits = wire_bits(value.format());
        self.ledger
            .record(OpKind::Broadcast, Group::Inter, value.len() as u64, bits, tag);
        Ok(vec![value.clone(); n])
    }

    fn all_reduce_unrecorded(
        &self,
        values: &[Tensor],
        fmt: Option<&FloatFormatSpec>,
        clamp_infinities: bool,
    ) -> Result<(Tensor, bool), ClusterError> {
        let n = values.len();
        if n == 0 {
            return Err(ClusterError::Empty);
        }
        let shape = values[0].shape();
        for v in values {
            if v.shape() != shape {
                return Err(ClusterError::ShapeMismatch(
                    shape.0,
                    shape.1,
                    v.rows(),
                    v.cols(),
                ));
            }
        }
        let mut dirty = values.iter().any(|v| !v.all_finite());
        let sum = pairwise_tree_sum(values)?;
        let mut mean = sum.scale(1.0 / n as f64);
        if let Some(f) = fmt {
            mean = mean.stored_through(*f)?.widened();
            if !mean.all_finite() {
                dirty = true;
            }
            if clamp_infinities {
                let max = f.max_finite();
                mean = mean.map(|v| {
                    if v.is_infinite() {
                        max.copysign(v)
                    } else {
                        v
                    }
                });
            }
        }
        Ok((mean, dirty))
    }
}

/// Sum with a fixed binary-tree association over index order (halve, recurse,
/// add), so grouping never depends on list construction details.
fn pairwise_tree_sum(values: &[Tensor]) -> Result<Tensor, ClusterError> {
    debug_assert!(!values.is_empty());
    if values.len() == 1 {
        return Ok(values[0].widened());
    }
    let mid = values.len() / 2;
    let left = pairwise_tree_sum(&values[..mid])?;
    let right = pairwise_tree_sum(&values[mid..])?;
    Ok(left.add(&right)?)
}
