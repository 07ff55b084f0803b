//! Loss-scale management for low-precision gradients.
//!
//! Each residual block owns a [`ResblockScaler`]: gradients entering the
//! block's branch are multiplied by its scale (then stored in 16 bits) and
//! divided back out on exit, keeping small gradients above the underflow
//! threshold without disturbing the wide identity path. The scale grows
//! slowly while gradients stay finite and backs off on overflow, with a
//! cooldown so a single bad batch cannot collapse it.
//!
//! [`calibrate_divisor`] picks the power-of-two divisor applied before
//! 16-bit collectives, recentering the observed exponent distribution on
//! the target format's range.

use crate::lowp::{midpoint_exponent, ExponentHistogram, FloatFormatSpec, FP16};
use crate::tensor::Tensor;

/// Per-resblock gradient scale state machine.
///
/// The scale starts at `M * 2^13` for `M` data-parallel machines (the raw
/// per-machine gradient is `M` times smaller than the summed one, so the
/// starting point and clamp range all carry the factor `M`). It is clamped
/// to `[M * 2^7, M * 2^24]` for its whole life.
#[derive(Debug, Clone, PartialEq)]
pub struct ResblockScaler {
    scale: f64,
    replica_count: u32,
    last_backoff_step: Option<u64>,
    last_step: Option<u64>,
}

/// How many consecutive finite steps double the scale.
const GROWTH_DOUBLING_STEPS: f64 = 1000.0;
/// Minimum number of updates between two scale divisions.
const BACKOFF_WINDOW: u64 = 125;

/// What `ResblockScaler::on_step` decided for this update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Whether the parameter update should be applied (false on any
    /// nonfinite step, whether or not the scale moved).
    pub apply_update: bool,
    /// Whether the scale was divided this step.
    pub backed_off: bool,
    /// The scale after this step's adjustment.
    pub scale_after: f64,
}

impl ResblockScaler {
    pub fn new(replica_count: u32) -> Self {
        assert!(replica_count >= 1, "at least one replica required");
        ResblockScaler {
            scale: replica_count as f64 * 2f64.powi(13),
            replica_count,
            last_backoff_step: None,
            last_step: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn clamp_lo(&self) -> f64 {
        self.replica_count as f64 * 2f64.powi(7)
    }

    pub fn clamp_hi(&self) -> f64 {
        self.replica_count as f64 * 2f64.powi(24)
    }

    pub fn last_backoff_step(&self) -> Option<u64> {
        self.last_backoff_step
    }

    /// Advance the scale given this step's finiteness verdict.
    ///
    /// Finite: grow by `2^(1/1000)` and apply the update. Nonfinite: skip
    /// the update, and divide the scale by `sqrt(2)` unless a backoff
    /// already happened fewer than 125 updates ago (then the scale is left
    /// alone; the update is still skipped). The result is clamped either
    /// way.
    pub fn on_step(&mut self, all_finite: bool, step: u64) -> StepOutcome {
        if let Some(prev) = self.last_step {
            assert!(step > prev, "steps must be strictly increasing");
        }
        self.last_step = Some(step);

        let mut backed_off = false;
        if all_finite {
            self.scale *= 2f64.powf(1.0 / GROWTH_DOUBLING_STEPS);
        } else {
            let eligible = match self.last_backoff_step {
                None => true,
                Some(last) => step - last >= BACKOFF_WINDOW,
            };
            if eligible {
                self.scale /= 2f64.sqrt();
                self.last_backoff_step = Some(step);
                backed_off = true;
            }
        }
        self.scale = self.scale.clamp(self.clamp_lo(), self.clamp_hi());
        StepOutcome {
            apply_update: all_finite,
            backed_off,
            scale_after: self.scale,
        }
    }

    /// Snapshot for checkpointing.
    pub fn state(&self) -> (f64, u32, Option<u64>, Option<u64>) {
        (
            self.scale,
            self.replica_count,
            self.last_backoff_step,
            self.last_step,
        )
    }

    /// Rebuild from a checkpoint snapshot.
    pub fn from_state(
        scale: f64,
        replica_count: u32,
        last_backoff_step: Option<u64>,
        last_step: Option<u64>,
    ) -> Self {
        ResblockScaler {
            scale,
            replica_count,
            last_backoff_step,
            last_step,
        }
    }
}

/// Replace every Inf/NaN element with zero.
pub fn filter_nonfinite(g: &Tensor) -> Tensor {
    g.map(|v| if v.is_finite() { v } else { 0.0 })
}

/// Multiply by the block's scale and store in 16 bits (the branch path).
/// Overflowing elements become Inf here and trigger backoff downstream.
pub fn scale_incoming(g: &Tensor, scale: f64) -> Tensor {
    assert!(scale > 0.0, "scale must be positive");
    g.scale(scale)
        .stored_through(FP16)
        .expect("fp16 encodes every sign and nonfinite class")
}

/// Divide the scale back out in wide precision (the identity path).
pub fn unscale_outgoing(g: &Tensor, scale: f64) -> Tensor {
    assert!(scale > 0.0, "scale must be positive");
    g.scale(1.0 / scale)
}

/// The power-of-two divisor applied to gradients before a 16-bit
/// collective, with the pooled histogram it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct DivisorCalibration {
    pub pre_allreduce_divisor: f64,
    pub source_histogram: ExponentHistogram,
}

/// Pool the per-parameter exponent histograms and pick the power of two
/// that moves the pooled median exponent onto the midpoint of `fmt`'s
/// exponent range.
///
/// Dividing by `2^(median - midpoint)` sends a typical element to the
/// middle of the format, leaving headroom on both sides.
pub fn calibrate_divisor(
    histograms: &[ExponentHistogram],
    fmt: &FloatFormatSpec,
) -> Option<DivisorCalibration> {
    let mut pooled = ExponentHistogram::new();
    for h in histograms {
        pooled.merge(h);
    }
    let median = pooled.median_exponent()?;
    let divisor = 2f64.powi(median - midpoint_exponent(fmt));
    Some(DivisorCalibration {
        pre_allreduce_divisor: divisor,
        source_histogram: pooled,
    })
}
