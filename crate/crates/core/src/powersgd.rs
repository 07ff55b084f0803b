//! Low-rank gradient compression with error feedback.
//!
//! Each parameter shard's gradient is approximated as `P * Q^T` with rank-r
//! factors that are cheap to all-reduce. What the approximation misses is
//! kept in a per-machine error buffer and retried on later steps, so the
//! scheme loses nothing in expectation, only delays it.
//!
//! One step, for one shard, interleaves with cross-machine collectives:
//!
//! 1. [`LowRankState::accumulate_error`] folds the reduced gradient into
//!    the buffer (skipped when the reduction was nonfinite).
//! 2. [`LowRankState::compute_p`] forms `P = E * Q` in 16 bits; the caller
//!    all-reduces P across machines.
//! 3. [`LowRankState::set_reduced_p`] orthogonalizes the averaged P
//!    (Householder, with an `eps * I` ridge against rank deficiency).
//! 4. [`LowRankState::compute_q`] forms `Q_new = E^T * P_hat` in 16 bits;
//!    the caller all-reduces it.
//! 5. [`LowRankState::absorb_reduced_q`] records the averaged Q (and under
//!    the warm-start policy, adopts it as the next step's multiplier).
//! 6. [`decompress`] rebuilds the dense gradient in wide precision.
//! 7. [`LowRankState::update_error`] settles the buffer per the nonfinite
//!    decision table: subtract what was applied, or preserve, or reset.
//!
//! Gradients are transposed on the way in so the stored frame always has
//! `rows <= cols`; P then covers the short side.

use crate::cluster::derive_seed;
use crate::lowp::{FloatFormatSpec, M169};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CompressError {
    #[error("rank {0} exceeds min dimension {1} of the shard")]
    RankTooLarge(usize, usize),
    #[error("{0} must be a power of two, got {1}")]
    NotPowerOfTwo(&'static str, f64),
    #[error("bad config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Where the multiplication matrix Q comes from at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QPolicy {
    /// One random gaussian Q drawn at the start, never changed.
    Fixed,
    /// Each step multiplies by the previous step's averaged Q.
    WarmStart,
    /// A fresh random Q every step (identical across machines).
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    /// Rank of this shard's factors.
    pub rank_r: usize,
    /// Ridge added to P before orthogonalization.
    pub epsilon: f64,
    /// Power-of-two multiplier applied to P before 16-bit storage.
    pub p_scale: f64,
    /// Power-of-two multiplier applied to Q before 16-bit storage; divided
    /// back out at decompression.
    pub q_scale: f64,
    /// Base seed for Q initialization (namespaced per shard).
    pub q_seed: u64,
    pub q_policy: QPolicy,
    /// Storage format for communicated factors. `None` keeps them wide,
    /// which isolates the pure linear algebra in tests and diagnostics.
    pub factor_format: Option<FloatFormatSpec>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            rank_r: 1,
            epsilon: 1e-6,
            p_scale: 1.0,
            q_scale: 1.0,
            q_seed: 0,
            q_policy: QPolicy::Fixed,
            factor_format: Some(M169),
        }
    }
}

fn is_power_of_two(v: f64) -> bool {
    v > 0.0 && v.is_finite() && v.to_bits() & ((1u64 << 52) - 1) == 0
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<(), CompressError> {
        if self.rank_r == 0 {
            return Err(CompressError::BadConfig("rank must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(CompressError::BadConfig("epsilon must be positive"));
        }
        if !is_power_of_two(self.p_scale) {
            return Err(CompressError::NotPowerOfTwo("p_scale", self.p_scale));
        }
        if !is_power_of_two(self.q_scale) {
            return Err(CompressError::NotPowerOfTwo("q_scale", self.q_scale));
        }
        Ok(())
    }
}

/// Whether a gradient of this shape gets transposed into the stored frame
/// (true iff it has more rows than columns; ties stay put).
pub fn orient(shape: (usize, usize)) -> bool {
    shape.0 > shape.1
}

/// Per-(machine, shard) compression state.
#[derive(Debug, Clone)]
pub struct LowRankState {
    cfg: CompressionConfig,
    /// Oriented residual, stored through the factor format.
    error_buffer: Tensor,
    /// True when the param-frame gradient is transposed into the buffer.
    transposed: bool,
    /// Multiplication matrix for the next `compute_p`, wide, cols x r.
    q_mult: Tensor,
    /// Orthogonalized averaged P for the step in flight, wide.
    p_hat: Option<Tensor>,
    shard_seed: u64,
}

impl LowRankState {
    /// `shape` is the param-frame shard-gradient shape. `shard_id` must be
    /// shared by the peer states on other machines (so their random Q
    /// draws coincide) and unique across shards of one machine.
    pub fn new(
        shape: (usize, usize),
        cfg: CompressionConfig,
        shard_id: u64,
    ) -> Result<Self, CompressError> {
        cfg.validate()?;
        let transposed = orient(shape);
        let (rows, cols) = if transposed {
            (shape.1, shape.0)
        } else {
            shape
        };
        if cfg.rank_r > rows {
            return Err(CompressError::RankTooLarge(cfg.rank_r, rows));
        }
        let shard_seed = derive_seed(cfg.q_seed, shard_id);
        let error_buffer = match cfg.factor_format {
            Some(f) => Tensor::zeros(rows, cols).stored_through(f)?,
            None => Tensor::zeros(rows, cols),
        };
        let q_mult = gaussian_q(cols, cfg.rank_r, shard_seed);
        Ok(LowRankState {
            cfg,
            error_buffer,
            transposed,
            q_mult,
            p_hat: None,
            shard_seed,
        })
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.cfg
    }

    pub fn transposed(&self) -> bool {
        self.transposed
    }

    /// Oriented residual buffer (read-only; for checkpoints and tests).
    pub fn error_buffer(&self) -> &Tensor {
        &self.error_buffer
    }

    /// Shape of the P factor this state communicates.
    pub fn p_shape(&self) -> (usize, usize) {
        (self.error_buffer.rows(), self.cfg.rank_r)
    }

    /// Shape of the Q factor this state communicates.
    pub fn q_shape(&self) -> (usize, usize) {
        (self.error_buffer.cols(), self.cfg.rank_r)
    }

    /// Overwrite the buffer (checkpoint restore). The tensor must already
    /// be in the oriented frame.
    pub fn restore_error_buffer(&mut self, buffer: Tensor) {
        assert_eq!(buffer.shape(), self.error_buffer.shape(), "buffer shape");
        self.error_buffer = match self.cfg.factor_format {
            Some(f) => buffer.stored_through(f).expect("restore quantize"),
            None => buffer,
        };
    }

    pub fn q_multiplier(&self) -> &Tensor {
        &self.q_mult
    }

    pub fn restore_q_multiplier(&mut self, q: Tensor) {
        assert_eq!(q.shape(), self.q_mult.shape(), "multiplier shape");
        self.q_mult = q;
    }

    /// Fold the reduced gradient (param frame) into the buffer, dividing
    /// by the resblock's gradient scale. Skipped entirely when the
    /// reduction produced nonfinite values. Returns whether the buffer is
    /// finite afterward; the caller holds onto that flag for
    /// [`update_error`](Self::update_error).
    pub fn accumulate_error(
        &mut self,
        reduced_grad: &Tensor,
        grad_scale: f64,
        reduce_finite: bool,
    ) -> bool {
        if reduce_finite {
            let oriented = if self.transposed {
                reduced_grad.transpose()
            } else {
                reduced_grad.widened()
            };
            self.error_buffer
                .update_with(&oriented, |b, g| b + g / grad_scale)
                .expect("shard gradient shape matches buffer");
        }
        self.error_buffer.all_finite()
    }

    /// `P = E * Q`, scaled and stored through the factor format, ready for
    /// the cross-machine all-reduce. `step` seeds the resample policy; the
    /// other policies ignore it.
    pub fn compute_p(&mut self, step: u64) -> Tensor {
        if self.cfg.q_policy == QPolicy::Resample {
            self.q_mult = gaussian_q(
                self.error_buffer.cols(),
                self.cfg.rank_r,
                derive_seed(self.shard_seed, step),
            );
        }
        let p = self
            .error_buffer
            .matmul(&self.q_mult, false, false)
            .expect("buffer and multiplier conform")
            .scale(self.cfg.p_scale);
        self.store_factor(p)
    }

    /// Accept the averaged P and orthogonalize it for this step. A
    /// nonfinite average skips orthogonalization and poisons the step with
    /// NaN so nothing downstream can silently apply it.
    pub fn set_reduced_p(&mut self, p_bar: &Tensor) -> &Tensor {
        let p_hat = if p_bar.all_finite() {
            householder_orthogonalize(p_bar, self.cfg.epsilon)
        } else {
            Tensor::from_fn(p_bar.rows(), p_bar.cols(), |_, _| f64::NAN)
        };
        self.p_hat = Some(p_hat);
        self.p_hat.as_ref().unwrap()
    }

    /// `Q_new = E^T * P_hat`, scaled and stored through the factor format,
    /// ready for the cross-machine all-reduce.
    pub fn compute_q(&self) -> Tensor {
        let p_hat = self.p_hat.as_ref().expect("set_reduced_p first");
        let q = self
            .error_buffer
            .matmul(p_hat, true, false)
            .expect("buffer and P_hat conform")
            .scale(self.cfg.q_scale);
        self.store_factor(q)
    }

    /// Record the averaged Q. Under the warm-start policy it (unscaled)
    /// becomes the next step's multiplication matrix.
    pub fn absorb_reduced_q(&mut self, q_bar: &Tensor) {
        if self.cfg.q_policy == QPolicy::WarmStart && q_bar.all_finite() {
            self.q_mult = q_bar.scale(1.0 / self.cfg.q_scale);
        }
    }

    /// Dense param-frame gradient from this step's P_hat and the averaged
    /// Q.
    pub fn decompress(&self, q_bar: &Tensor) -> Result<Tensor, CompressError> {
        let p_hat = self.p_hat.as_ref().expect("set_reduced_p first");
        decompress(p_hat, q_bar, self.cfg.q_scale, self.transposed)
    }

    /// Settle the buffer after the step.
    ///
    /// `applied` is the param-frame gradient actually fed to the optimizer
    /// (this machine's share of the transmitted total). The decision table:
    /// a finite P/Q round means the buffer sheds what was applied; a
    /// nonfinite round preserves a finite buffer (retry later) and resets a
    /// nonfinite one (nothing else recovers it).
    pub fn update_error(
        &mut self,
        applied: &Tensor,
        pq_finite: bool,
        buffer_finite_after_accumulate: bool,
    ) {
        if pq_finite {
            let oriented = if self.transposed {
                applied.transpose()
            } else {
                applied.widened()
            };
            self.error_buffer
                .update_with(&oriented, |b, d| b - d)
                .expect("applied gradient shape matches buffer");
        } else if !buffer_finite_after_accumulate {
            self.error_buffer.update(|_| 0.0);
        }
    }

    fn store_factor(&self, t: Tensor) -> Tensor {
        match self.cfg.factor_format {
            Some(f) => t.stored_through(f).expect("factor formats encode Inf/NaN"),
            None => t,
        }
    }
}

/// Unit-variance gaussian divided by sqrt(n), deterministic in `seed`.
fn gaussian_q(n: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n as f64).sqrt();
    Tensor::from_fn(n, r, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    })
}

/// Thin-QR orthogonalization of `p + epsilon * I` by Householder
/// reflections, sign-fixed so the triangular factor has a positive
/// diagonal (an already-orthonormal input comes back unchanged, and a zero
/// input yields the leading standard basis columns).
pub fn householder_orthogonalize(p: &Tensor, epsilon: f64) -> Tensor {
    let (m, r) = p.shape();
    assert!(m >= r, "need at least as many rows as columns");
    let mut a = p.data().to_vec();
    for k in 0..r {
        a[k * r + k] += epsilon;
    }

    // Forward pass: reduce A to triangular form, keeping each reflector.
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut diag = Vec::with_capacity(r);
    for k in 0..r {
        let mut norm2 = 0.0;
        for i in k..m {
            norm2 += a[i * r + k] * a[i * r + k];
        }
        let x0 = a[k * r + k];
        let alpha = if x0 >= 0.0 { -norm2.sqrt() } else { norm2.sqrt() };
        let mut v: Vec<f64> = (k..m).map(|i| a[i * r + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in k..r {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * a[i * r + j];
                }
                let c = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[i * r + j] -= c * v[i - k];
                }
            }
        }
        diag.push(a[k * r + k]);
        reflectors.push(v);
    }

    // Backward pass: apply the reflectors to a thin identity to realize
    // the orthonormal factor explicitly.
    let mut q = vec![0.0; m * r];
    for k in 0..r {
        q[k * r + k] = 1.0;
    }
    for k in (0..r).rev() {
        let v = &reflectors[k];
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in 0..r {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * q[i * r + j];
                }
                let c = 2.0 * dot / vnorm2;
                for i in k..m {
                    q[i * r + j] -= c * v[i - k];
                }
            }
        }
    }
    for k in 0..r {
        if diag[k] < 0.0 {
            for i in 0..m {
                q[i * r + k] = -q[i * r + k];
            }
        }
    }
    Tensor::from_vec(m, r, q).expect("shape preserved")
}

/// `P * Q^T / q_scale` in wide precision, transposed back to the param
/// frame when the shard was oriented.
pub fn decompress(
    p_hat: &Tensor,
    q_bar: &Tensor,
    q_scale: f64,
    transposed: bool,
) -> Result<Tensor, CompressError> {
    let wide = p_hat.matmul(q_bar, false, true)?.scale(1.0 / q_scale);
    Ok(if transposed { wide.transpose() } else { wide })
}
