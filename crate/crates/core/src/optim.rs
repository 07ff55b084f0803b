//! AdamW with low-precision moment storage, gradient clipping driven by the
//! factor-norm shortcut, exponentially weighted iterate averaging, and the
//! annealing schedules used by the training harness.

use crate::lowp::{FloatFormatSpec, M0610, M169};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer hyperparameters. `Default` carries the transformer settings;
/// [`HyperParams::dvae`] carries the autoencoder settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct HyperParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub variance_clamp: f64,
    pub ewia_decay: f64,
    pub ewia_interval: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 4.5e-2,
            clip_threshold: 4.0,
            variance_clamp: 5.0,
            ewia_decay: 0.99,
            ewia_interval: 25,
        }
    }
}

impl HyperParams {
    /// Settings used for the discrete autoencoder experiments.
    pub fn dvae() -> Self {
        HyperParams {
            beta2: 0.999,
            weight_decay: 1e-4,
            ewia_decay: 0.999,
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let positives = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("clip_threshold", self.clip_threshold),
            ("variance_clamp", self.variance_clamp),
            ("ewia_decay", self.ewia_decay),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(OptimError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(OptimError::BadConfig("weight_decay must be >= 0".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(OptimError::BadConfig("betas must be < 1".into()));
        }
        if self.ewia_interval == 0 {
            return Err(OptimError::BadConfig("ewia_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter AdamW state. The running mean is stored through the signed
/// 1-6-9 format and the running variance through the unsigned 0-6-10 format;
/// [`AdamWState::wide`] keeps both in full precision for side-by-side runs.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub mean: Tensor,
    pub variance: Tensor,
    pub step: u64,
}

impl AdamWState {
    /// Low-precision moments: mean in 1-6-9, variance in 0-6-10.
    pub fn low_precision(rows: usize, cols: usize) -> Self {
        let mean = Tensor::zeros(rows, cols)
            .stored_through(M169)
            .expect("zeros are representable");
        let variance = Tensor::zeros(rows, cols)
            .stored_through(M0610)
            .expect("zeros are representable");
        AdamWState { mean, variance, step: 0 }
    }

    /// Full-precision moments, used as the reference in comparisons.
    pub fn wide(rows: usize, cols: usize) -> Self {
        AdamWState {
            mean: Tensor::zeros(rows, cols),
            variance: Tensor::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }
}

/// One decoupled-weight-decay Adam update, in place.
///
/// Bias correction is applied (omitting it shrinks early steps by orders of
/// magnitude). The running variance is clamped to `variance_clamp` both when
/// written back to storage and when read for the update, so a burst in the
/// gradient cannot poison later steps through the stored second moment.
pub fn adamw_step(
    params: &mut Tensor,
    grads: &Tensor,
    state: &mut AdamWState,
    hp: &HyperParams,
    lr: f64,
) -> Result<(), OptimError> {
    if params.shape() != grads.shape() || params.shape() != state.shape() {
        let (pr, pc) = params.shape();
        let (gr, gc) = grads.shape();
        return Err(OptimError::Tensor(TensorError::ShapeMismatch(pr, pc, gr, gc)));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);

    state
        .mean
        .update_with(grads, |m, g| hp.beta1 * m + (1.0 - hp.beta1) * g)?;
    let clamp = hp.variance_clamp;
    state.variance.update_with(grads, |v, g| {
        (hp.beta2 * v + (1.0 - hp.beta2) * g * g).min(clamp)
    })?;

    let mut delta = state.mean.zip_map(&state.variance, |m, v| {
        let m_hat = m / bc1;
        let v_hat = v.min(clamp) / bc2;
        m_hat / (v_hat.sqrt() + hp.eps)
    })?;
    delta = delta.widened();
    let wd = hp.weight_decay;
    params.update_with(&delta, |p, d| p - lr * d - lr * wd * p)?;
    Ok(())
}

/// Global gradient norm from per-shard squared factor norms plus squared
/// norms of any uncompressed parameters. Returns infinity when any input to
/// the step was non-finite, which signals the caller to skip the update.
pub fn global_norm(
    q_norms_sq: &[f64],
    uncompressed_norms_sq: &[f64],
    any_nonfinite: bool,
) -> f64 {
    if any_nonfinite {
        return f64::INFINITY;
    }
    let total: f64 = q_norms_sq
        .iter()
        .chain(uncompressed_norms_sq.iter())
        .sum();
    if !total.is_finite() {
        return f64::INFINITY;
    }
    total.sqrt()
}

/// Whether the step should be skipped outright given the global norm.
pub fn update_is_skipped(norm: f64) -> bool {
    !norm.is_finite()
}

/// Scale every gradient by `threshold / norm` when the norm is finite and
/// exceeds the threshold; otherwise leave them untouched (an infinite norm
/// means the whole update is skipped, not rescaled).
pub fn clip_by_global_norm(grads: &mut [Tensor], norm: f64, threshold: f64) {
    if !norm.is_finite() || norm <= threshold {
        return;
    }
    let k = threshold / norm;
    for g in grads.iter_mut() {
        g.update(|v| v * k);
    }
}

/// Exponentially weighted iterate average: on steps divisible by `interval`
/// fold the current parameters into the average with the given decay;
/// on every other step leave the average untouched.
pub fn ewia_update(
    avg: &mut Tensor,
    params: &Tensor,
    decay: f64,
    step: u64,
    interval: u64,
) -> Result<(), OptimError> {
    if interval == 0 {
        return Err(OptimError::BadConfig("interval must be >= 1".into()));
    }
    if step % interval != 0 {
        return Ok(());
    }
    avg.update_with(params, |a, p| decay * a + (1.0 - decay) * p)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    LinearWarmup,
    HalveOnPlateau,
}

/// A closed-form annealing schedule. `HalveOnPlateau` has no closed form;
/// its dynamics live in [`PlateauTracker`] and `value_at` returns the
/// starting value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start_value: f64,
    pub end_value: f64,
    pub duration: u64,
}

impl Schedule {
    pub fn new(
        kind: ScheduleKind,
        start_value: f64,
        end_value: f64,
        duration: u64,
    ) -> Result<Self, OptimError> {
        if duration == 0 {
            return Err(OptimError::BadConfig("duration must be >= 1".into()));
        }
        Ok(Schedule { kind, start_value, end_value, duration })
    }

    /// Schedule value after `t` updates; constant at `end_value` past the
    /// duration for the closed-form kinds.
    pub fn value_at(&self, t: u64) -> f64 {
        let frac = (t.min(self.duration) as f64) / (self.duration as f64);
        match self.kind {
            ScheduleKind::Cosine => {
                self.end_value
                    + (self.start_value - self.end_value)
                        * (1.0 + (std::f64::consts::PI * frac).cos())
                        / 2.0
            }
            ScheduleKind::LinearWarmup => {
                self.start_value + (self.end_value - self.start_value) * frac
            }
            ScheduleKind::HalveOnPlateau => self.start_value,
        }
    }
}

/// Stateful halve-on-plateau step-size control: when the mean training loss
/// of the latest window improves on the window before it by less than
/// `epsilon`, the value is halved and the loss history restarts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauTracker {
    value: f64,
    window: usize,
    epsilon: f64,
    losses: Vec<f64>,
    halvings: u32,
}

impl PlateauTracker {
    pub fn new(start_value: f64, window: usize, epsilon: f64) -> Result<Self, OptimError> {
        if window == 0 {
            return Err(OptimError::BadConfig("window must be >= 1".into()));
        }
        if epsilon < 0.0 {
            return Err(OptimError::BadConfig("epsilon must be >= 0".into()));
        }
        Ok(PlateauTracker { value: start_value, window, epsilon, losses: Vec::new(), halvings: 0 })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    /// Record one training-loss observation; halves the value when two full
    /// windows are available and the improvement between them is below
    /// epsilon.
    pub fn observe(&mut self, loss: f64) {
        self.losses.push(loss);
        if self.losses.len() < 2 * self.window {
            return;
        }
        let n = self.losses.len();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let older = mean(&self.losses[n - 2 * self.window..n - self.window]);
        let recent = mean(&self.losses[n - self.window..]);
        if older - recent < self.epsilon {
            self.value /= 2.0;
            self.halvings += 1;
            self.losses.clear();
        }
    }
}

/// The storage formats used for low-precision moments, exposed so callers
/// can assert state representability without repeating the constants.
pub fn moment_formats() -> (FloatFormatSpec, FloatFormatSpec) {
    (M169, M0610)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powersgd::householder_orthogonalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_and_dvae_hyperparams() {
        let t = HyperParams::default();
        assert_eq!(t.beta1, 0.9);
        assert_eq!(t.beta2, 0.96);
        assert_eq!(t.eps, 1e-8);
        assert_eq!(t.weight_decay, 4.5e-2);
        assert_eq!(t.clip_threshold, 4.0);
        assert_eq!(t.variance_clamp, 5.0);
        assert_eq!(t.ewia_decay, 0.99);
        assert_eq!(t.ewia_interval, 25);
        t.validate().unwrap();
        let d = HyperParams::dvae();
        assert_eq!(d.beta2, 0.999);
        assert_eq!(d.weight_decay, 1e-4);
        assert_eq!(d.ewia_decay, 0.999);
        assert_eq!(d.beta1, 0.9);
        d.validate().unwrap();
        let bad = HyperParams { beta2: 1.0, ..HyperParams::default() };
        assert!(bad.validate().is_err());
        let bad = HyperParams { eps: 0.0, ..HyperParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_gradient_zero_moments_without_decay_leaves_params() {
        let mut p = Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(2, 2);
        let mut st = AdamWState::low_precision(2, 2);
        let hp = HyperParams { weight_decay: 0.0, ..HyperParams::default() };
        for _ in 0..10 {
            adamw_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        }
        assert_eq!(p.data(), before.data(), "zero gradient must not move params");
        assert_eq!(st.step, 10);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        // With wide moments and a constant gradient g, the normalized step
        // converges to lr * g / (|g| + eps), i.e. magnitude lr. Quantized
        // moments freeze slightly short of the fixed point, so the tight
        // tolerance is asserted on the wide state.
        let hp = HyperParams { weight_decay: 0.0, ..HyperParams::default() };
        let lr = 1e-3;
        let mut p = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Tensor::from_vec(1, 1, vec![0.75]).unwrap();
        let mut st = AdamWState::wide(1, 1);
        let mut prev = p.get(0, 0);
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            adamw_step(&mut p, &g, &mut st, &hp, lr).unwrap();
            last_delta = prev - p.get(0, 0);
            prev = p.get(0, 0);
        }
        assert!(
            (last_delta - lr).abs() < 1e-3 * lr,
            "normalized step {last_delta:e} should match lr {lr:e}"
        );
        // Low-precision moments stay within a couple percent of the same
        // fixed point (the moment grids freeze the running estimates a few
        // ulps below their limits).
        let mut p2 = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let mut st2 = AdamWState::low_precision(1, 1);
        let mut prev2 = p2.get(0, 0);
        let mut last2 = 0.0;
        for _ in 0..2000 {
            adamw_step(&mut p2, &g, &mut st2, &hp, lr).unwrap();
            last2 = prev2 - p2.get(0, 0);
            prev2 = p2.get(0, 0);
        }
        assert!(
            (last2 - lr).abs() < 3e-2 * lr,
            "low-precision step {last2:e} strays too far from lr {lr:e}"
        );
    }

    #[test]
    fn low_precision_tracks_wide_on_quadratic_bowl() {
        // f(x) = x^2/2, grad = x. Run the same trajectory with wide and
        // low-precision moments; both settle into the lr-sized dither band
        // around the minimum and the final losses agree closely.
        let hp = HyperParams { weight_decay: 0.0, ..HyperParams::default() };
        let lr = 0.01;
        let run = |wide: bool| -> f64 {
            let mut p = Tensor::from_vec(1, 1, vec![3.0]).unwrap();
            let mut st = if wide {
                AdamWState::wide(1, 1)
            } else {
                AdamWState::low_precision(1, 1)
            };
            for _ in 0..500 {
                let g = p.clone();
                adamw_step(&mut p, &g, &mut st, &hp, lr).unwrap();
            }
            0.5 * p.get(0, 0) * p.get(0, 0)
        };
        let loss_wide = run(true);
        let loss_lowp = run(false);
        assert!(
            (loss_wide - loss_lowp).abs() < 1e-3,
            "wide {loss_wide:e} vs low-precision {loss_lowp:e}"
        );
    }

    #[test]
    fn moments_stay_on_their_storage_grids_and_variance_stays_clamped() {
        let hp = HyperParams { weight_decay: 0.0, ..HyperParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Tensor::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let mut st = AdamWState::low_precision(4, 4);
        for _ in 0..50 {
            let g = Tensor::from_fn(4, 4, |_, _| rng.gen_range(-30.0..30.0));
            adamw_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        }
        for &m in st.mean.data() {
            assert!(M169.is_representable(m), "mean element {m:e} off the 1-6-9 grid");
        }
        for &v in st.variance.data() {
            assert!(M0610.is_representable(v), "variance element {v:e} off the 0-6-10 grid");
            assert!((0.0..=5.0).contains(&v), "variance element {v:e} escaped the clamp");
        }
    }

    #[test]
    fn variance_clamp_caps_a_gradient_burst() {
        let hp = HyperParams { weight_decay: 0.0, ..HyperParams::default() };
        let mut p = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Tensor::from_vec(1, 1, vec![100.0]).unwrap();
        let mut st = AdamWState::low_precision(1, 1);
        adamw_step(&mut p, &g, &mut st, &hp, 1e-3).unwrap();
        // Unclamped the second moment would be 0.04 * 10000 = 400.
        assert_eq!(st.variance.get(0, 0), 5.0);
    }

    #[test]
    fn global_norm_examples() {
        assert_eq!(global_norm(&[9.0, 16.0], &[], false), 5.0);
        assert_eq!(global_norm(&[9.0], &[16.0], false), 5.0);
        assert!(global_norm(&[9.0], &[], true).is_infinite());
        assert!(global_norm(&[f64::NAN], &[], false).is_infinite());
        assert!(update_is_skipped(f64::INFINITY));
        assert!(!update_is_skipped(3.0));
    }

    #[test]
    fn factor_norm_equals_decompressed_norm_for_orthonormal_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = Tensor::from_fn(16, 3, |_, _| rng.gen_range(-1.0..1.0));
        let p = householder_orthogonalize(&raw, 0.0);
        let q = Tensor::from_fn(10, 3, |_, _| rng.gen_range(-2.0..2.0));
        let d = p.matmul(&q, false, true).unwrap();
        let direct = d.frobenius_norm();
        let shortcut = global_norm(&[q.sum_of_squares()], &[], false);
        assert!(
            (direct - shortcut).abs() <= 1e-5 * direct,
            "direct {direct:e} vs shortcut {shortcut:e}"
        );
    }

    #[test]
    fn clipping_scales_only_above_threshold() {
        let mut grads = vec![Tensor::from_vec(2, 2, vec![4.0, 4.0, 4.0, 4.0]).unwrap()];
        let norm = global_norm(&[], &[grads[0].sum_of_squares()], false);
        assert_eq!(norm, 8.0);
        clip_by_global_norm(&mut grads, norm, 4.0);
        assert_eq!(grads[0].data(), &[2.0, 2.0, 2.0, 2.0], "norm 8 halves every entry");
        let after = global_norm(&[], &[grads[0].sum_of_squares()], false);
        assert!((after - 4.0).abs() < 1e-9);

        let mut small = vec![Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap()];
        clip_by_global_norm(&mut small, 2.0f64.sqrt(), 4.0);
        assert_eq!(small[0].data(), &[1.0, 1.0], "norm below threshold is untouched");

        let mut frozen = vec![Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap()];
        clip_by_global_norm(&mut frozen, f64::INFINITY, 4.0);
        assert_eq!(frozen[0].data(), &[1.0, 1.0], "infinite norm means skip, not rescale");
    }

    #[test]
    fn clipped_norm_equals_min_of_norm_and_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut grads = vec![
                Tensor::from_fn(3, 4, |_, _| rng.gen_range(-3.0..3.0)),
                Tensor::from_fn(2, 2, |_, _| rng.gen_range(-3.0..3.0)),
            ];
            let sq: Vec<f64> = grads.iter().map(|g| g.sum_of_squares()).collect();
            let norm = global_norm(&[], &sq, false);
            clip_by_global_norm(&mut grads, norm, 4.0);
            let sq2: Vec<f64> = grads.iter().map(|g| g.sum_of_squares()).collect();
            let after = global_norm(&[], &sq2, false);
            assert!(
                (after - norm.min(4.0)).abs() < 1e-9,
                "post-clip norm {after} vs min({norm}, 4)"
            );
        }
    }

    #[test]
    fn ewia_applies_only_on_interval_boundaries() {
        let params = Tensor::from_vec(1, 1, vec![1.0]).unwrap();
        let mut avg = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        ewia_update(&mut avg, &params, 0.99, 25, 25).unwrap();
        assert!((avg.get(0, 0) - 0.01).abs() < 1e-15);
        let held = avg.get(0, 0);
        ewia_update(&mut avg, &params, 0.99, 26, 25).unwrap();
        assert_eq!(avg.get(0, 0), held, "off-boundary steps leave the average alone");
    }

    #[test]
    fn ewia_gap_shrinks_geometrically() {
        let params = Tensor::from_vec(1, 1, vec![1.0]).unwrap();
        let mut avg = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let mut prev_gap = 1.0;
        for copy in 1..=40u64 {
            ewia_update(&mut avg, &params, 0.99, copy * 25, 25).unwrap();
            let gap = 1.0 - avg.get(0, 0);
            assert!(
                (gap / prev_gap - 0.99).abs() < 1e-12,
                "copy {copy}: gap ratio {} != 0.99",
                gap / prev_gap
            );
            prev_gap = gap;
        }
    }

    #[test]
    fn cosine_schedule_matches_closed_form() {
        let kl = Schedule::new(ScheduleKind::Cosine, 0.0, 6.6, 5000).unwrap();
        assert!(kl.value_at(0).abs() < 1e-12);
        assert!((kl.value_at(5000) - 6.6).abs() < 1e-12);
        assert!((kl.value_at(2500) - 3.3).abs() < 1e-12);
        assert!((kl.value_at(9000) - 6.6).abs() < 1e-12, "constant past the duration");

        let tau = Schedule::new(ScheduleKind::Cosine, 1.0, 1.0 / 16.0, 150000).unwrap();
        assert!((tau.value_at(0) - 1.0).abs() < 1e-12);
        assert!((tau.value_at(150000) - 1.0 / 16.0).abs() < 1e-12);
        assert!((tau.value_at(75000) - (1.0 + 1.0 / 16.0) / 2.0).abs() < 1e-12);

        let arbitrary = Schedule::new(ScheduleKind::Cosine, 2.0, 0.5, 999).unwrap();
        // t = T/2 is fractional here; check the exact formula instead.
        let t = 499u64;
        let frac = t as f64 / 999.0;
        let expect = 0.5 + 1.5 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        assert!((arbitrary.value_at(t) - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_warmup_matches_closed_form() {
        let s = Schedule::new(ScheduleKind::LinearWarmup, 0.0, 4e-4, 1000).unwrap();
        assert!(s.value_at(0).abs() < 1e-12);
        assert!((s.value_at(500) - 2e-4).abs() < 1e-12);
        assert!((s.value_at(1000) - 4e-4).abs() < 1e-12);
        assert!((s.value_at(5000) - 4e-4).abs() < 1e-12);
        assert!(Schedule::new(ScheduleKind::LinearWarmup, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn five_plateau_halvings_divide_by_exactly_thirty_two() {
        let start = 6.25e-4;
        let mut tracker = PlateauTracker::new(start, 3, 1e-4).unwrap();
        // A constant loss stream never improves, so every second full window
        // triggers a halving.
        let mut fed = 0;
        while tracker.halvings() < 5 {
            tracker.observe(1.0);
            fed += 1;
            assert!(fed < 1000, "halvings never reached five");
        }
        assert_eq!(tracker.value(), start / 32.0);
        assert_eq!(tracker.value().to_bits(), (start / 32.0).to_bits());
    }

    #[test]
    fn plateau_tracker_holds_while_loss_improves() {
        let mut tracker = PlateauTracker::new(1.0, 4, 1e-3).unwrap();
        let mut loss = 10.0;
        for _ in 0..64 {
            tracker.observe(loss);
            loss *= 0.9;
        }
        assert_eq!(tracker.halvings(), 0, "steady improvement must not halve");
        assert_eq!(tracker.value(), 1.0);
    }

    #[test]
    fn moment_format_constants_are_the_storage_formats() {
        let (mf, vf) = moment_formats();
        let st = AdamWState::low_precision(1, 1);
        assert_eq!(st.mean.format(), Some(&mf));
        assert_eq!(st.variance.format(), Some(&vf));
    }
}
