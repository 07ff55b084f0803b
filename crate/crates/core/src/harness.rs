//! Experiment runner binding every module into the full training loop: one
//! simulated step covers parameter prefetch (all-gather), per-GPU gradient
//! evaluation, intra-machine reduce-scatter, error-feedback compression with
//! grouped 16-bit all-reduces, the 32-bit path for uncompressed parameters,
//! out-of-band finiteness synchronization, global-norm clipping, the Adam
//! update or skip, the error-buffer decision table, and per-resblock scaler
//! stepping.
//!
//! The engine keeps one canonical copy of every parameter. That encodes the
//! symmetry invariant (all machines hold identical parameters after every
//! step) structurally: collectives return the same reduced values everywhere,
//! so per-machine copies could only ever diverge through a bug, which debug
//! assertions on the per-machine compression states would catch.
//!
//! Everything is deterministic in the run seed: data batches are generated
//! from a stateless counter-based seed chain per (step, machine, GPU), and
//! no iteration order depends on hashing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::{derive_seed, ClusterError, CollectiveLedger, SimCluster, Topology};
use crate::gradscale::{calibrate_divisor, scale_incoming, ResblockScaler};
use crate::lowp::{
    count_underflows, exponent_histogram, within_ulps, FloatFormatSpec, FP16, M0610, M169,
};
use crate::optim::{
    adamw_step, clip_by_global_norm, ewia_update, global_norm, update_is_skipped, AdamWState,
    HyperParams, OptimError, Schedule, ScheduleKind,
};
use crate::powersgd::{CompressError, CompressionConfig, LowRankState, QPolicy};
use crate::shardplan::{
    compression_rate, measured_rate, plan_elements, plan_factor_elements, plan_resblock,
    PlanError, TAG_P_FACTORS, TAG_Q_FACTORS, TAG_UNCOMPRESSED_BASELINE,
};
use crate::tensor::{Tensor, TensorError};
use crate::toymodel::{
    build_column_mask, build_conv_mask, build_row_mask, gumbel_noise_tensor, BranchPrecision,
    CodeMode, DvaeConfig, DvaeModel, SequenceLayout, SequenceModel, ToymodelError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown experiment: {0}")]
    UnknownExperiment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ToymodelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

fn unit_decay() -> f64 {
    1.0
}

/// Synthetic training task. Every task is sized to run in seconds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    /// Least squares on gaussian inputs against a fixed random weight matrix,
    /// with gaussian label noise. The weight matrix is the one compressed
    /// parameter, sharded along its rows.
    LinReg {
        features: usize,
        outputs: usize,
        batch: usize,
        noise: f64,
        /// Per-feature geometric input scale: feature j is drawn with
        /// standard deviation input_decay^j, so values below 1 give the
        /// gradient a decaying spectrum like a real model's. 1 = isotropic.
        #[serde(default = "unit_decay")]
        input_decay: f64,
    },
    /// A separable quadratic bowl with per-element curvatures and gaussian
    /// gradient noise standing in for minibatch sampling.
    QuadBowl {
        rows: usize,
        cols: usize,
        condition: f64,
        noise: f64,
    },
    /// Tiny text+image next-token transformer. Resblock weights take the
    /// compressed path; embeddings and prediction heads take the 32-bit
    /// uncompressed path.
    SeqModel {
        text_len: usize,
        grid_h: usize,
        grid_w: usize,
        d_model: usize,
        n_layers: usize,
        conv_kernel: usize,
        text_vocab: usize,
        image_vocab: usize,
        batch: usize,
    },
    /// Toy discrete autoencoder on procedurally generated grayscale patches.
    /// Runs wide and uncompressed; temperature and KL weight follow the
    /// configured schedules.
    Dvae {
        pixels: usize,
        grid: usize,
        vocab: usize,
        enc_hidden: usize,
        code_dim: usize,
        dec_hidden: usize,
        batch: usize,
        tau_start: f64,
        tau_end: f64,
        tau_steps: u64,
        beta_end: f64,
        beta_steps: u64,
    },
}

/// Low-rank gradient compression settings. `rank` is the machine-total rank;
/// each of the `gpus_per_machine` shards carries `rank / gpus_per_machine`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompressionSettings {
    pub rank: usize,
    pub epsilon: f64,
    pub p_scale: f64,
    pub q_scale: f64,
    pub q_policy: QPolicy,
    /// Keep the communicated factors wide instead of 16-bit (diagnostics).
    #[serde(default)]
    pub wide_factors: bool,
}

impl Default for CompressionSettings {
    fn default() -> Self {
        CompressionSettings {
            rank: 2,
            epsilon: 1e-6,
            p_scale: 1.0,
            q_scale: 1.0,
            q_policy: QPolicy::WarmStart,
            wide_factors: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    /// Linear learning-rate warmup over this many steps (0 disables it).
    pub warmup_steps: u64,
    pub hyper: HyperParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PrecisionSettings {
    pub branch: BranchPrecision,
}

/// Complete description of one training run. Serializes to a plain JSON
/// document; see the repository README for the schema.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub n_machines: usize,
    pub gpus_per_machine: usize,
    pub seed: u64,
    pub steps: u64,
    pub task: TaskConfig,
    pub compression: Option<CompressionSettings>,
    pub optim: OptimSettings,
    pub precision: PrecisionSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let m = self.gpus_per_machine;
        if self.n_machines == 0 || m == 0 {
            return Err(HarnessError::Config(
                "need at least one machine and one GPU per machine".into(),
            ));
        }
        self.optim.hyper.validate()?;
        if !(self.optim.lr > 0.0) {
            return Err(HarnessError::Config("learning rate must be positive".into()));
        }
        match &self.task {
            TaskConfig::LinReg { features, outputs, batch, noise, input_decay } => {
                if *features == 0 || *outputs == 0 || *batch == 0 {
                    return Err(HarnessError::Config("regression dimensions must be positive".into()));
                }
                if features % m != 0 {
                    return Err(HarnessError::Config(format!(
                        "features ({features}) must divide evenly over {m} GPUs"
                    )));
                }
                if *noise < 0.0 {
                    return Err(HarnessError::Config("noise must be >= 0".into()));
                }
                if !(*input_decay > 0.0 && input_decay.is_finite()) {
                    return Err(HarnessError::Config("input_decay must be positive and finite".into()));
                }
            }
            TaskConfig::QuadBowl { rows, cols, condition, noise } => {
                if *rows == 0 || *cols == 0 {
                    return Err(HarnessError::Config("bowl dimensions must be positive".into()));
                }
                if rows % m != 0 {
                    return Err(HarnessError::Config(format!(
                        "rows ({rows}) must divide evenly over {m} GPUs"
                    )));
                }
                if !(*condition >= 1.0) {
                    return Err(HarnessError::Config("condition number must be >= 1".into()));
                }
                if *noise < 0.0 {
                    return Err(HarnessError::Config("noise must be >= 0".into()));
                }
            }
            TaskConfig::SeqModel {
                text_len, grid_h, grid_w, d_model, n_layers, text_vocab, image_vocab, batch, ..
            } => {
                if *text_len == 0 || *grid_h == 0 || *grid_w == 0 || *batch == 0 {
                    return Err(HarnessError::Config("sequence dimensions must be positive".into()));
                }
                if *n_layers == 0 {
                    return Err(HarnessError::Config("need at least one layer".into()));
                }
                if *text_vocab < 2 || *image_vocab < 2 {
                    return Err(HarnessError::Config("vocabularies need at least two entries".into()));
                }
                if d_model % m != 0 || (4 * d_model) % m != 0 {
                    return Err(HarnessError::Config(format!(
                        "d_model ({d_model}) and 4*d_model must divide evenly over {m} GPUs"
                    )));
                }
            }
            TaskConfig::Dvae { pixels, grid, vocab, batch, tau_start, tau_end, .. } => {
                if *pixels == 0 || *grid == 0 || *vocab < 2 || *batch == 0 {
                    return Err(HarnessError::Config("autoencoder dimensions must be positive".into()));
                }
                let side = (*pixels as f64).sqrt() as usize;
                if side * side != *pixels {
                    return Err(HarnessError::Config("pixels must be a perfect square".into()));
                }
                if self.compression.is_some() {
                    return Err(HarnessError::Config(
                        "the autoencoder task uses only the uncompressed path".into(),
                    ));
                }
                if self.precision.branch != BranchPrecision::Wide {
                    return Err(HarnessError::Config(
                        "the autoencoder task runs with wide branch precision".into(),
                    ));
                }
                if !(*tau_start > 0.0 && *tau_end > 0.0) {
                    return Err(HarnessError::Config("temperatures must be positive".into()));
                }
            }
        }
        if let Some(cs) = &self.compression {
            if cs.rank == 0 {
                return Err(HarnessError::Config("rank must be at least 1".into()));
            }
            if cs.rank % m != 0 {
                return Err(HarnessError::Config(format!(
                    "rank ({}) must divide evenly over {m} GPUs",
                    cs.rank
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(fs::write(path, self.to_json_string()?)?)
    }
}

// ---------------------------------------------------------------------------
// Deterministic data generation
// ---------------------------------------------------------------------------

const SALT_TASK: u64 = 0x7a51;
const SALT_DATA: u64 = 0xda7a;
const SALT_MODEL: u64 = 0x30de1;
const SALT_QSEED: u64 = 0x51ed;
const SALT_GUMBEL: u64 = 0x6073;

/// Stateless per-batch seed: every (step, machine, GPU) triple gets its own
/// stream, so resuming a run regenerates exactly the batches an
/// uninterrupted run would have seen.
pub fn batch_seed(run_seed: u64, step: u64, machine: usize, gpu: usize) -> u64 {
    let s = derive_seed(run_seed, SALT_DATA);
    let s = derive_seed(s, step);
    let s = derive_seed(s, machine as u64);
    derive_seed(s, gpu as u64)
}

fn gaussian_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let g: f64 = StandardNormal.sample(rng);
        g * std
    })
}

/// Gaussian design matrix and noisy targets for one regression batch.
pub fn linreg_batch(
    seed: u64,
    w_true: &Tensor,
    batch: usize,
    noise: f64,
    input_decay: f64,
) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_tensor(batch, w_true.rows(), 1.0, &mut rng);
    if input_decay != 1.0 {
        for j in 0..x.cols() {
            let s = input_decay.powi(j as i32);
            for i in 0..x.rows() {
                x.set(i, j, x.get(i, j) * s);
            }
        }
    }
    let clean = x.matmul(w_true, false, false).expect("shapes conform");
    let y = if noise > 0.0 {
        let eps = gaussian_tensor(batch, w_true.cols(), noise, &mut rng);
        clean.add(&eps).expect("same shape")
    } else {
        clean
    };
    (x, y)
}

/// Procedural grayscale patches: ramps, stripes, and soft blobs, values in
/// [0, 255]. One row per sample, `side * side` pixels each.
pub fn pattern_batch(seed: u64, side: usize, batch: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = side * side;
    let mut out = Tensor::zeros(batch, pixels);
    for b in 0..batch {
        let kind = rng.gen_range(0..3u32);
        match kind {
            0 => {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let c: f64 = rng.gen_range(-1.0..1.0);
                let off: f64 = rng.gen_range(0.2..0.8);
                for y in 0..side {
                    for x in 0..side {
                        let t = off
                            + 0.5 * (a * x as f64 + c * y as f64) / (side.max(2) - 1) as f64;
                        out.set(b, y * side + x, 255.0 * t.clamp(0.0, 1.0));
                    }
                }
            }
            1 => {
                let period = rng.gen_range(2..5usize);
                let phase = rng.gen_range(0..period);
                let vertical = rng.gen_bool(0.5);
                let hi: f64 = rng.gen_range(150.0..255.0);
                let lo: f64 = rng.gen_range(0.0..100.0);
                for y in 0..side {
                    for x in 0..side {
                        let k = if vertical { x } else { y };
                        let v = if (k + phase) % period < period / 2 { hi } else { lo };
                        out.set(b, y * side + x, v);
                    }
                }
            }
            _ => {
                let cx: f64 = rng.gen_range(1.0..side as f64 - 1.0);
                let cy: f64 = rng.gen_range(1.0..side as f64 - 1.0);
                let sigma: f64 = rng.gen_range(1.0..3.0);
                let hi: f64 = rng.gen_range(180.0..255.0);
                let lo: f64 = rng.gen_range(0.0..60.0);
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = lo + (hi - lo) * (-d2 / (2.0 * sigma * sigma)).exp();
                        out.set(b, y * side + x, v.clamp(0.0, 255.0));
                    }
                }
            }
        }
    }
    out
}

fn sample_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Deterministic position-shifted copy of the text tokens, so the sequence
/// task has real structure for the attention stack to learn instead of
/// irreducible uniform noise.
fn copy_image_tokens(text: &[usize], image_len: usize, image_vocab: usize) -> Vec<usize> {
    (0..image_len)
        .map(|j| (text[j % text.len()] + j) % image_vocab)
        .collect()
}

// ---------------------------------------------------------------------------
// Engine internals
// ---------------------------------------------------------------------------

/// One sharded slot of a compressed parameter: the shard one GPU ordinal
/// owns, with a per-machine compression state behind it.
struct CompSlot {
    /// Per-machine error-feedback states (index = machine).
    states: Vec<LowRankState>,
    /// Whether each machine's buffer was finite after this step's
    /// accumulation (consumed by the error-buffer decision table).
    buffer_finite: Vec<bool>,
}

/// A parameter whose gradients travel as low-rank factors (or, with
/// compression disabled, as 16/32-bit shard all-reduces).
struct CompParam {
    name: String,
    /// Index of the resblock this parameter belongs to (selects the scaler).
    block: usize,
    shard_axis: usize,
    param: Tensor,
    adam: AdamWState,
    ewia: Tensor,
    slots: Vec<CompSlot>,
}

/// A parameter on the always-32-bit path (embeddings, heads, autoencoder
/// weights).
struct UncompParam {
    name: String,
    param: Tensor,
    adam: AdamWState,
    ewia: Tensor,
}

enum TaskState {
    LinReg { w_true: Tensor },
    QuadBowl { curvature: Tensor, target: Tensor },
    Seq { model: SequenceModel },
    Dvae { model: DvaeModel, tau: Schedule, beta: Schedule },
}

/// Gradients and flags from one (machine, GPU) evaluation.
struct EvalOut {
    comp_grads: Vec<Tensor>,
    uncomp_grads: Vec<Tensor>,
    block_finite: Vec<bool>,
    loss: f64,
}

/// What one call to [`TrainEngine::train_step`] did.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// 0-based index of the executed step.
    pub step: u64,
    /// Mean training loss over every (machine, GPU) replica.
    pub loss: f64,
    /// The synchronized global gradient norm (infinite on skipped steps).
    pub global_norm: f64,
    pub skipped: bool,
    /// Per compressed parameter: the dense gradient actually transmitted
    /// this step (before clipping), in the parameter frame.
    pub applied: Vec<Tensor>,
}

pub struct TrainEngine {
    cfg: RunConfig,
    cluster: SimCluster,
    step: u64,
    skipped_steps: u64,
    loss_history: Vec<f64>,
    comp: Vec<CompParam>,
    uncomp: Vec<UncompParam>,
    scalers: Vec<ResblockScaler>,
    task: TaskState,
    /// Calibrated power-of-two divisor for the 16-bit whole-gradient
    /// all-reduce used when compression is disabled under fp16 precision.
    divisor: Option<f64>,
}

fn shard_of(t: &Tensor, axis: usize, slot: usize, slots: usize) -> Tensor {
    if axis == 0 {
        let step = t.rows() / slots;
        t.slice_rows(slot * step, (slot + 1) * step)
    } else {
        let step = t.cols() / slots;
        t.slice_cols(slot * step, (slot + 1) * step)
    }
}

/// Multiply only when the factor is not exactly one, so wide degenerate
/// configurations stay bit-identical to a plain loop.
fn scale_unless_unit(t: &Tensor, k: f64) -> Tensor {
    if k == 1.0 {
        t.widened()
    } else {
        t.scale(k)
    }
}

impl TrainEngine {
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let n = cfg.n_machines;
        let m = cfg.gpus_per_machine;
        let replicas = (n * m) as u32;
        let cluster = SimCluster::new(Topology::new(n, m, cfg.seed));
        let wide = cfg.precision.branch == BranchPrecision::Wide;
        let model_seed = derive_seed(cfg.seed, SALT_MODEL);
        let task_seed = derive_seed(cfg.seed, SALT_TASK);

        let adam_for = |rows: usize, cols: usize| {
            if wide {
                AdamWState::wide(rows, cols)
            } else {
                AdamWState::low_precision(rows, cols)
            }
        };

        // Canonical parameters, split by communication path.
        let mut comp_specs: Vec<(String, usize, usize, Tensor)> = Vec::new();
        let mut uncomp_specs: Vec<(String, Tensor)> = Vec::new();
        let mut n_blocks = 0usize;
        let task = match &cfg.task {
            TaskConfig::LinReg { features, outputs, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
                let std = 1.0 / (*features as f64).sqrt();
                let w_true = gaussian_tensor(*features, *outputs, std, &mut rng);
                comp_specs.push(("w".into(), 0, 0, Tensor::zeros(*features, *outputs)));
                n_blocks = 1;
                TaskState::LinReg { w_true }
            }
            TaskConfig::QuadBowl { rows, cols, condition, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
                let curvature = Tensor::from_fn(*rows, *cols, |_, _| {
                    let u: f64 = rng.gen();
                    condition.powf(u)
                });
                let target = gaussian_tensor(*rows, *cols, 1.0, &mut rng);
                comp_specs.push(("w".into(), 0, 0, Tensor::zeros(*rows, *cols)));
                n_blocks = 1;
                TaskState::QuadBowl { curvature, target }
            }
            TaskConfig::SeqModel {
                text_len, grid_h, grid_w, d_model, n_layers, conv_kernel,
                text_vocab, image_vocab, ..
            } => {
                let layout = SequenceLayout::new(*text_len, *grid_h, *grid_w)?;
                let model = SequenceModel::new(
                    layout,
                    *text_vocab,
                    *image_vocab,
                    *d_model,
                    *n_layers,
                    *conv_kernel,
                    cfg.precision.branch,
                    model_seed,
                )?;
                for (b, block) in model.stack.blocks.iter().enumerate() {
                    for (name, param) in block.param_names().iter().zip(block.params()) {
                        let axis = if *name == "mlp_out" { 0 } else { 1 };
                        comp_specs.push((format!("b{b}.{name}"), b, axis, param.clone()));
                    }
                }
                n_blocks = model.stack.blocks.len();
                let s = &model.scheme;
                for (name, t) in [
                    ("text_tok", &s.text_tok),
                    ("text_pos", &s.text_pos),
                    ("text_pad", &s.text_pad),
                    ("image_tok", &s.image_tok),
                    ("row_emb", &s.row_emb),
                    ("col_emb", &s.col_emb),
                    ("text_head", &model.text_head),
                    ("image_head", &model.image_head),
                ] {
                    uncomp_specs.push((name.into(), t.clone()));
                }
                TaskState::Seq { model }
            }
            TaskConfig::Dvae {
                pixels, grid, vocab, enc_hidden, code_dim, dec_hidden,
                tau_start, tau_end, tau_steps, beta_end, beta_steps, ..
            } => {
                let dc = DvaeConfig {
                    pixels: *pixels,
                    grid: *grid,
                    vocab: *vocab,
                    enc_hidden: *enc_hidden,
                    code_dim: *code_dim,
                    dec_hidden: *dec_hidden,
                };
                let model = DvaeModel::new(dc, model_seed);
                for (name, t) in DvaeModel::param_names().iter().zip(model.params()) {
                    uncomp_specs.push(((*name).into(), t.clone()));
                }
                let tau = Schedule::new(ScheduleKind::Cosine, *tau_start, *tau_end, (*tau_steps).max(1))?;
                let beta = Schedule::new(ScheduleKind::LinearWarmup, 0.0, *beta_end, (*beta_steps).max(1))?;
                TaskState::Dvae { model, tau, beta }
            }
        };

        let mut comp = Vec::with_capacity(comp_specs.len());
        let mut shard_id = 0u64;
        for (name, block, shard_axis, param) in comp_specs {
            let (rows, cols) = param.shape();
            let shard_shape = if shard_axis == 0 {
                (rows / m, cols)
            } else {
                (rows, cols / m)
            };
            let mut slots = Vec::with_capacity(m);
            for _gpu in 0..m {
                let states = if let Some(cs) = &cfg.compression {
                    let ccfg = CompressionConfig {
                        rank_r: cs.rank / m,
                        epsilon: cs.epsilon,
                        p_scale: cs.p_scale,
                        q_scale: cs.q_scale,
                        q_seed: derive_seed(cfg.seed, SALT_QSEED),
                        q_policy: cs.q_policy,
                        factor_format: if cs.wide_factors { None } else { Some(M169) },
                    };
                    (0..n)
                        .map(|_| LowRankState::new(shard_shape, ccfg, shard_id))
                        .collect::<Result<Vec<_>, _>>()?
                } else {
                    Vec::new()
                };
                shard_id += 1;
                slots.push(CompSlot { states, buffer_finite: vec![true; n] });
            }
            comp.push(CompParam {
                adam: adam_for(rows, cols),
                ewia: param.clone(),
                name,
                block,
                shard_axis,
                param,
                slots,
            });
        }

        let uncomp = uncomp_specs
            .into_iter()
            .map(|(name, param)| UncompParam {
                adam: adam_for(param.rows(), param.cols()),
                ewia: param.clone(),
                name,
                param,
            })
            .collect();

        let scalers = (0..n_blocks).map(|_| ResblockScaler::new(replicas)).collect();

        Ok(TrainEngine {
            cfg,
            cluster,
            step: 0,
            skipped_steps: 0,
            loss_history: Vec::new(),
            comp,
            uncomp,
            scalers,
            task,
            divisor: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn ledger(&self) -> &CollectiveLedger {
        &self.cluster.ledger
    }

    pub fn scaler_scales(&self) -> Vec<f64> {
        self.scalers.iter().map(|s| s.scale()).collect()
    }

    /// Calibrated divisor for the 16-bit uncompressed gradient all-reduce,
    /// once the first fp16 step under disabled compression has run.
    pub fn calibrated_divisor(&self) -> Option<f64> {
        self.divisor
    }

    /// Snapshot of every canonical parameter, compressed family first.
    pub fn params_snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .comp
            .iter()
            .map(|p| (p.name.clone(), p.param.clone()))
            .collect();
        out.extend(self.uncomp.iter().map(|p| (p.name.clone(), p.param.clone())));
        out
    }

    pub fn dvae_model(&self) -> Option<&DvaeModel> {
        match &self.task {
            TaskState::Dvae { model, .. } => Some(model),
            _ => None,
        }
    }

    /// Expected mean-squared prediction error of the current regression
    /// weights on fresh data, computed in closed form.
    pub fn linreg_expected_mse(&self) -> Option<f64> {
        match (&self.task, &self.cfg.task) {
            (
                TaskState::LinReg { w_true },
                TaskConfig::LinReg { noise, outputs, input_decay, .. },
            ) => {
                // E[(x·dW)^2] weights feature j's row of dW by its input
                // variance input_decay^(2j).
                let delta = self.comp[0].param.sub(w_true).expect("same shape");
                let mut sum = 0.0;
                for i in 0..delta.rows() {
                    let s2 = input_decay.powi(2 * i as i32);
                    for j in 0..delta.cols() {
                        let d = delta.get(i, j);
                        sum += s2 * d * d;
                    }
                }
                Some(sum / *outputs as f64 + noise * noise)
            }
            _ => None,
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        let base = self.cfg.optim.lr;
        let warmup = self.cfg.optim.warmup_steps;
        if warmup == 0 {
            base
        } else {
            base * (((step + 1) as f64) / (warmup as f64)).min(1.0)
        }
    }

    /// Per-resblock scales handed to the backward pass. Wide runs have
    /// nothing to protect from underflow, so they use unit scales and stay
    /// bit-identical to an unscaled loop.
    fn block_scales(&self) -> Vec<f64> {
        match self.cfg.precision.branch {
            BranchPrecision::Wide => vec![1.0; self.scalers.len()],
            BranchPrecision::Fp16 => self.scalers.iter().map(|s| s.scale()).collect(),
        }
    }

    fn factor_format(&self) -> Option<FloatFormatSpec> {
        match &self.cfg.compression {
            Some(cs) if cs.wide_factors => None,
            Some(_) => Some(M169),
            None => None,
        }
    }

    /// Evaluate loss and gradients for one (machine, GPU) replica on its own
    /// batch. Compressed-path gradients come back carrying their resblock
    /// scale under fp16 precision.
    fn eval_replica(
        &self,
        gathered: &[Tensor],
        scales: &[f64],
        machine: usize,
        gpu: usize,
    ) -> Result<EvalOut, HarnessError> {
        let seed = batch_seed(self.cfg.seed, self.step, machine, gpu);
        let fp16 = self.cfg.precision.branch == BranchPrecision::Fp16;
        match (&self.task, &self.cfg.task) {
            (
                TaskState::LinReg { w_true },
                TaskConfig::LinReg { outputs, batch, noise, input_decay, .. },
            ) => {
                let w = &gathered[0];
                let (x, y) = linreg_batch(seed, w_true, *batch, *noise, *input_decay);
                let pred = x.matmul(w, false, false)?;
                let resid = pred.sub(&y)?;
                let count = (*batch * *outputs) as f64;
                let loss = resid.sum_of_squares() / count;
                let grad = x.matmul(&resid, true, false)?.scale(2.0 / count);
                let grad = if fp16 { scale_incoming(&grad, scales[0]) } else { grad };
                Ok(EvalOut {
                    block_finite: vec![grad.all_finite()],
                    comp_grads: vec![grad],
                    uncomp_grads: Vec::new(),
                    loss,
                })
            }
            (TaskState::QuadBowl { curvature, target }, TaskConfig::QuadBowl { noise, .. }) => {
                let w = &gathered[0];
                let delta = w.sub(target)?;
                let loss = 0.5 * delta.zip_map(curvature, |d, c| c * d * d)?.data().iter().sum::<f64>()
                    / delta.len() as f64;
                let mut grad = delta.zip_map(curvature, |d, c| c * d)?;
                if *noise > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let eps = gaussian_tensor(grad.rows(), grad.cols(), *noise, &mut rng);
                    grad = grad.add(&eps)?;
                }
                let grad = if fp16 { scale_incoming(&grad, scales[0]) } else { grad };
                Ok(EvalOut {
                    block_finite: vec![grad.all_finite()],
                    comp_grads: vec![grad],
                    uncomp_grads: Vec::new(),
                    loss,
                })
            }
            (TaskState::Seq { model }, TaskConfig::SeqModel { text_vocab, image_vocab, batch, .. }) => {
                let layout = model.scheme.layout;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut comp_sum: Option<Vec<Tensor>> = None;
                let mut uncomp_sum: Option<Vec<Tensor>> = None;
                let mut block_finite = vec![true; model.stack.blocks.len()];
                let mut loss_sum = 0.0;
                for _ in 0..*batch {
                    let text = sample_tokens(&mut rng, layout.text_len, *text_vocab);
                    let image = copy_image_tokens(&text, layout.image_len(), *image_vocab);
                    let (loss, grads) = model.loss_and_grads(&text, &image, scales)?;
                    loss_sum += loss;
                    for (dst, src) in block_finite.iter_mut().zip(&grads.finite_flags) {
                        *dst &= *src;
                    }
                    let flat: Vec<Tensor> = grads.stack.into_iter().flatten().collect();
                    let un = vec![
                        grads.text_tok, grads.text_pos, grads.text_pad, grads.image_tok,
                        grads.row_emb, grads.col_emb, grads.text_head, grads.image_head,
                    ];
                    comp_sum = Some(match comp_sum {
                        None => flat,
                        Some(acc) => acc
                            .iter()
                            .zip(&flat)
                            .map(|(a, b)| a.add(b))
                            .collect::<Result<_, _>>()?,
                    });
                    uncomp_sum = Some(match uncomp_sum {
                        None => un,
                        Some(acc) => acc
                            .iter()
                            .zip(&un)
                            .map(|(a, b)| a.add(b))
                            .collect::<Result<_, _>>()?,
                    });
                }
                let inv = 1.0 / *batch as f64;
                Ok(EvalOut {
                    comp_grads: comp_sum.expect("batch >= 1").iter().map(|t| scale_unless_unit(t, inv)).collect(),
                    uncomp_grads: uncomp_sum.expect("batch >= 1").iter().map(|t| scale_unless_unit(t, inv)).collect(),
                    block_finite,
                    loss: loss_sum * inv,
                })
            }
            (TaskState::Dvae { model, tau, beta }, TaskConfig::Dvae { batch, .. }) => {
                let cfgd = model.cfg;
                let side = (cfgd.pixels as f64).sqrt() as usize;
                let images = pattern_batch(seed, side, *batch);
                let noise = gumbel_noise_tensor(
                    *batch,
                    cfgd.grid * cfgd.vocab,
                    derive_seed(seed, SALT_GUMBEL),
                );
                let (loss, grads) = model.loss_and_grads(
                    &images,
                    tau.value_at(self.step),
                    beta.value_at(self.step),
                    Some(&noise),
                    CodeMode::Relaxed,
                    true,
                )?;
                let g = grads.expect("gradients requested");
                Ok(EvalOut {
                    comp_grads: Vec::new(),
                    uncomp_grads: vec![g.we1, g.we2, g.codebook, g.wd1, g.wd2],
                    block_finite: Vec::new(),
                    loss: loss.objective,
                })
            }
            _ => unreachable!("task state always matches task config"),
        }
    }

    /// Copy canonical (or freshly gathered) parameters into the scratch
    /// model the evaluations read from.
    fn sync_task_model(&mut self, gathered: &[Tensor]) {
        match &mut self.task {
            TaskState::Seq { model } => {
                let mut it = gathered.iter();
                for block in model.stack.blocks.iter_mut() {
                    for p in block.params_mut() {
                        *p = it.next().expect("one gathered tensor per stack parameter").clone();
                    }
                }
                let s = &mut model.scheme;
                let u = &self.uncomp;
                s.text_tok = u[0].param.clone();
                s.text_pos = u[1].param.clone();
                s.text_pad = u[2].param.clone();
                s.image_tok = u[3].param.clone();
                s.row_emb = u[4].param.clone();
                s.col_emb = u[5].param.clone();
                model.text_head = u[6].param.clone();
                model.image_head = u[7].param.clone();
            }
            TaskState::Dvae { model, .. } => {
                for (dst, src) in model.params_mut().into_iter().zip(&self.uncomp) {
                    *dst = src.param.clone();
                }
            }
            TaskState::LinReg { .. } | TaskState::QuadBowl { .. } => {}
        }
    }

    /// One full training step. See the module docs for the stage order.
    pub fn train_step(&mut self) -> Result<StepReport, HarnessError> {
        let n = self.cfg.n_machines;
        let m = self.cfg.gpus_per_machine;
        let fp16 = self.cfg.precision.branch == BranchPrecision::Fp16;
        let scales = self.block_scales();
        let compressed = self.cfg.compression.is_some();
        let factor_fmt = self.factor_format();

        // Parameter prefetch: each full matrix is materialized from its
        // shards by an intra-machine all-gather. Under fp16 the gathered
        // copy (what compute actually sees) is the 16-bit rounding of the
        // wide master parameters.
        let mut gathered = Vec::with_capacity(self.comp.len());
        for cp in &self.comp {
            let shards: Vec<Tensor> = (0..m)
                .map(|g| {
                    let s = shard_of(&cp.param, cp.shard_axis, g, m);
                    if fp16 {
                        s.stored_through(FP16).expect("fp16 encodes all finite params")
                    } else {
                        s
                    }
                })
                .collect();
            gathered.push(self.cluster.all_gather(&shards, cp.shard_axis, "param_prefetch")?);
        }
        self.sync_task_model(&gathered);

        // Per-replica forward/backward on replica-private batches.
        let mut evals: Vec<Vec<EvalOut>> = Vec::with_capacity(n);
        for machine in 0..n {
            let mut row = Vec::with_capacity(m);
            for gpu in 0..m {
                row.push(self.eval_replica(&gathered, &scales, machine, gpu)?);
            }
            evals.push(row);
        }
        let loss = evals
            .iter()
            .flat_map(|row| row.iter().map(|e| e.loss))
            .sum::<f64>()
            / (n * m) as f64;

        // Intra-machine reduce-scatter: machine j ends up with the mean of
        // its GPUs' gradients, sliced so GPU g holds shard g.
        let n_params = self.comp.len();
        let mut rs: Vec<Vec<Vec<Tensor>>> = Vec::with_capacity(n);
        for machine_evals in &evals {
            let mut per_param = Vec::with_capacity(n_params);
            for (p, cp) in self.comp.iter().enumerate() {
                let grads: Vec<Tensor> = machine_evals
                    .iter()
                    .map(|e| e.comp_grads[p].clone())
                    .collect();
                per_param.push(self.cluster.reduce_scatter_avg(
                    &grads,
                    cp.shard_axis,
                    "grad_reduce_scatter",
                )?);
            }
            rs.push(per_param);
        }

        // Machine-level backward verdict per resblock, then per-shard
        // finiteness of what the reduce-scatter produced.
        let block_fin: Vec<Vec<bool>> = evals
            .iter()
            .map(|row| {
                let mut acc = row[0].block_finite.clone();
                for e in &row[1..] {
                    for (a, b) in acc.iter_mut().zip(&e.block_finite) {
                        *a &= *b;
                    }
                }
                acc
            })
            .collect();
        let mut reduce_finite = vec![vec![vec![false; m]; n_params]; n];
        for j in 0..n {
            for (p, cp) in self.comp.iter().enumerate() {
                for s in 0..m {
                    reduce_finite[j][p][s] =
                        rs[j][p][s].all_finite() && block_fin[j][cp.block];
                }
            }
        }

        // Error accumulation, then the grouped P and Q exchanges, one group
        // per resblock. All machines see identical averaged factors, so the
        // orthogonalized P and the decompressed gradients agree everywhere.
        let mut q_bars: Vec<Vec<Option<Tensor>>> = vec![vec![None; m]; n_params];
        let mut pq_finite = vec![vec![true; m]; n_params];
        let mut q_norms_sq: Vec<f64> = Vec::new();
        let mut factor_dirty = false;
        if compressed {
            for (p, cp) in self.comp.iter_mut().enumerate() {
                for (s, slot) in cp.slots.iter_mut().enumerate() {
                    for j in 0..n {
                        slot.buffer_finite[j] = slot.states[j].accumulate_error(
                            &rs[j][p][s],
                            scales[cp.block],
                            reduce_finite[j][p][s],
                        );
                    }
                }
            }
            let q_scale = self.cfg.compression.as_ref().expect("compressed").q_scale;
            let n_blocks = self.scalers.len();
            for b in 0..n_blocks {
                let members: Vec<(usize, usize)> = self
                    .comp
                    .iter()
                    .enumerate()
                    .filter(|(_, cp)| cp.block == b)
                    .flat_map(|(p, _)| (0..m).map(move |s| (p, s)))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let step = self.step;
                let mut per_machine_p: Vec<Vec<Tensor>> = vec![Vec::new(); n];
                for &(p, s) in &members {
                    for (j, bufs) in per_machine_p.iter_mut().enumerate() {
                        bufs.push(self.comp[p].slots[s].states[j].compute_p(step));
                    }
                }
                let (p_bars, p_dirty) = self.cluster.grouped_all_reduce_mean_checked(
                    &per_machine_p,
                    factor_fmt.as_ref(),
                    true,
                    TAG_P_FACTORS,
                )?;
                for (k, &(p, s)) in members.iter().enumerate() {
                    for j in 0..n {
                        self.comp[p].slots[s].states[j].set_reduced_p(&p_bars[k]);
                    }
                }
                let mut per_machine_q: Vec<Vec<Tensor>> = vec![Vec::new(); n];
                for &(p, s) in &members {
                    for (j, bufs) in per_machine_q.iter_mut().enumerate() {
                        bufs.push(self.comp[p].slots[s].states[j].compute_q());
                    }
                }
                let (q_bars_b, q_dirty) = self.cluster.grouped_all_reduce_mean_checked(
                    &per_machine_q,
                    factor_fmt.as_ref(),
                    true,
                    TAG_Q_FACTORS,
                )?;
                for (k, &(p, s)) in members.iter().enumerate() {
                    for j in 0..n {
                        self.comp[p].slots[s].states[j].absorb_reduced_q(&q_bars_b[k]);
                    }
                    pq_finite[p][s] = !(p_dirty[k] || q_dirty[k]);
                    factor_dirty |= p_dirty[k] || q_dirty[k];
                    q_norms_sq.push(q_bars_b[k].sum_of_squares() / (q_scale * q_scale));
                    q_bars[p][s] = Some(q_bars_b[k].clone());
                }
            }
        }

        // Uncompressed parameters: machine-local GPU mean, then one grouped
        // 32-bit all-reduce.
        let mut per_machine_un: Vec<Vec<Tensor>> = Vec::with_capacity(n);
        for machine_evals in &evals {
            let mut bufs = Vec::with_capacity(self.uncomp.len());
            for u in 0..self.uncomp.len() {
                let mut acc = machine_evals[0].uncomp_grads[u].widened();
                for e in &machine_evals[1..] {
                    acc = acc.add(&e.uncomp_grads[u])?;
                }
                bufs.push(scale_unless_unit(&acc, 1.0 / m as f64));
            }
            per_machine_un.push(bufs);
        }
        let (uncomp_reduced, uncomp_dirty) = self.cluster.grouped_all_reduce_mean_checked(
            &per_machine_un,
            None,
            false,
            "uncompressed_grads",
        )?;

        // With compression disabled the compressed-family shards themselves
        // cross machines: 16-bit with a calibrated divisor under fp16, or
        // the wide 32-bit path otherwise.
        let mut plain_shards: Vec<Vec<Tensor>> = Vec::new();
        if !compressed && n_params > 0 {
            if fp16 && self.divisor.is_none() {
                let hists: Vec<_> = (0..n_params)
                    .map(|p| {
                        let mut values = Vec::new();
                        for machine in rs.iter() {
                            for shard in &machine[p] {
                                values.extend_from_slice(shard.data());
                            }
                        }
                        exponent_histogram(&values)
                    })
                    .collect();
                self.divisor = Some(
                    calibrate_divisor(&hists, &FP16)
                        .map(|c| c.pre_allreduce_divisor)
                        .unwrap_or(1.0),
                );
            }
            let divisor = if fp16 { self.divisor.expect("calibrated above") } else { 1.0 };
            let mut per_machine: Vec<Vec<Tensor>> = vec![Vec::new(); n];
            for p in 0..n_params {
                for s in 0..m {
                    for (j, bufs) in per_machine.iter_mut().enumerate() {
                        bufs.push(scale_unless_unit(&rs[j][p][s], 1.0 / divisor));
                    }
                }
            }
            let fmt = if fp16 { Some(&FP16) } else { None };
            let (reduced, dirty) = self.cluster.grouped_all_reduce_mean_checked(
                &per_machine,
                fmt,
                false,
                TAG_UNCOMPRESSED_BASELINE,
            )?;
            factor_dirty |= dirty.iter().any(|&d| d);
            let mut it = reduced.into_iter();
            for (p, cp) in self.comp.iter().enumerate() {
                let _ = p;
                let unscale = divisor / scales[cp.block];
                plain_shards.push(
                    (0..m)
                        .map(|_| scale_unless_unit(&it.next().expect("one shard per slot"), unscale))
                        .collect(),
                );
            }
        }

        // Finiteness synchronization: each machine contributes one bit per
        // shard slot. Filtering and clamping keep the in-band values finite,
        // so skipping has to be decided from these out-of-band flags.
        let mut synced_finite = vec![vec![true; m]; n_params];
        if n_params > 0 {
            let flags: Vec<Tensor> = (0..n)
                .map(|j| {
                    Tensor::from_fn(1, n_params * m, |_, k| {
                        if reduce_finite[j][k / m][k % m] { 1.0 } else { 0.0 }
                    })
                })
                .collect();
            let mean = self.cluster.all_reduce_mean(&flags, None, false, "flag_sync")?;
            for p in 0..n_params {
                for s in 0..m {
                    synced_finite[p][s] = mean.get(0, p * m + s) == 1.0;
                }
            }
        }
        let any_nonfinite = synced_finite.iter().flatten().any(|&f| !f)
            || factor_dirty
            || uncomp_dirty.iter().any(|&d| d);

        // Global norm over transmitted factors plus the 32-bit path.
        let mut uncomp_norms_sq: Vec<f64> =
            uncomp_reduced.iter().map(|t| t.sum_of_squares()).collect();
        if !compressed {
            for shards in &plain_shards {
                for sh in shards {
                    uncomp_norms_sq.push(sh.sum_of_squares());
                }
            }
        }
        let norm = global_norm(&q_norms_sq, &uncomp_norms_sq, any_nonfinite);
        let skipped = update_is_skipped(norm);

        // Dense transmitted gradients in the parameter frame. These exist
        // even on skipped steps because the error buffers settle against
        // what was transmitted, not against what was applied.
        let mut applied_shards: Vec<Vec<Tensor>> = Vec::with_capacity(n_params);
        for (p, cp) in self.comp.iter().enumerate() {
            if compressed {
                let mut shards = Vec::with_capacity(m);
                for (s, slot) in cp.slots.iter().enumerate() {
                    let q_bar = q_bars[p][s].as_ref().expect("set during the Q exchange");
                    let shard = slot.states[0].decompress(q_bar)?;
                    debug_assert!(
                        slot.states[1..].iter().all(|st| {
                            st.decompress(q_bar)
                                .map(|t| t.data() == shard.data())
                                .unwrap_or(false)
                        }),
                        "machines disagree on the decompressed gradient"
                    );
                    shards.push(shard);
                }
                applied_shards.push(shards);
            } else {
                applied_shards.push(plain_shards[p].clone());
            }
        }
        let mut applied: Vec<Tensor> = applied_shards
            .iter()
            .zip(&self.comp)
            .map(|(shards, cp)| Tensor::concat(shards, cp.shard_axis))
            .collect::<Result<_, _>>()?;

        // Clip and update, or skip both the parameters and the moments.
        if !skipped {
            let hp = self.cfg.optim.hyper;
            let lr = self.lr_at(self.step);
            let mut clipped_u: Vec<Tensor> = uncomp_reduced.clone();
            clip_by_global_norm(&mut applied, norm, hp.clip_threshold);
            clip_by_global_norm(&mut clipped_u, norm, hp.clip_threshold);
            for (cp, grad) in self.comp.iter_mut().zip(&applied) {
                adamw_step(&mut cp.param, grad, &mut cp.adam, &hp, lr)?;
                ewia_update(&mut cp.ewia, &cp.param, hp.ewia_decay, cp.adam.step, hp.ewia_interval)?;
            }
            for (up, grad) in self.uncomp.iter_mut().zip(&clipped_u) {
                adamw_step(&mut up.param, grad, &mut up.adam, &hp, lr)?;
                ewia_update(&mut up.ewia, &up.param, hp.ewia_decay, up.adam.step, hp.ewia_interval)?;
            }
        } else {
            self.skipped_steps += 1;
        }

        // Error-buffer decision table, per shard and machine.
        if compressed {
            for (p, cp) in self.comp.iter_mut().enumerate() {
                for (s, slot) in cp.slots.iter_mut().enumerate() {
                    let shard = &applied_shards[p][s];
                    for j in 0..n {
                        let fin = slot.buffer_finite[j];
                        slot.states[j].update_error(shard, pq_finite[p][s], fin);
                    }
                }
            }
        }

        // Scaler stepping from the synchronized per-resblock verdicts.
        for (b, scaler) in self.scalers.iter_mut().enumerate() {
            let mut fine = true;
            for (p, cp) in self.comp.iter().enumerate() {
                if cp.block == b {
                    fine &= synced_finite[p].iter().all(|&f| f);
                }
            }
            let _ = scaler.on_step(fine, self.step);
        }

        // Clipping mutated `applied` in place, so rebuild the pre-clip
        // transmission for the report.
        let transmitted: Vec<Tensor> = applied_shards
            .iter()
            .zip(&self.comp)
            .map(|(sh, cp)| Tensor::concat(sh, cp.shard_axis))
            .collect::<Result<_, _>>()?;
        let report = StepReport {
            step: self.step,
            loss,
            global_norm: norm,
            skipped,
            applied: transmitted,
        };
        self.loss_history.push(loss);
        self.step += 1;
        Ok(report)
    }

    pub fn run(&mut self, steps: u64) -> Result<Vec<StepReport>, HarnessError> {
        (0..steps).map(|_| self.train_step()).collect()
    }

    // -- checkpointing ------------------------------------------------------

    pub fn checkpoint(&self) -> Checkpoint {
        let comp = self
            .comp
            .iter()
            .map(|cp| {
                let slots = cp
                    .slots
                    .iter()
                    .map(|slot| {
                        let mut sum = slot.states[0].error_buffer().widened();
                        for st in &slot.states[1..] {
                            sum = sum.add(st.error_buffer()).expect("same shape");
                        }
                        debug_assert!(
                            slot.states[1..]
                                .iter()
                                .all(|st| st.q_multiplier().data() == slot.states[0].q_multiplier().data()),
                            "machines disagree on the Q multiplier"
                        );
                        SlotCheckpoint {
                            buffer_sum: TensorBits::from_tensor(&sum),
                            q_mult: TensorBits::from_tensor(slot.states[0].q_multiplier()),
                        }
                    })
                    .collect();
                ParamCheckpoint {
                    name: cp.name.clone(),
                    param: TensorBits::from_tensor(&cp.param),
                    mean: TensorBits::from_tensor(&cp.adam.mean),
                    variance: TensorBits::from_tensor(&cp.adam.variance),
                    adam_step: cp.adam.step,
                    ewia: TensorBits::from_tensor(&cp.ewia),
                    slots,
                }
            })
            .collect();
        let uncomp = self
            .uncomp
            .iter()
            .map(|up| ParamCheckpoint {
                name: up.name.clone(),
                param: TensorBits::from_tensor(&up.param),
                mean: TensorBits::from_tensor(&up.adam.mean),
                variance: TensorBits::from_tensor(&up.adam.variance),
                adam_step: up.adam.step,
                ewia: TensorBits::from_tensor(&up.ewia),
                slots: Vec::new(),
            })
            .collect();
        let scalers = self
            .scalers
            .iter()
            .map(|s| {
                let (scale, replicas, last_backoff, last_step) = s.state();
                ScalerSnapshot {
                    scale_bits: scale.to_bits(),
                    replica_count: replicas,
                    last_backoff_step: last_backoff,
                    last_step,
                }
            })
            .collect();
        Checkpoint {
            version: 1,
            n_machines: self.cfg.n_machines,
            gpus_per_machine: self.cfg.gpus_per_machine,
            seed: self.cfg.seed,
            step: self.step,
            skipped_steps: self.skipped_steps,
            compressed: comp,
            uncompressed: uncomp,
            scalers,
            divisor_bits: self.divisor.map(f64::to_bits),
            loss_history_bits: self.loss_history.iter().map(|l| l.to_bits()).collect(),
        }
    }

    /// Rebuild a run from a checkpoint. Per-machine error buffers are
    /// reconstructed as the stored cross-machine sum divided by the machine
    /// count and broadcast, which error correction tolerates because only
    /// the buffer sum feeds what gets transmitted.
    pub fn resume(cfg: RunConfig, ck: &Checkpoint) -> Result<Self, HarnessError> {
        if ck.version != 1 {
            return Err(HarnessError::Config(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if ck.n_machines != cfg.n_machines || ck.gpus_per_machine != cfg.gpus_per_machine {
            return Err(HarnessError::Config(format!(
                "checkpoint topology {}x{} does not match configured {}x{}",
                ck.n_machines, ck.gpus_per_machine, cfg.n_machines, cfg.gpus_per_machine
            )));
        }
        let mut engine = TrainEngine::new(cfg)?;
        if ck.compressed.len() != engine.comp.len() || ck.uncompressed.len() != engine.uncomp.len() {
            return Err(HarnessError::Config(
                "checkpoint parameter inventory does not match the task".into(),
            ));
        }
        if ck.scalers.len() != engine.scalers.len() {
            return Err(HarnessError::Config(
                "checkpoint scaler count does not match the task".into(),
            ));
        }
        let wide = engine.cfg.precision.branch == BranchPrecision::Wide;
        let n = engine.cfg.n_machines;
        for (cp, pc) in engine.comp.iter_mut().zip(&ck.compressed) {
            if cp.name != pc.name || cp.param.shape() != (pc.param.rows, pc.param.cols) {
                return Err(HarnessError::Config(format!(
                    "checkpoint parameter {} {:?} does not match expected {} {:?}",
                    pc.name,
                    (pc.param.rows, pc.param.cols),
                    cp.name,
                    cp.param.shape()
                )));
            }
            cp.param = pc.param.to_tensor()?;
            cp.adam = restore_adam(pc, wide)?;
            cp.ewia = pc.ewia.to_tensor()?;
            if !pc.slots.is_empty() {
                if pc.slots.len() != cp.slots.len() {
                    return Err(HarnessError::Config(format!(
                        "checkpoint shard count for {} does not match", cp.name
                    )));
                }
                for (slot, sc) in cp.slots.iter_mut().zip(&pc.slots) {
                    let sum = sc.buffer_sum.to_tensor()?;
                    let mean = sum.scale(1.0 / n as f64);
                    let copies = engine.cluster.broadcast(&mean, 0, "resume_buffers")?;
                    for (st, copy) in slot.states.iter_mut().zip(copies) {
                        st.restore_error_buffer(copy);
                        st.restore_q_multiplier(sc.q_mult.to_tensor()?);
                    }
                    slot.buffer_finite = vec![true; n];
                }
            }
        }
        for (up, pc) in engine.uncomp.iter_mut().zip(&ck.uncompressed) {
            if up.name != pc.name || up.param.shape() != (pc.param.rows, pc.param.cols) {
                return Err(HarnessError::Config(format!(
                    "checkpoint parameter {} {:?} does not match expected {} {:?}",
                    pc.name,
                    (pc.param.rows, pc.param.cols),
                    up.name,
                    up.param.shape()
                )));
            }
            up.param = pc.param.to_tensor()?;
            up.adam = restore_adam(pc, wide)?;
            up.ewia = pc.ewia.to_tensor()?;
        }
        for (s, snap) in engine.scalers.iter_mut().zip(&ck.scalers) {
            *s = ResblockScaler::from_state(
                f64::from_bits(snap.scale_bits),
                snap.replica_count,
                snap.last_backoff_step,
                snap.last_step,
            );
        }
        engine.step = ck.step;
        engine.skipped_steps = ck.skipped_steps;
        engine.loss_history = ck.loss_history_bits.iter().map(|&b| f64::from_bits(b)).collect();
        engine.divisor = ck.divisor_bits.map(f64::from_bits);
        Ok(engine)
    }
}

fn restore_adam(pc: &ParamCheckpoint, wide: bool) -> Result<AdamWState, HarnessError> {
    let mean = pc.mean.to_tensor()?;
    let variance = pc.variance.to_tensor()?;
    let (mean, variance) = if wide {
        (mean, variance)
    } else {
        (mean.stored_through(M169)?, variance.stored_through(M0610)?)
    };
    Ok(AdamWState { mean, variance, step: pc.adam_step })
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

/// Exact tensor snapshot: element bit patterns, so save/load round-trips are
/// bitwise even through JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorBits {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u64>,
}

impl TensorBits {
    pub fn from_tensor(t: &Tensor) -> Self {
        TensorBits {
            rows: t.rows(),
            cols: t.cols(),
            bits: t.data().iter().map(|v| v.to_bits()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor, HarnessError> {
        Ok(Tensor::from_vec(
            self.rows,
            self.cols,
            self.bits.iter().map(|&b| f64::from_bits(b)).collect(),
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SlotCheckpoint {
    /// Cross-machine sum of the shard's error buffers. Storing the sum
    /// instead of every machine's buffer costs nothing: error correction
    /// depends on the buffers only through their sum.
    pub buffer_sum: TensorBits,
    /// The multiplication matrix feeding the next P computation (identical
    /// on all machines by construction).
    pub q_mult: TensorBits,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamCheckpoint {
    pub name: String,
    pub param: TensorBits,
    pub mean: TensorBits,
    pub variance: TensorBits,
    pub adam_step: u64,
    pub ewia: TensorBits,
    pub slots: Vec<SlotCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScalerSnapshot {
    pub scale_bits: u64,
    pub replica_count: u32,
    pub last_backoff_step: Option<u64>,
    pub last_step: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub n_machines: usize,
    pub gpus_per_machine: usize,
    pub seed: u64,
    pub step: u64,
    pub skipped_steps: u64,
    pub compressed: Vec<ParamCheckpoint>,
    pub uncompressed: Vec<ParamCheckpoint>,
    pub scalers: Vec<ScalerSnapshot>,
    pub divisor_bits: Option<u64>,
    pub loss_history_bits: Vec<u64>,
}

impl Checkpoint {
    pub fn to_json_string(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(fs::write(path, self.to_json_string()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Experiment reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, details: String) -> Self {
        CheckOutcome { name: name.into(), passed, details }
    }
}

/// The result of one experiment recipe: pass/fail checks, named output files
/// (CSV, PGM, plain text), and a JSON summary.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub outcomes: Vec<CheckOutcome>,
    /// (file name, file content) pairs the CLI writes out verbatim.
    pub tables: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

impl ExperimentReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Run one named experiment recipe. Names match the CLI subcommands.
pub fn run_experiment(name: &str, seed: u64) -> Result<ExperimentReport, HarnessError> {
    match name {
        "compression-table" => compression_table_report(),
        "bandwidth-report" => bandwidth_report(seed),
        "qpolicy-ab" => qpolicy_ab_report(seed),
        "underflow-demo" => underflow_demo_report(seed),
        "rank-gap" => rank_gap_report(seed),
        "dvae-anneal" => dvae_anneal_report(seed),
        "resume-check" => resume_check_report(seed),
        "mask-dump" => mask_dump_report(),
        "format-inspect" => format_inspect_report(),
        other => Err(HarnessError::UnknownExperiment(other.into())),
    }
}

/// Run a configured training job and gather its trajectory into a report.
pub fn run_training(cfg: &RunConfig) -> Result<ExperimentReport, HarnessError> {
    let mut engine = TrainEngine::new(cfg.clone())?;
    let reports = engine.run(cfg.steps)?;
    let mut csv = String::from("step,loss,global_norm,skipped\n");
    for r in &reports {
        csv.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.global_norm, r.skipped));
    }
    let ledger = engine.ledger();
    let summary = json!({
        "steps": engine.step_count(),
        "skipped_steps": engine.skipped_steps(),
        "final_loss": reports.last().map(|r| r.loss),
        "logical_bytes_total": ledger.total_logical_bytes(),
        "bytes_by_tag": {
            "param_prefetch": ledger.bytes_tagged("param_prefetch"),
            "grad_reduce_scatter": ledger.bytes_tagged("grad_reduce_scatter"),
            "p_factors": ledger.bytes_tagged(TAG_P_FACTORS),
            "q_factors": ledger.bytes_tagged(TAG_Q_FACTORS),
            "uncompressed_grads": ledger.bytes_tagged("uncompressed_grads"),
            "uncompressed_baseline": ledger.bytes_tagged(TAG_UNCOMPRESSED_BASELINE),
            "flag_sync": ledger.bytes_tagged("flag_sync"),
        },
        "calibrated_divisor": engine.calibrated_divisor(),
    });
    let completed = engine.step_count() == cfg.steps;
    Ok(ExperimentReport {
        name: "train".into(),
        outcomes: vec![CheckOutcome::new(
            "run completed",
            completed,
            format!("{} of {} steps, {} skipped", engine.step_count(), cfg.steps, engine.skipped_steps()),
        )],
        tables: vec![("losses.csv".into(), csv)],
        summary,
    })
}

// ---------------------------------------------------------------------------
// Experiment recipes
// ---------------------------------------------------------------------------

/// Analytic compression rates for the published (d, r) pairs at 8 GPUs.
pub fn compression_table_report() -> Result<ExperimentReport, HarnessError> {
    let cases = [
        (1920usize, 512usize, 0.8333),
        (2688, 640, 0.8512),
        (3968, 896, 0.8589),
    ];
    let m = 8;
    let mut csv = String::from("d,r,m,rate,expected\n");
    let mut outcomes = Vec::new();
    let mut rates = Vec::new();
    for (d, r, expected) in cases {
        let rate = compression_rate(d, r, m);
        csv.push_str(&format!("{d},{r},{m},{rate:.6},{expected}\n"));
        outcomes.push(CheckOutcome::new(
            &format!("rate(d={d}, r={r})"),
            (rate - expected).abs() <= 5e-3,
            format!("analytic {rate:.4} vs published {expected:.4}"),
        ));
        rates.push(rate);
    }
    Ok(ExperimentReport {
        name: "compression-table".into(),
        outcomes,
        tables: vec![("compression_table.csv".into(), csv)],
        summary: json!({ "rates": rates, "gpus_per_machine": m }),
    })
}

/// One scheduled operation in the per-step pipeline model.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduledOp {
    pub slot: u64,
    pub op: String,
    pub resblock: usize,
}

/// A legal pipelined ordering of one step over `r_blocks` resblocks,
/// backward running from the last block to the first. Factor exchanges for
/// block b overlap the backward of block b-1; prefetch of block b-1 waits
/// for block b's reduce-scatter so at most two full parameter sets are ever
/// materialized.
pub fn build_pipeline_schedule(r_blocks: usize) -> Vec<ScheduledOp> {
    assert!(r_blocks >= 1, "need at least one resblock");
    let mut ops = Vec::new();
    fn push(ops: &mut Vec<ScheduledOp>, slot: u64, op: &str, b: usize) {
        ops.push(ScheduledOp { slot, op: op.into(), resblock: b });
    }
    push(&mut ops, 0, "prefetch", r_blocks - 1);
    for (i, b) in (0..r_blocks).rev().enumerate() {
        let t = 1 + 3 * i as u64;
        push(&mut ops, t, "backward", b);
        push(&mut ops, t + 1, "reduce_scatter", b);
        if b > 0 {
            push(&mut ops, t + 2, "prefetch", b - 1);
        }
        push(&mut ops, t + 2, "compute_p", b);
        push(&mut ops, t + 3, "allreduce_p", b);
        push(&mut ops, t + 4, "orthogonalize", b);
        push(&mut ops, t + 5, "compute_q", b);
        push(&mut ops, t + 6, "allreduce_q", b);
    }
    let last_exchange = ops
        .iter()
        .filter(|o| o.op == "allreduce_q")
        .map(|o| o.slot)
        .max()
        .expect("at least one block");
    push(&mut ops, last_exchange + 1, "global_norm", 0);
    for (i, b) in (0..r_blocks).rev().enumerate() {
        push(&mut ops, last_exchange + 2 + i as u64, "decompress_adam", b);
    }
    ops
}

/// Verify every dependency in a schedule runs strictly after what it needs.
pub fn validate_schedule(ops: &[ScheduledOp]) -> Result<(), String> {
    let slot = |op: &str, b: usize| -> Result<u64, String> {
        ops.iter()
            .find(|o| o.op == op && o.resblock == b)
            .map(|o| o.slot)
            .ok_or_else(|| format!("missing {op} for resblock {b}"))
    };
    let blocks: Vec<usize> = {
        let mut bs: Vec<usize> = ops.iter().filter(|o| o.op == "backward").map(|o| o.resblock).collect();
        bs.sort_unstable();
        bs.dedup();
        bs
    };
    let norm_slot = slot("global_norm", 0)?;
    for &b in &blocks {
        let bw = slot("backward", b)?;
        let rs = slot("reduce_scatter", b)?;
        let pf = slot("prefetch", b)?;
        let cp = slot("compute_p", b)?;
        let ap = slot("allreduce_p", b)?;
        let or = slot("orthogonalize", b)?;
        let cq = slot("compute_q", b)?;
        let aq = slot("allreduce_q", b)?;
        let ad = slot("decompress_adam", b)?;
        if pf >= bw {
            return Err(format!("resblock {b}: backward before its parameters arrive"));
        }
        if !(bw < rs && rs < cp && cp < ap && ap < or && or < cq && cq < aq) {
            return Err(format!("resblock {b}: factor pipeline out of order"));
        }
        if aq >= norm_slot {
            return Err(format!("resblock {b}: global norm before its Q exchange"));
        }
        if ad <= norm_slot {
            return Err(format!("resblock {b}: update before the global norm"));
        }
        // Memory throttle: prefetching block b-1 must wait for block b's
        // reduce-scatter, which releases the full gradient.
        if b > 0 {
            let pf_prev = slot("prefetch", b - 1)?;
            if pf_prev < rs {
                return Err(format!(
                    "resblock {}: prefetched before resblock {b} finished its reduce-scatter",
                    b - 1
                ));
            }
        }
    }
    Ok(())
}

/// Largest number of full parameter sets live at once: parameters for block
/// b are live from its prefetch through its backward.
pub fn peak_live_param_sets(ops: &[ScheduledOp]) -> usize {
    let mut intervals = Vec::new();
    for o in ops.iter().filter(|o| o.op == "prefetch") {
        let end = ops
            .iter()
            .find(|e| e.op == "backward" && e.resblock == o.resblock)
            .map(|e| e.slot)
            .unwrap_or(o.slot);
        intervals.push((o.slot, end));
    }
    let mut peak = 0;
    for &(s, _) in &intervals {
        let live = intervals.iter().filter(|&&(a, b)| a <= s && s <= b).count();
        peak = peak.max(live);
    }
    peak
}

/// Simulated single-resblock shard exchange at d=64, m=8, r=8: the measured
/// ledger rate must equal the analytic one exactly, because both are ratios
/// of exact integer byte counts.
pub fn bandwidth_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let d = 64usize;
    let m = 8usize;
    let r = 8usize;
    let n_machines = 2usize;
    let plan = plan_resblock(d, m)?;
    let mut cluster = SimCluster::new(Topology::new(n_machines, m, seed));

    // Per (gpu ordinal, parameter): per-machine compression state over the
    // same shard shape; shard gradients are synthetic gaussians.
    let ccfg = CompressionConfig {
        rank_r: r / m,
        epsilon: 1e-6,
        p_scale: 1.0,
        q_scale: 1.0,
        q_seed: derive_seed(seed, SALT_QSEED),
        q_policy: QPolicy::Fixed,
        factor_format: Some(M169),
    };
    let mut states: Vec<Vec<LowRankState>> = Vec::new();
    let mut shard_grads: Vec<Vec<Tensor>> = vec![Vec::new(); n_machines];
    let mut shard_id = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_DATA));
    for spec in &plan {
        for _gpu in 0..m {
            states.push(
                (0..n_machines)
                    .map(|_| LowRankState::new(spec.per_gpu_shape, ccfg, shard_id))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            shard_id += 1;
            for grads in shard_grads.iter_mut() {
                grads.push(gaussian_tensor(
                    spec.per_gpu_shape.0,
                    spec.per_gpu_shape.1,
                    0.05,
                    &mut rng,
                ));
            }
        }
    }

    // The compressed exchange: error accumulation, grouped P and Q.
    let n_slots = states.len();
    for (k, slot_states) in states.iter_mut().enumerate() {
        for (j, st) in slot_states.iter_mut().enumerate() {
            let fin = st.accumulate_error(&shard_grads[j][k], 1.0, true);
            assert!(fin, "synthetic gradients are finite");
        }
    }
    let per_machine_p: Vec<Vec<Tensor>> = (0..n_machines)
        .map(|j| states.iter_mut().map(|ss| ss[j].compute_p(0)).collect())
        .collect();
    let (p_bars, _) =
        cluster.grouped_all_reduce_mean_checked(&per_machine_p, Some(&M169), true, TAG_P_FACTORS)?;
    for (k, ss) in states.iter_mut().enumerate() {
        for st in ss.iter_mut() {
            st.set_reduced_p(&p_bars[k]);
        }
    }
    let per_machine_q: Vec<Vec<Tensor>> = (0..n_machines)
        .map(|j| states.iter().map(|ss| ss[j].compute_q()).collect())
        .collect();
    let (_q_bars, _) =
        cluster.grouped_all_reduce_mean_checked(&per_machine_q, Some(&M169), true, TAG_Q_FACTORS)?;

    // The uncompressed baseline for the same shards, on the same 16-bit
    // wire width so byte ratios reduce to element ratios.
    let per_machine_base: Vec<Vec<Tensor>> = (0..n_machines)
        .map(|j| shard_grads[j].clone())
        .collect();
    let _ = cluster.grouped_all_reduce_mean_checked(
        &per_machine_base,
        Some(&M169),
        true,
        TAG_UNCOMPRESSED_BASELINE,
    )?;

    let measured = measured_rate(&cluster.ledger)?;
    let analytic = compression_rate(d, r, m);
    let factor_elems = plan_factor_elements(&plan, r, m)?;
    let grad_elems = plan_elements(&plan);

    // Schedule and memory annotations for a three-resblock pipeline.
    let schedule = build_pipeline_schedule(3);
    let legality = validate_schedule(&schedule);
    let peak_throttled = peak_live_param_sets(&schedule);
    let full_elems_per_block: usize = plan.iter().map(|s| s.full_shape.0 * s.full_shape.1).sum();

    let mut plan_csv = String::from("param,full_rows,full_cols,shard_axis,per_gpu_rows,per_gpu_cols,factor_elements\n");
    for spec in &plan {
        plan_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            spec.param_name,
            spec.full_shape.0,
            spec.full_shape.1,
            spec.shard_axis,
            spec.per_gpu_shape.0,
            spec.per_gpu_shape.1,
            spec.factor_elements(r / m),
        ));
    }
    let mut sched_csv = String::from("slot,op,resblock\n");
    for op in &schedule {
        sched_csv.push_str(&format!("{},{},{}\n", op.slot, op.op, op.resblock));
    }

    let outcomes = vec![
        CheckOutcome::new(
            "measured rate equals analytic rate exactly",
            measured == analytic,
            format!("measured {measured} vs analytic {analytic}"),
        ),
        CheckOutcome::new(
            "pipeline schedule is legal",
            legality.is_ok(),
            legality.clone().err().unwrap_or_else(|| "all dependencies ordered".into()),
        ),
        CheckOutcome::new(
            "prefetch throttle bounds live parameters",
            peak_throttled <= 2,
            format!("{peak_throttled} full parameter sets live at peak"),
        ),
    ];
    Ok(ExperimentReport {
        name: "bandwidth-report".into(),
        outcomes,
        tables: vec![
            ("shard_plan.csv".into(), plan_csv),
            ("schedule.csv".into(), sched_csv),
        ],
        summary: json!({
            "d": d, "m": m, "r": r,
            "measured_rate": measured,
            "analytic_rate": analytic,
            "factor_elements_per_gpu": factor_elems,
            "gradient_elements_per_gpu": grad_elems,
            "p_bytes": cluster.ledger.bytes_tagged(TAG_P_FACTORS),
            "q_bytes": cluster.ledger.bytes_tagged(TAG_Q_FACTORS),
            "baseline_bytes": cluster.ledger.bytes_tagged(TAG_UNCOMPRESSED_BASELINE),
            "slots": n_slots,
            "peak_live_param_sets_throttled": peak_throttled,
            "peak_live_elements_throttled": peak_throttled * full_elems_per_block,
            "unthrottled_param_sets": 3,
        }),
    })
}

fn linreg_config(
    seed: u64,
    outputs: usize,
    noise: f64,
    steps: u64,
    compression: Option<CompressionSettings>,
) -> RunConfig {
    RunConfig {
        n_machines: 2,
        gpus_per_machine: 1,
        seed,
        steps,
        task: TaskConfig::LinReg {
            features: 32,
            outputs,
            batch: 8,
            noise,
            input_decay: 1.0,
        },
        compression,
        optim: OptimSettings {
            lr: 0.05,
            warmup_steps: 0,
            hyper: HyperParams { weight_decay: 0.0, ..HyperParams::default() },
        },
        precision: PrecisionSettings { branch: BranchPrecision::Wide },
    }
}

/// Error-feedback convergence: rank-2 compressed regression lands within 10%
/// of the uncompressed baseline after 500 steps.
///
/// The inputs use geometrically decaying per-feature scales, so most of the
/// reachable loss lives in a handful of leading directions; a rank-2 update
/// stream with error feedback tracks the baseline closely there, and the
/// observation noise floor dominates what little it leaves behind.
pub fn linreg_convergence_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let steps = 500u64;
    let noise = 0.05f64;
    let build = |compression| {
        let mut cfg = linreg_config(seed, 8, noise, steps, compression);
        cfg.optim.lr = 0.02;
        if let TaskConfig::LinReg { input_decay, .. } = &mut cfg.task {
            *input_decay = 0.7;
        }
        cfg
    };
    let cfg_base = build(None);
    let cfg_comp = build(Some(CompressionSettings {
        rank: 2,
        ..CompressionSettings::default()
    }));
    let mut base = TrainEngine::new(cfg_base)?;
    let mut comp = TrainEngine::new(cfg_comp)?;
    let initial_mse = base.linreg_expected_mse().expect("regression task");
    base.run(steps)?;
    comp.run(steps)?;
    let mse_base = base.linreg_expected_mse().expect("regression task");
    let mse_comp = comp.linreg_expected_mse().expect("regression task");
    let ratio = mse_comp / mse_base;
    let tail_mean = |e: &TrainEngine| {
        let hist = e.loss_history();
        let tail = &hist[hist.len() - 10..];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let tail_base = tail_mean(&base);
    let tail_comp = tail_mean(&comp);

    let mut csv = String::from("step,loss_uncompressed,loss_compressed\n");
    for (i, (a, b)) in base.loss_history().iter().zip(comp.loss_history()).enumerate() {
        csv.push_str(&format!("{i},{a},{b}\n"));
    }
    let outcomes = vec![
        CheckOutcome::new(
            "baseline converges",
            mse_base <= 0.05 * initial_mse,
            format!("expected MSE {mse_base:.6} from {initial_mse:.4}"),
        ),
        CheckOutcome::new(
            "compressed within 10% of baseline",
            ratio <= 1.10,
            format!("MSE ratio {ratio:.4} (compressed {mse_comp:.6}, baseline {mse_base:.6})"),
        ),
    ];
    Ok(ExperimentReport {
        name: "linreg-convergence".into(),
        outcomes,
        tables: vec![("linreg_convergence.csv".into(), csv)],
        summary: json!({
            "steps": steps,
            "mse_uncompressed": mse_base,
            "mse_compressed": mse_comp,
            "ratio": ratio,
            "tail_loss_uncompressed": tail_base,
            "tail_loss_compressed": tail_comp,
            "tail_loss_ratio": tail_comp / tail_base,
            "noise_floor": noise * noise,
        }),
    })
}

/// A/B over the Q policies on one shared regression task: five seeds per
/// policy, mean tail loss compared across fixed, warm-start, and per-step
/// resampled projections.
///
/// Two checks are reported. The first, fixed within 5% of warm-start, holds
/// at this scale. The second asks resampling to cost at least 1.5x over
/// fixed; with error feedback absorbing the fresh-projection noise every
/// step, no such penalty exists on desk-size runs, so that check records a
/// miss with the measured ratio rather than being tuned into passing.
pub fn qpolicy_ab_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let steps = 500u64;
    let n_seeds = 5u64;
    let policies = [QPolicy::Fixed, QPolicy::WarmStart, QPolicy::Resample];
    let mut finals = vec![Vec::new(); policies.len()];
    let mut csv = String::from("policy,seed,final_loss\n");
    for k in 0..n_seeds {
        let run_seed = derive_seed(seed, k);
        for (i, policy) in policies.iter().enumerate() {
            let mut cfg = linreg_config(
                run_seed,
                4,
                0.01,
                steps,
                Some(CompressionSettings {
                    rank: 2,
                    q_policy: *policy,
                    ..CompressionSettings::default()
                }),
            );
            if let TaskConfig::LinReg { input_decay, .. } = &mut cfg.task {
                *input_decay = 0.9;
            }
            let mut engine = TrainEngine::new(cfg)?;
            engine.run(steps)?;
            // Average the tail to smooth single-batch noise in the final
            // reading.
            let hist = engine.loss_history();
            let tail = &hist[hist.len() - 10..];
            let fin = tail.iter().sum::<f64>() / tail.len() as f64;
            finals[i].push(fin);
            csv.push_str(&format!("{:?},{k},{fin}\n", policy));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fixed = mean(&finals[0]);
    let warm = mean(&finals[1]);
    let resample = mean(&finals[2]);
    let outcomes = vec![
        CheckOutcome::new(
            "fixed within 5% of warm-start",
            fixed <= 1.05 * warm,
            format!("fixed {fixed:.6} vs warm-start {warm:.6}"),
        ),
        CheckOutcome::new(
            "resampling pays at least 1.5x",
            resample >= 1.5 * fixed,
            format!(
                "resample {resample:.6} vs fixed {fixed:.6} (ratio {:.3}); error \
                 feedback keeps per-step redraws competitive at this scale",
                resample / fixed
            ),
        ),
    ];
    Ok(ExperimentReport {
        name: "qpolicy-ab".into(),
        outcomes,
        tables: vec![("qpolicy_ab.csv".into(), csv)],
        summary: json!({
            "steps": steps,
            "seeds": n_seeds,
            "mean_final_loss": { "fixed": fixed, "warm_start": warm, "resample": resample },
            "ratio_fixed_over_warm": fixed / warm,
            "ratio_resample_over_fixed": resample / fixed,
        }),
    })
}

/// Deep-chain underflow demonstration: with gradients decaying by half per
/// resblock, a fixed global scale chosen for the top of the chain rounds
/// most of the last block's gradient to zero in 16 bits, while per-resblock
/// scales grown to equilibrium lose nothing.
pub fn underflow_demo_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let blocks = 24usize;
    let elements = 256usize;
    let center_exp0 = -20.0f64;
    let spread = 2.0f64;
    let global_scale = 2f64.powi(16);
    let equil_steps = 12_000u64;

    // Per-block gradient magnitudes: log-uniform around a center that halves
    // with depth.
    let block_values: Vec<Vec<f64>> = (0..blocks)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b as u64));
            let center = center_exp0 - b as f64;
            (0..elements)
                .map(|_| {
                    let e: f64 = rng.gen_range(center - spread..center + spread);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * 2f64.powf(e)
                })
                .collect()
        })
        .collect();

    // Adaptive per-resblock scalers: grow on finite steps, back off if the
    // scaled block would overflow fp16.
    let mut scalers: Vec<ResblockScaler> = (0..blocks).map(|_| ResblockScaler::new(1)).collect();
    for step in 0..equil_steps {
        for (scaler, values) in scalers.iter_mut().zip(&block_values) {
            let s = scaler.scale();
            let overflow = values
                .iter()
                .any(|v| !FP16.quantize(v * s).is_finite());
            let _ = scaler.on_step(!overflow, step);
        }
    }

    let mut csv = String::from(
        "block,center_exponent,global_underflows,adaptive_underflows,adaptive_scale_log2\n",
    );
    let mut global_counts = Vec::new();
    let mut adaptive_counts = Vec::new();
    for (b, values) in block_values.iter().enumerate() {
        let scaled_global: Vec<f64> = values.iter().map(|v| v * global_scale).collect();
        let s = scalers[b].scale();
        let scaled_adaptive: Vec<f64> = values.iter().map(|v| v * s).collect();
        let g = count_underflows(&scaled_global, &FP16);
        let a = count_underflows(&scaled_adaptive, &FP16);
        csv.push_str(&format!(
            "{b},{},{g},{a},{:.3}\n",
            center_exp0 - b as f64,
            s.log2()
        ));
        global_counts.push(g);
        adaptive_counts.push(a);
    }
    let last_frac = *global_counts.last().expect("blocks > 0") as f64 / elements as f64;
    let adaptive_total: usize = adaptive_counts.iter().sum();
    let outcomes = vec![
        CheckOutcome::new(
            "global scaling underflows most of the last block",
            last_frac > 0.5,
            format!("{:.1}% of the last block rounds to zero", 100.0 * last_frac),
        ),
        CheckOutcome::new(
            "per-resblock scaling underflows nothing",
            adaptive_total == 0,
            format!("{adaptive_total} underflowed elements across all blocks"),
        ),
    ];
    Ok(ExperimentReport {
        name: "underflow-demo".into(),
        outcomes,
        tables: vec![("underflow_demo.csv".into(), csv)],
        summary: json!({
            "blocks": blocks,
            "elements_per_block": elements,
            "decay_per_block": 0.5,
            "global_scale_log2": 16,
            "equilibrium_steps": equil_steps,
            "last_block_global_underflow_fraction": last_frac,
            "adaptive_underflow_total": adaptive_total,
            "note": "this chain spans 27 binades, so one hand-tuned constant could also fit it inside fp16; the adaptive per-resblock scales find their levels without tuning and keep working as depth grows",
        }),
    })
}

/// Rank sweep on the regression task: too small a rank leaves a visible loss
/// gap against the uncompressed baseline at a fixed step budget.
pub fn rank_gap_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let steps = 200u64;
    let ranks = [1usize, 2, 4, 8];
    let base_cfg = linreg_config(seed, 8, 0.01, steps, None);
    let mut base = TrainEngine::new(base_cfg)?;
    base.run(steps)?;
    let tail_mean = |hist: &[f64]| {
        let tail = &hist[hist.len() - 10..];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let base_final = tail_mean(base.loss_history());

    let mut csv = String::from("rank,final_loss,expected_mse\n");
    csv.push_str(&format!("0,{base_final},{}\n", base.linreg_expected_mse().expect("regression")));
    let mut finals = Vec::new();
    for r in ranks {
        let cfg = linreg_config(
            seed,
            8,
            0.01,
            steps,
            Some(CompressionSettings { rank: r, ..CompressionSettings::default() }),
        );
        let mut engine = TrainEngine::new(cfg)?;
        engine.run(steps)?;
        let fin = tail_mean(engine.loss_history());
        csv.push_str(&format!(
            "{r},{fin},{}\n",
            engine.linreg_expected_mse().expect("regression")
        ));
        finals.push(fin);
    }
    let outcomes = vec![CheckOutcome::new(
        "higher rank closes the loss gap",
        finals[ranks.len() - 1] <= finals[0],
        format!("rank 8 final {:.6} vs rank 1 final {:.6}", finals[ranks.len() - 1], finals[0]),
    )];
    Ok(ExperimentReport {
        name: "rank-gap".into(),
        outcomes,
        tables: vec![("rank_gap.csv".into(), csv)],
        summary: json!({
            "steps": steps,
            "uncompressed_final": base_final,
            "ranks": ranks,
            "final_losses": finals,
        }),
    })
}

/// Gap between the relaxed and hard objectives of a trained toy autoencoder
/// on held-out data, evaluated with the same Gumbel noise at both ends of
/// the temperature schedule: annealing toward small temperature shrinks it.
pub fn dvae_anneal_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let steps = 400u64;
    let cfg = RunConfig {
        n_machines: 1,
        gpus_per_machine: 1,
        seed,
        steps,
        task: TaskConfig::Dvae {
            pixels: 64,
            grid: 16,
            vocab: 32,
            enc_hidden: 32,
            code_dim: 16,
            dec_hidden: 64,
            batch: 16,
            tau_start: 1.0,
            tau_end: 1.0 / 16.0,
            tau_steps: steps,
            beta_end: 6.6,
            beta_steps: steps / 5,
        },
        compression: None,
        optim: OptimSettings { lr: 3e-3, warmup_steps: 20, hyper: HyperParams::dvae() },
        precision: PrecisionSettings { branch: BranchPrecision::Wide },
    };
    let mut engine = TrainEngine::new(cfg)?;
    engine.run(steps)?;
    let model = engine.dvae_model().expect("autoencoder task");

    let held_out = pattern_batch(derive_seed(seed, 0xe7a1), 8, 32);
    let beta = 6.6;

    // The non-relaxed objective draws codes from the encoder's categorical
    // posterior. With the argmax-of-(logits + Gumbel) construction that
    // sample shares the relaxation's noise, so it is the exact tau -> 0
    // limit of the relaxed objective; a vanishing temperature computes it
    // through the same code path. Each draw is evaluated at every
    // temperature with the same noise, and the paired differences are
    // averaged over draws so sampling scatter cancels instead of hiding the
    // temperature effect.
    let checkpoints = [1.0, 0.5, 0.25, 0.125, 1.0 / 16.0];
    let draws = 128u64;
    let mut mean_rel = vec![0.0f64; checkpoints.len()];
    let mut mean_abs = vec![0.0f64; checkpoints.len()];
    let mut mean_hard = 0.0f64;
    for k in 0..draws {
        let noise = gumbel_noise_tensor(
            32,
            model.cfg.grid * model.cfg.vocab,
            derive_seed(seed, 0x9015 + k),
        );
        let relaxed_at = |tau: f64| -> Result<f64, HarnessError> {
            let (loss, _) = model.loss_and_grads(
                &held_out,
                tau,
                beta,
                Some(&noise),
                CodeMode::Relaxed,
                false,
            )?;
            Ok(loss.objective)
        };
        let hard_k = relaxed_at(1e-6)?;
        mean_hard += hard_k / draws as f64;
        for (i, &tau) in checkpoints.iter().enumerate() {
            let rel_k = relaxed_at(tau)?;
            mean_rel[i] += rel_k / draws as f64;
            mean_abs[i] += (rel_k - hard_k).abs() / draws as f64;
        }
    }
    let hard_sampled = mean_hard;
    let (map_hard, _) = model.loss_and_grads(&held_out, 1.0, beta, None, CodeMode::Hard, false)?;

    let mut gaps = Vec::new();
    let mut gap_csv = String::from("tau,relaxed_objective,sampled_objective,gap,per_draw_error\n");
    for (i, &tau) in checkpoints.iter().enumerate() {
        let rel = mean_rel[i];
        let gap = (rel - hard_sampled).abs();
        gap_csv.push_str(&format!("{tau},{rel},{hard_sampled},{gap},{}\n", mean_abs[i]));
        gaps.push(gap);
    }
    let gap_hi = gaps[0];
    let gap_lo = *gaps.last().expect("checkpoints nonempty");
    // The averaged gap can pass through zero when the soft blend slightly
    // beats the hard draw at middle temperatures, so monotonicity is judged
    // on the per-draw error magnitude, which tracks how far the relaxation
    // sits from its own hard sample path by path.
    let monotone = mean_abs.windows(2).all(|w| w[1] <= w[0]);

    let mut csv = String::from("step,loss\n");
    for (i, l) in engine.loss_history().iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }

    let outcomes = vec![
        CheckOutcome::new(
            "gap shrinks as tau anneals to 1/16",
            gap_lo < gap_hi,
            format!("gap {gap_lo:.5} at tau=1/16 vs {gap_hi:.5} at tau=1"),
        ),
        CheckOutcome::new(
            "per-draw relaxation error decreases monotonically across the anneal checkpoints",
            monotone,
            format!("per-draw errors {mean_abs:?}"),
        ),
    ];
    Ok(ExperimentReport {
        name: "dvae-anneal".into(),
        outcomes,
        tables: vec![
            ("dvae_training.csv".into(), csv),
            ("dvae_gap.csv".into(), gap_csv),
        ],
        summary: json!({
            "steps": steps,
            "final_training_loss": engine.loss_history().last(),
            "gap_tau_1": gap_hi,
            "gap_tau_sixteenth": gap_lo,
            "sampled_objective": hard_sampled,
            "map_objective": map_hard.objective,
        }),
    })
}

struct PairedRun {
    roundtrip_bitwise: bool,
    mismatch_rejected: bool,
    within_one: bool,
    max_local_ulps: f64,
    max_tensor_ulps: f64,
    csv: String,
}

/// Save at `split`, resume, and compare the transmitted dense gradients of
/// the following steps against an uninterrupted run, elementwise in units
/// of the 16-bit buffer format's spacing at the values compared.
fn paired_resume_run(cfg: &RunConfig, split: u64, total: u64) -> Result<PairedRun, HarnessError> {
    let mut straight = TrainEngine::new(cfg.clone())?;
    let mut straight_reports = Vec::new();
    for _ in 0..total {
        straight_reports.push(straight.train_step()?);
    }

    let mut first = TrainEngine::new(cfg.clone())?;
    for _ in 0..split {
        first.train_step()?;
    }
    let ck = first.checkpoint();
    let ck_json = ck.to_json_string()?;
    let ck_back = Checkpoint::from_json_str(&ck_json)?;
    let roundtrip_bitwise = ck_back == ck;
    let mut resumed = TrainEngine::resume(cfg.clone(), &ck_back)?;
    let mut resumed_reports = Vec::new();
    for _ in split..total {
        resumed_reports.push(resumed.train_step()?);
    }

    // Per-element deviation in local format spacings, plus the coarser
    // whole-tensor metric (spacing at the tensor's largest magnitude).
    let mut csv = String::from("step,max_local_ulps,max_tensor_ulps\n");
    let mut max_local = 0.0f64;
    let mut max_tensor = 0.0f64;
    let mut within_one = true;
    for (r_res, r_str) in resumed_reports.iter().zip(&straight_reports[split as usize..]) {
        let mut step_local = 0.0f64;
        let mut step_tensor = 0.0f64;
        for (a, b) in r_res.applied.iter().zip(&r_str.applied) {
            let big = a
                .data()
                .iter()
                .chain(b.data())
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            let tensor_ulp = M169.ulp_at(big.max(M169.min_positive()));
            for (&x, &y) in a.data().iter().zip(b.data()) {
                if x == y {
                    continue;
                }
                within_one &= within_ulps(x, y, &M169, 1);
                let local = M169.ulp_at(x.abs().max(y.abs()).max(M169.min_positive()));
                step_local = step_local.max((x - y).abs() / local);
                step_tensor = step_tensor.max((x - y).abs() / tensor_ulp);
            }
        }
        csv.push_str(&format!("{},{step_local},{step_tensor}\n", r_res.step));
        max_local = max_local.max(step_local);
        max_tensor = max_tensor.max(step_tensor);
    }

    // Topology mismatch must refuse to resume.
    let mut wrong = cfg.clone();
    wrong.n_machines = cfg.n_machines + 1;
    let mismatch_rejected = TrainEngine::resume(wrong, &ck_back).is_err();

    Ok(PairedRun {
        roundtrip_bitwise,
        mismatch_rejected,
        within_one,
        max_local_ulps: max_local,
        max_tensor_ulps: max_tensor,
        csv,
    })
}

/// Paired-run checkpoint check. The transmitted gradient depends on the
/// per-machine error buffers only through their sum, so rebuilding every
/// machine's buffer as sum/N must reproduce the uninterrupted run. That
/// derivation is linear: it holds exactly when the factors stay wide, which
/// is the gated configuration here. With 16-bit factors each machine
/// quantizes its own addend before the average, the sum-dependence breaks
/// by an ulp per exchange, and error feedback then amplifies the difference
/// across steps; that variant is measured and reported alongside.
pub fn resume_check_report(seed: u64) -> Result<ExperimentReport, HarnessError> {
    let total = 20u64;
    let split = 10u64;
    let wide_cfg = linreg_config(
        seed,
        4,
        0.02,
        total,
        Some(CompressionSettings {
            rank: 2,
            wide_factors: true,
            ..CompressionSettings::default()
        }),
    );
    let wide = paired_resume_run(&wide_cfg, split, total)?;

    let quant_cfg = linreg_config(
        seed,
        4,
        0.02,
        total,
        Some(CompressionSettings { rank: 2, ..CompressionSettings::default() }),
    );
    let quant = paired_resume_run(&quant_cfg, split, total)?;

    let outcomes = vec![
        CheckOutcome::new(
            "checkpoint JSON round-trip is bitwise",
            wide.roundtrip_bitwise && quant.roundtrip_bitwise,
            "all tensor bit patterns and counters survived".into(),
        ),
        CheckOutcome::new(
            "topology mismatch is rejected",
            wide.mismatch_rejected,
            "resume with a different machine count errors out".into(),
        ),
        CheckOutcome::new(
            "post-resume gradients within 1 ulp per element",
            wide.within_one,
            format!(
                "max deviation {:.6} local ulps ({:.6} tensor ulps) over 10 steps",
                wide.max_local_ulps, wide.max_tensor_ulps
            ),
        ),
    ];
    Ok(ExperimentReport {
        name: "resume-check".into(),
        outcomes,
        tables: vec![
            ("resume_check.csv".into(), wide.csv),
            ("resume_check_quantized_factors.csv".into(), quant.csv),
        ],
        summary: json!({
            "split_step": split,
            "compared_steps": total - split,
            "max_local_ulps": wide.max_local_ulps,
            "max_tensor_ulps": wide.max_tensor_ulps,
            "quantized_factors_max_local_ulps": quant.max_local_ulps,
            "quantized_factors_max_tensor_ulps": quant.max_tensor_ulps,
            "note": "16-bit factors quantize each machine's addend before averaging, so the buffer-sum invariant holds only to an ulp per exchange and feedback amplifies the difference; the gated run keeps factors wide, where the invariant is exact",
        }),
    })
}

fn pgm_of_mask(mask: &crate::toymodel::MaskMatrix) -> String {
    let n = mask.len();
    let mut out = format!("P2\n{n} {n}\n255\n");
    for q in 0..n {
        let row: Vec<String> = (0..n)
            .map(|k| if mask.allowed(q, k) { "255".into() } else { "0".into() })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Emit the attention masks for the reference 6-token, 4x4-grid layout as
/// PGM images and ASCII art.
pub fn mask_dump_report() -> Result<ExperimentReport, HarnessError> {
    let layout = SequenceLayout::new(6, 4, 4)?;
    let row = build_row_mask(layout);
    let col = build_column_mask(layout, false);
    let col_t = build_column_mask(layout, true);
    let conv = build_conv_mask(layout, 3)?;
    let masks = [
        ("row", &row),
        ("column", &col),
        ("column_transposed", &col_t),
        ("conv3", &conv),
    ];
    let mut outcomes = Vec::new();
    let mut tables = Vec::new();
    let mut art = String::new();
    for (name, mask) in masks {
        outcomes.push(CheckOutcome::new(
            &format!("{name} mask is causal with full text visibility"),
            mask.is_causal() && mask.image_queries_cover_all_text() && mask.diagonal_is_allowed(),
            format!("{} queries", mask.len()),
        ));
        tables.push((format!("{name}.pgm"), pgm_of_mask(mask)));
        art.push_str(&format!("{name}:\n{}\n", mask.ascii_art()));
    }
    tables.push(("masks.txt".into(), art));
    Ok(ExperimentReport {
        name: "mask-dump".into(),
        outcomes,
        tables,
        summary: json!({ "text_len": 6, "grid": [4, 4], "conv_kernel": 3 }),
    })
}

/// Tabulate the three 16-bit formats and pin their headline constants.
pub fn format_inspect_report() -> Result<ExperimentReport, HarnessError> {
    let formats = [FP16, M169, M0610];
    let mut csv = String::from(
        "name,sign_bits,exponent_bits,significand_bits,bias,max_finite,min_positive,min_positive_normal,ulp_at_1,normals,subnormals\n",
    );
    for f in &formats {
        let census = f.census();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            f.name,
            f.sign_bits,
            f.exponent_bits,
            f.significand_bits,
            f.bias,
            f.max_finite(),
            f.min_positive(),
            f.min_positive_normal(),
            f.ulp_at(1.0),
            census.normal,
            census.subnormal,
        ));
    }
    let outcomes = vec![
        CheckOutcome::new(
            "fp16 ceiling",
            FP16.max_finite() == 65504.0,
            format!("max finite {}", FP16.max_finite()),
        ),
        CheckOutcome::new(
            "1-6-9 ceiling just under 16",
            M169.max_finite() == 15.96875,
            format!("max finite {}", M169.max_finite()),
        ),
        CheckOutcome::new(
            "1-6-9 spacing at one",
            M169.ulp_at(1.0) == 2f64.powi(-8),
            format!("ulp(1.0) = {}", M169.ulp_at(1.0)),
        ),
        CheckOutcome::new(
            "0-6-10 is unsigned",
            M0610.sign_bits == 0 && M0610.census().infinite == 1,
            "one sign, one infinity".into(),
        ),
    ];
    Ok(ExperimentReport {
        name: "format-inspect".into(),
        outcomes,
        tables: vec![("formats.csv".into(), csv)],
        summary: json!({
            "formats": formats.iter().map(|f| f.name).collect::<Vec<_>>(),
        }),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
