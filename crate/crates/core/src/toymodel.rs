//! Desk-scale model components: sparse attention mask construction, the
//! embedding scheme, a small resblock stack with explicit forward/backward
//! and per-resblock scaling hooks, the gumbel-softmax relaxation, the
//! logit-Laplace reconstruction loss, and a toy discrete autoencoder.

use crate::gradscale::{filter_nonfinite, scale_incoming, unscale_outgoing};
use crate::lowp::FP16;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToymodelError {
    #[error("layer index {i} out of range 1..={total}")]
    LayerIndexOutOfRange { i: usize, total: usize },
    #[error("bad convolution kernel: {0}")]
    BadKernel(String),
    #[error("{what} token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { what: &'static str, id: usize, vocab: usize },
    #[error("{what}: got {got} tokens, capacity {cap}")]
    TooManyTokens { what: &'static str, got: usize, cap: usize },
    #[error("pixel value {0} outside [0, 255]")]
    PixelOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Reference dimensions of the full-size text-to-image configuration, kept
/// only for arithmetic consistency checks and bandwidth tables.
pub mod full_scale {
    pub const HEADS: usize = 62;
    pub const HEAD_DIM: usize = 64;
    pub const D_MODEL: usize = 3968;
    pub const LAYERS: usize = 64;
    pub const TEXT_LEN: usize = 256;
    pub const GRID: usize = 32;
    pub const IMAGE_VOCAB: usize = 8192;
    pub const CONV_KERNEL: usize = 11;
}

// ---------------------------------------------------------------------------
// Sequence layout and attention masks
// ---------------------------------------------------------------------------

/// Token layout: `text_len` text positions followed by a `grid_h x grid_w`
/// image grid in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SequenceLayout {
    pub fn new(text_len: usize, grid_h: usize, grid_w: usize) -> Result<Self, ToymodelError> {
        if text_len == 0 || grid_h == 0 || grid_w == 0 {
            return Err(ToymodelError::BadConfig(
                "text_len, grid_h, grid_w must all be >= 1".into(),
            ));
        }
        Ok(SequenceLayout { text_len, grid_h, grid_w })
    }

    pub fn image_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn total_len(&self) -> usize {
        self.text_len + self.image_len()
    }

    /// Sequence position of the image token at raster index `j`.
    pub fn image_pos(&self, j: usize) -> usize {
        self.text_len + j
    }

    pub fn raster_of(&self, r: usize, c: usize) -> usize {
        r * self.grid_w + c
    }

    pub fn coords_of(&self, raster: usize) -> (usize, usize) {
        (raster / self.grid_w, raster % self.grid_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Row,
    Column,
    Conv,
}

/// Which attention pattern layer `i` (1-based) of `total` uses: the final
/// layer gets the convolutional mask, layers with (i - 2) divisible by 4 get
/// the column mask, and everything else gets the row mask.
pub fn layer_mask_kind(i: usize, total: usize) -> Result<MaskKind, ToymodelError> {
    if i == 0 || i > total {
        return Err(ToymodelError::LayerIndexOutOfRange { i, total });
    }
    if i == total {
        Ok(MaskKind::Conv)
    } else if (i + 2) % 4 == 0 {
        Ok(MaskKind::Column)
    } else {
        Ok(MaskKind::Row)
    }
}

/// Counts of (row, column, conv) layers produced by [`layer_mask_kind`]
/// over a stack of `total` layers.
pub fn layer_kind_counts(total: usize) -> Result<(usize, usize, usize), ToymodelError> {
    let mut counts = (0usize, 0usize, 0usize);
    for i in 1..=total {
        match layer_mask_kind(i, total)? {
            MaskKind::Row => counts.0 += 1,
            MaskKind::Column => counts.1 += 1,
            MaskKind::Conv => counts.2 += 1,
        }
    }
    Ok(counts)
}

/// Boolean attention mask over the full sequence; `allowed(q, k)` says
/// whether query position `q` may attend to key position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    layout: SequenceLayout,
    n: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    fn empty(layout: SequenceLayout) -> Self {
        let n = layout.total_len();
        MaskMatrix { layout, n, allowed: vec![false; n * n] }
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    fn allow(&mut self, q: usize, k: usize) {
        self.allowed[q * self.n + k] = true;
    }

    /// No query may attend to a later position.
    pub fn is_causal(&self) -> bool {
        (0..self.n).all(|q| (q + 1..self.n).all(|k| !self.allowed(q, k)))
    }

    /// Every image query attends to every text position.
    pub fn image_queries_cover_all_text(&self) -> bool {
        let t = self.layout.text_len;
        (t..self.n).all(|q| (0..t).all(|k| self.allowed(q, k)))
    }

    /// Text queries use the standard causal pattern among themselves.
    pub fn text_block_is_standard_causal(&self) -> bool {
        let t = self.layout.text_len;
        (0..t).all(|q| (0..t).all(|k| self.allowed(q, k) == (k <= q)))
    }

    /// Every query can attend to itself.
    pub fn diagonal_is_allowed(&self) -> bool {
        (0..self.n).all(|q| self.allowed(q, q))
    }

    /// Rows of '#' (allowed) and '.' (blocked), one line per query.
    pub fn ascii_art(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            for k in 0..self.n {
                out.push(if self.allowed(q, k) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

fn causal_text_rows(mask: &mut MaskMatrix) {
    for q in 0..mask.layout.text_len {
        for k in 0..=q {
            mask.allow(q, k);
        }
    }
}

fn allow_all_text(mask: &mut MaskMatrix, q: usize) {
    for k in 0..mask.layout.text_len {
        mask.allow(q, k);
    }
}

/// Row attention: an image query at raster index `j` sees itself, all text,
/// and the `grid_w + 1` immediately preceding raster positions, so the
/// window reaches back to the same column of the previous row.
pub fn build_row_mask(layout: SequenceLayout) -> MaskMatrix {
    let mut mask = MaskMatrix::empty(layout);
    causal_text_rows(&mut mask);
    let extent = layout.grid_w + 1;
    for j in 0..layout.image_len() {
        let q = layout.image_pos(j);
        allow_all_text(&mut mask, q);
        mask.allow(q, q);
        for back in 1..=extent.min(j) {
            mask.allow(q, layout.image_pos(j - back));
        }
    }
    mask
}

/// Column attention: an image query at grid position (r, c) sees itself,
/// all text, and every earlier image position in the same grid column.
/// With `transposed` set, the mask is conjugated by the permutation that
/// transposes the image grid, which turns each column window into a
/// contiguous raster window in the transposed coordinate frame.
pub fn build_column_mask(layout: SequenceLayout, transposed: bool) -> MaskMatrix {
    let mut base = MaskMatrix::empty(layout);
    causal_text_rows(&mut base);
    for j in 0..layout.image_len() {
        let (r, c) = layout.coords_of(j);
        let q = layout.image_pos(j);
        allow_all_text(&mut base, q);
        base.allow(q, q);
        for rp in 0..r {
            base.allow(q, layout.image_pos(layout.raster_of(rp, c)));
        }
    }
    if !transposed {
        return base;
    }
    // Conjugate by the grid transposition: image raster j = (r, c) of the
    // h x w grid maps to raster c * grid_h + r of the transposed w x h grid.
    let perm = |pos: usize| -> usize {
        if pos < layout.text_len {
            pos
        } else {
            let (r, c) = layout.coords_of(pos - layout.text_len);
            layout.text_len + c * layout.grid_h + r
        }
    };
    let mut out = MaskMatrix::empty(layout);
    for q in 0..base.n {
        for k in 0..base.n {
            if base.allowed(q, k) {
                out.allow(perm(q), perm(k));
            }
        }
    }
    out
}

/// Convolutional attention with an odd `k x k` kernel: an image query at
/// (r, c) sees the k-wide window centered on its column for each of the k
/// rows ending at its own, with the window computed on raster indices so it
/// wraps across row boundaries, restricted to positions at or before the
/// query; plus itself and all text.
pub fn build_conv_mask(layout: SequenceLayout, kernel: usize) -> Result<MaskMatrix, ToymodelError> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(ToymodelError::BadKernel(format!("kernel {kernel} must be odd")));
    }
    if kernel > 2 * layout.grid_w - 1 {
        return Err(ToymodelError::BadKernel(format!(
            "kernel {kernel} exceeds 2 * grid_w - 1 = {}",
            2 * layout.grid_w - 1
        )));
    }
    let mut mask = MaskMatrix::empty(layout);
    causal_text_rows(&mut mask);
    let half = (kernel as i64 - 1) / 2;
    let image_len = layout.image_len() as i64;
    for j in 0..layout.image_len() {
        let (r, c) = layout.coords_of(j);
        let q = layout.image_pos(j);
        allow_all_text(&mut mask, q);
        mask.allow(q, q);
        let top = r.saturating_sub(kernel - 1);
        for rp in top..=r {
            let center = (rp * layout.grid_w + c) as i64;
            for t in (center - half)..=(center + half) {
                if t >= 0 && t < image_len && t <= j as i64 {
                    mask.allow(q, layout.image_pos(t as usize));
                }
            }
        }
    }
    Ok(mask)
}

pub fn build_mask(layout: SequenceLayout, kind: MaskKind, conv_kernel: usize) -> Result<MaskMatrix, ToymodelError> {
    match kind {
        MaskKind::Row => Ok(build_row_mask(layout)),
        MaskKind::Column => Ok(build_column_mask(layout, false)),
        MaskKind::Conv => build_conv_mask(layout, conv_kernel),
    }
}

// ---------------------------------------------------------------------------
// Embedding scheme
// ---------------------------------------------------------------------------

fn gaussian_table(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
}

/// Token/position embedding tables: per-position padding embeddings for the
/// text slots, and a vocab embedding plus row and column embeddings summed
/// together for each image position.
#[derive(Debug, Clone)]
pub struct EmbeddingScheme {
    pub layout: SequenceLayout,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub d_model: usize,
    pub text_tok: Tensor,
    pub text_pos: Tensor,
    pub text_pad: Tensor,
    pub image_tok: Tensor,
    pub row_emb: Tensor,
    pub col_emb: Tensor,
}

impl EmbeddingScheme {
    pub fn new(
        layout: SequenceLayout,
        text_vocab: usize,
        image_vocab: usize,
        d_model: usize,
        seed: u64,
    ) -> Self {
        let s = |salt: u64| crate::cluster::derive_seed(seed, salt);
        EmbeddingScheme {
            layout,
            text_vocab,
            image_vocab,
            d_model,
            text_tok: gaussian_table(text_vocab, d_model, 0.05, s(1)),
            text_pos: gaussian_table(layout.text_len, d_model, 0.05, s(2)),
            text_pad: gaussian_table(layout.text_len, d_model, 0.05, s(3)),
            image_tok: gaussian_table(image_vocab, d_model, 0.05, s(4)),
            row_emb: gaussian_table(layout.grid_h, d_model, 0.05, s(5)),
            col_emb: gaussian_table(layout.grid_w, d_model, 0.05, s(6)),
        }
    }

    /// Embed a (possibly short) caption and image token grid. Text slots
    /// beyond the caption take their position-specific padding embedding;
    /// image slots beyond the provided tokens are zero (generation prefix).
    pub fn embed(
        &self,
        text_tokens: &[usize],
        image_tokens: &[usize],
    ) -> Result<Tensor, ToymodelError> {
        let l = self.layout;
        if text_tokens.len() > l.text_len {
            return Err(ToymodelError::TooManyTokens {
                what: "text",
                got: text_tokens.len(),
                cap: l.text_len,
            });
        }
        if image_tokens.len() > l.image_len() {
            return Err(ToymodelError::TooManyTokens {
                what: "image",
                got: image_tokens.len(),
                cap: l.image_len(),
            });
        }
        let mut out = Tensor::zeros(l.total_len(), self.d_model);
        for p in 0..l.text_len {
            if p < text_tokens.len() {
                let id = text_tokens[p];
                if id >= self.text_vocab {
                    return Err(ToymodelError::TokenOutOfRange {
                        what: "text",
                        id,
                        vocab: self.text_vocab,
                    });
                }
                for d in 0..self.d_model {
                    out.set(p, d, self.text_tok.get(id, d) + self.text_pos.get(p, d));
                }
            } else {
                for d in 0..self.d_model {
                    out.set(p, d, self.text_pad.get(p, d));
                }
            }
        }
        for (j, &id) in image_tokens.iter().enumerate() {
            if id >= self.image_vocab {
                return Err(ToymodelError::TokenOutOfRange {
                    what: "image",
                    id,
                    vocab: self.image_vocab,
                });
            }
            let (r, c) = l.coords_of(j);
            let pos = l.image_pos(j);
            for d in 0..self.d_model {
                out.set(
                    pos,
                    d,
                    self.image_tok.get(id, d) + self.row_emb.get(r, d) + self.col_emb.get(c, d),
                );
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Resblock stack with explicit backward
// ---------------------------------------------------------------------------

pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Whether branch-path tensors are stored through the 16-bit float format
/// or kept wide (the identity path is always wide).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPrecision {
    Wide,
    Fp16,
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mask: MaskMatrix,
}

#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone)]
pub enum Resblock {
    Attention(AttentionBlock),
    Mlp(MlpBlock),
    /// A single square matrix on the branch path: y = x + x W. Used by
    /// analytic-gradient tests and degenerate configurations.
    Linear(Tensor),
}

impl Resblock {
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Resblock::Attention(_) => vec!["q_proj", "k_proj", "v_proj", "post_attn"],
            Resblock::Mlp(_) => vec!["mlp_in", "mlp_out"],
            Resblock::Linear(_) => vec!["linear"],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Resblock::Attention(a) => vec![&a.wq, &a.wk, &a.wv, &a.wo],
            Resblock::Mlp(m) => vec![&m.w1, &m.w2],
            Resblock::Linear(w) => vec![w],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Resblock::Attention(a) => vec![&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo],
            Resblock::Mlp(m) => vec![&mut m.w1, &mut m.w2],
            Resblock::Linear(w) => vec![w],
        }
    }
}

enum BlockCache {
    Attention { x: Tensor, q: Tensor, k: Tensor, v: Tensor, p: Tensor, a: Tensor },
    Mlp { x: Tensor, h_pre: Tensor, h: Tensor },
    Linear { x: Tensor },
}

/// Gradients and flags from one backward pass over the stack.
#[derive(Debug, Clone)]
pub struct StackBackward {
    pub output: Tensor,
    /// Gradient with respect to the stack input, unscaled and wide.
    pub input_grad: Tensor,
    /// Per-block parameter gradients, still multiplied by the block's scale
    /// (divided out downstream when they are folded into error buffers).
    pub param_grads: Vec<Vec<Tensor>>,
    /// Per-block flag: true when every branch gradient was finite before
    /// filtering.
    pub finite_flags: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ResblockStack {
    pub blocks: Vec<Resblock>,
    pub precision: BranchPrecision,
    pub d_model: usize,
}

fn masked_softmax(scores: &Tensor, mask: &MaskMatrix) -> Tensor {
    let (n, m) = scores.shape();
    let mut out = Tensor::zeros(n, m);
    for q in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..m {
            if mask.allowed(q, k) {
                max = max.max(scores.get(q, k));
            }
        }
        let mut sum = 0.0;
        for k in 0..m {
            if mask.allowed(q, k) {
                let e = (scores.get(q, k) - max).exp();
                out.set(q, k, e);
                sum += e;
            }
        }
        for k in 0..m {
            if mask.allowed(q, k) {
                out.set(q, k, out.get(q, k) / sum);
            }
        }
    }
    out
}

impl ResblockStack {
    /// Alternating attention/MLP resblocks: layer i of `n_layers` contributes
    /// an attention block whose mask kind follows [`layer_mask_kind`], then
    /// an MLP block with hidden width 4 * d_model.
    pub fn new(
        layout: SequenceLayout,
        d_model: usize,
        n_layers: usize,
        conv_kernel: usize,
        precision: BranchPrecision,
        seed: u64,
    ) -> Result<Self, ToymodelError> {
        let mut blocks = Vec::with_capacity(2 * n_layers);
        for layer in 1..=n_layers {
            let kind = layer_mask_kind(layer, n_layers)?;
            let mask = build_mask(layout, kind, conv_kernel)?;
            let s = |salt: u64| crate::cluster::derive_seed(seed, layer as u64 * 16 + salt);
            blocks.push(Resblock::Attention(AttentionBlock {
                wq: gaussian_table(d_model, d_model, 0.06, s(1)),
                wk: gaussian_table(d_model, d_model, 0.06, s(2)),
                wv: gaussian_table(d_model, d_model, 0.06, s(3)),
                wo: gaussian_table(d_model, d_model, 0.02, s(4)),
                mask,
            }));
            blocks.push(Resblock::Mlp(MlpBlock {
                w1: gaussian_table(d_model, 4 * d_model, 0.06, s(5)),
                w2: gaussian_table(4 * d_model, d_model, 0.02, s(6)),
            }));
        }
        Ok(ResblockStack { blocks, precision, d_model })
    }

    fn store(&self, t: Tensor) -> Tensor {
        match self.precision {
            BranchPrecision::Wide => t,
            BranchPrecision::Fp16 => t
                .stored_through(FP16)
                .expect("fp16 encodes every sign and nonfinite class"),
        }
    }

    fn scale_entry(&self, g: &Tensor, scale: f64) -> Tensor {
        match self.precision {
            BranchPrecision::Wide => g.scale(scale),
            BranchPrecision::Fp16 => scale_incoming(g, scale),
        }
    }

    fn forward_block(&self, block: &Resblock, x: &Tensor) -> Result<(Tensor, BlockCache), ToymodelError> {
        match block {
            Resblock::Attention(at) => {
                let q = self.store(x.matmul(&at.wq, false, false)?);
                let k = self.store(x.matmul(&at.wk, false, false)?);
                let v = self.store(x.matmul(&at.wv, false, false)?);
                let inv_sqrt_d = 1.0 / (self.d_model as f64).sqrt();
                let s = self.store(q.matmul(&k, false, true)?.scale(inv_sqrt_d));
                let p = masked_softmax(&s, &at.mask);
                let a = self.store(p.matmul(&v, false, false)?);
                let o = self.store(a.matmul(&at.wo, false, false)?);
                let y = x.add(&o)?;
                Ok((y, BlockCache::Attention { x: x.clone(), q, k, v, p, a }))
            }
            Resblock::Mlp(ml) => {
                let h_pre = self.store(x.matmul(&ml.w1, false, false)?);
                let h = self.store(h_pre.map(gelu));
                let o = self.store(h.matmul(&ml.w2, false, false)?);
                let y = x.add(&o)?;
                Ok((y, BlockCache::Mlp { x: x.clone(), h_pre, h }))
            }
            Resblock::Linear(w) => {
                let o = self.store(x.matmul(w, false, false)?);
                let y = x.add(&o)?;
                Ok((y, BlockCache::Linear { x: x.clone() }))
            }
        }
    }

    fn backward_block(
        &self,
        block: &Resblock,
        cache: &BlockCache,
        go: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor), ToymodelError> {
        match (block, cache) {
            (Resblock::Attention(at), BlockCache::Attention { x, q, k, v, p, a }) => {
                let da = self.store(go.matmul(&at.wo, false, true)?);
                let dwo = self.store(a.matmul(go, true, false)?);
                let dp = da.matmul(v, false, true)?;
                let dv = self.store(p.matmul(&da, true, false)?);
                // Softmax backward per row; masked entries have p = 0 and
                // therefore contribute nothing.
                let (n, m) = dp.shape();
                let mut ds = Tensor::zeros(n, m);
                for r in 0..n {
                    let mut dot = 0.0;
                    for c in 0..m {
                        dot += dp.get(r, c) * p.get(r, c);
                    }
                    for c in 0..m {
                        ds.set(r, c, p.get(r, c) * (dp.get(r, c) - dot));
                    }
                }
                let inv_sqrt_d = 1.0 / (self.d_model as f64).sqrt();
                let ds = self.store(ds.scale(inv_sqrt_d));
                let dq = self.store(ds.matmul(k, false, false)?);
                let dk = self.store(ds.matmul(q, true, false)?);
                let dwq = self.store(x.matmul(&dq, true, false)?);
                let dwk = self.store(x.matmul(&dk, true, false)?);
                let dwv = self.store(x.matmul(&dv, true, false)?);
                let dx = self.store(
                    dq.matmul(&at.wq, false, true)?
                        .add(&dk.matmul(&at.wk, false, true)?)?
                        .add(&dv.matmul(&at.wv, false, true)?)?,
                );
                Ok((vec![dwq, dwk, dwv, dwo], dx))
            }
            (Resblock::Mlp(ml), BlockCache::Mlp { x, h_pre, h }) => {
                let dh = self.store(go.matmul(&ml.w2, false, true)?);
                let dw2 = self.store(h.matmul(go, true, false)?);
                let dh_pre = self.store(dh.zip_map(h_pre, |g, hp| g * gelu_prime(hp))?);
                let dw1 = self.store(x.matmul(&dh_pre, true, false)?);
                let dx = self.store(dh_pre.matmul(&ml.w1, false, true)?);
                Ok((vec![dw1, dw2], dx))
            }
            (Resblock::Linear(w), BlockCache::Linear { x }) => {
                let dw = self.store(x.matmul(go, true, false)?);
                let dx = self.store(go.matmul(w, false, true)?);
                Ok((vec![dw], dx))
            }
            _ => unreachable!("cache kind always matches block kind"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ToymodelError> {
        let mut cur = x.widened();
        for b in &self.blocks {
            cur = self.forward_block(b, &cur)?.0;
        }
        Ok(cur)
    }

    /// Forward then explicit backward. At each resblock's gradient entry the
    /// upstream gradient is multiplied by that block's scale (and stored in
    /// 16 bits in Fp16 mode); branch gradients are checked for finiteness,
    /// filtered, and the branch input gradient is divided by the scale
    /// before rejoining the wide identity path. Parameter gradients are
    /// returned still carrying the scale factor.
    pub fn forward_backward(
        &self,
        x: &Tensor,
        upstream: &Tensor,
        scales: &[f64],
    ) -> Result<StackBackward, ToymodelError> {
        assert!(
            scales.len() == self.blocks.len(),
            "need one scale per resblock: {} != {}",
            scales.len(),
            self.blocks.len()
        );
        let mut cur = x.widened();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = self.forward_block(b, &cur)?;
            caches.push(cache);
            cur = y;
        }
        let output = cur;

        let mut g = upstream.widened();
        let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.blocks.len()];
        let mut finite_flags = vec![true; self.blocks.len()];
        for idx in (0..self.blocks.len()).rev() {
            let scale = scales[idx];
            let g_entry = self.scale_entry(&g, scale);
            let (grads, dx_branch) = self.backward_block(&self.blocks[idx], &caches[idx], &g_entry)?;
            let finite = grads.iter().all(|t| t.all_finite()) && dx_branch.all_finite();
            finite_flags[idx] = finite;
            let grads: Vec<Tensor> = grads.iter().map(filter_nonfinite).collect();
            let dx_branch = filter_nonfinite(&dx_branch);
            g = g.add(&unscale_outgoing(&dx_branch, scale))?;
            param_grads[idx] = grads;
        }
        Ok(StackBackward { output, input_grad: g, param_grads, finite_flags })
    }
}

// ---------------------------------------------------------------------------
// Sequence model: embeddings + stack + prediction heads
// ---------------------------------------------------------------------------

/// Combined next-token loss: text and image cross-entropies are averaged
/// over their own token counts and mixed with weights 1/8 and 7/8.
pub fn weighted_ce(text_ce_mean: f64, image_ce_mean: f64) -> f64 {
    text_ce_mean / 8.0 + 7.0 * image_ce_mean / 8.0
}

#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub scheme: EmbeddingScheme,
    pub stack: ResblockStack,
    pub text_head: Tensor,
    pub image_head: Tensor,
}

/// All gradients from one loss evaluation. Stack gradients carry their
/// per-resblock scale; embedding and head gradients are wide and unscaled
/// (they travel the uncompressed 32-bit path).
#[derive(Debug, Clone)]
pub struct SeqModelGrads {
    pub stack: Vec<Vec<Tensor>>,
    pub finite_flags: Vec<bool>,
    pub text_head: Tensor,
    pub image_head: Tensor,
    pub text_tok: Tensor,
    pub text_pos: Tensor,
    pub text_pad: Tensor,
    pub image_tok: Tensor,
    pub row_emb: Tensor,
    pub col_emb: Tensor,
}

impl SequenceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: SequenceLayout,
        text_vocab: usize,
        image_vocab: usize,
        d_model: usize,
        n_layers: usize,
        conv_kernel: usize,
        precision: BranchPrecision,
        seed: u64,
    ) -> Result<Self, ToymodelError> {
        let s = |salt: u64| crate::cluster::derive_seed(seed, salt);
        Ok(SequenceModel {
            scheme: EmbeddingScheme::new(layout, text_vocab, image_vocab, d_model, s(100)),
            stack: ResblockStack::new(layout, d_model, n_layers, conv_kernel, precision, s(200))?,
            text_head: gaussian_table(d_model, text_vocab, 0.05, s(300)),
            image_head: gaussian_table(d_model, image_vocab, 0.05, s(301)),
        })
    }

    pub fn n_resblocks(&self) -> usize {
        self.stack.blocks.len()
    }

    /// Next-token prediction targets. Text position p predicts caption token
    /// p+1 (pad-target positions are excluded from the loss); the final text
    /// slot predicts the first image token, and image position j predicts
    /// image token j+1.
    fn targets(
        &self,
        text_tokens: &[usize],
        image_tokens: &[usize],
    ) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let l = self.scheme.layout;
        let mut text_targets = Vec::new();
        for p in 0..text_tokens.len().saturating_sub(1) {
            text_targets.push((p, text_tokens[p + 1]));
        }
        let mut image_targets = Vec::new();
        if !image_tokens.is_empty() {
            image_targets.push((l.text_len - 1, image_tokens[0]));
            for j in 0..image_tokens.len() - 1 {
                image_targets.push((l.image_pos(j), image_tokens[j + 1]));
            }
        }
        (text_targets, image_targets)
    }

    /// Weighted next-token cross-entropy and all parameter gradients.
    pub fn loss_and_grads(
        &self,
        text_tokens: &[usize],
        image_tokens: &[usize],
        scales: &[f64],
    ) -> Result<(f64, SeqModelGrads), ToymodelError> {
        let stream_in = self.scheme.embed(text_tokens, image_tokens)?;
        let l = self.scheme.layout;
        let n = l.total_len();
        let d = self.scheme.d_model;

        // Forward through the stack once to obtain activations for the head
        // loss, then reuse forward_backward for the parameter gradients.
        let stream_out = self.stack.forward(&stream_in)?;
        let (text_targets, image_targets) = self.targets(text_tokens, image_tokens);

        let mut d_stream = Tensor::zeros(n, d);
        let mut d_text_head = Tensor::zeros(d, self.scheme.text_vocab);
        let mut d_image_head = Tensor::zeros(d, self.scheme.image_vocab);
        let mut loss_text = 0.0;
        let mut loss_image = 0.0;

        let apply_head = |targets: &[(usize, usize)],
                              head: &Tensor,
                              d_head: &mut Tensor,
                              d_stream: &mut Tensor,
                              weight: f64|
         -> f64 {
            if targets.is_empty() {
                return 0.0;
            }
            let count = targets.len() as f64;
            let vocab = head.cols();
            let mut ce_sum = 0.0;
            for &(pos, target) in targets {
                let mut logits = vec![0.0; vocab];
                for (t, logit) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += stream_out.get(pos, dd) * head.get(dd, t);
                    }
                    *logit = acc;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                ce_sum += log_z - logits[target];
                for (t, &logit) in logits.iter().enumerate() {
                    let p = (logit - log_z).exp();
                    let dl = (p - if t == target { 1.0 } else { 0.0 }) * weight / count;
                    for dd in 0..d {
                        let cur = d_head.get(dd, t);
                        d_head.set(dd, t, cur + stream_out.get(pos, dd) * dl);
                        let cur = d_stream.get(pos, dd);
                        d_stream.set(pos, dd, cur + head.get(dd, t) * dl);
                    }
                }
            }
            ce_sum / count
        };

        if !text_targets.is_empty() {
            loss_text = apply_head(
                &text_targets,
                &self.text_head,
                &mut d_text_head,
                &mut d_stream,
                1.0 / 8.0,
            );
        }
        if !image_targets.is_empty() {
            loss_image = apply_head(
                &image_targets,
                &self.image_head,
                &mut d_image_head,
                &mut d_stream,
                7.0 / 8.0,
            );
        }
        let loss = weighted_ce(loss_text, loss_image);

        let back = self.stack.forward_backward(&stream_in, &d_stream, scales)?;

        // Scatter the input gradient back into the embedding tables.
        let g = &back.input_grad;
        let mut d_text_tok = Tensor::zeros(self.scheme.text_vocab, d);
        let mut d_text_pos = Tensor::zeros(l.text_len, d);
        let mut d_text_pad = Tensor::zeros(l.text_len, d);
        let mut d_image_tok = Tensor::zeros(self.scheme.image_vocab, d);
        let mut d_row = Tensor::zeros(l.grid_h, d);
        let mut d_col = Tensor::zeros(l.grid_w, d);
        for p in 0..l.text_len {
            if p < text_tokens.len() {
                let id = text_tokens[p];
                for dd in 0..d {
                    let gv = g.get(p, dd);
                    d_text_tok.set(id, dd, d_text_tok.get(id, dd) + gv);
                    d_text_pos.set(p, dd, d_text_pos.get(p, dd) + gv);
                }
            } else {
                for dd in 0..d {
                    d_text_pad.set(p, dd, d_text_pad.get(p, dd) + g.get(p, dd));
                }
            }
        }
        for (j, &id) in image_tokens.iter().enumerate() {
            let (r, c) = l.coords_of(j);
            let pos = l.image_pos(j);
            for dd in 0..d {
                let gv = g.get(pos, dd);
                d_image_tok.set(id, dd, d_image_tok.get(id, dd) + gv);
                d_row.set(r, dd, d_row.get(r, dd) + gv);
                d_col.set(c, dd, d_col.get(c, dd) + gv);
            }
        }

        Ok((
            loss,
            SeqModelGrads {
                stack: back.param_grads,
                finite_flags: back.finite_flags,
                text_head: d_text_head,
                image_head: d_image_head,
                text_tok: d_text_tok,
                text_pos: d_text_pos,
                text_pad: d_text_pad,
                image_tok: d_image_tok,
                row_emb: d_row,
                col_emb: d_col,
            },
        ))
    }

    /// Loss only (used by finite-difference checks).
    pub fn loss(&self, text_tokens: &[usize], image_tokens: &[usize]) -> Result<f64, ToymodelError> {
        let stream_in = self.scheme.embed(text_tokens, image_tokens)?;
        let stream_out = self.stack.forward(&stream_in)?;
        let (text_targets, image_targets) = self.targets(text_tokens, image_tokens);
        let d = self.scheme.d_model;
        let ce_mean = |targets: &[(usize, usize)], head: &Tensor| -> f64 {
            if targets.is_empty() {
                return 0.0;
            }
            let vocab = head.cols();
            let mut sum = 0.0;
            for &(pos, target) in targets {
                let mut logits = vec![0.0; vocab];
                for (t, logit) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += stream_out.get(pos, dd) * head.get(dd, t);
                    }
                    *logit = acc;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                sum += max + sum_exp.ln() - logits[target];
            }
            sum / targets.len() as f64
        };
        Ok(weighted_ce(
            ce_mean(&text_targets, &self.text_head),
            ce_mean(&image_targets, &self.image_head),
        ))
    }
}

// ---------------------------------------------------------------------------
// Gumbel-softmax relaxation
// ---------------------------------------------------------------------------

/// One standard Gumbel draw per component.
pub fn sample_gumbel(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            if u <= 0.0 {
                u = f64::MIN_POSITIVE;
            }
            -(-u.ln()).ln()
        })
        .collect()
}

/// softmax((logits + noise) / tau): a point on the K-simplex that
/// concentrates on argmax(logits + noise) as tau shrinks.
pub fn gumbel_softmax_with_noise(logits: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(logits.len() == noise.len(), "one noise draw per logit");
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    softmax_slice(&scaled)
}

pub fn gumbel_softmax(logits: &[f64], tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = sample_gumbel(logits.len(), rng);
    gumbel_softmax_with_noise(logits, tau, &noise)
}

/// Noise-free hard tokenization: the index of the largest logit.
pub fn tokenize_argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// KL divergence from a distribution on K outcomes to the uniform
/// distribution: sum q (ln q + ln K), with 0 ln 0 taken as 0.
pub fn kl_to_uniform(q: &[f64]) -> f64 {
    let ln_k = (q.len() as f64).ln();
    q.iter()
        .map(|&p| if p > 0.0 { p * (p.ln() + ln_k) } else { 0.0 })
        .sum()
}

// ---------------------------------------------------------------------------
// Logit-Laplace reconstruction loss
// ---------------------------------------------------------------------------

pub const LL_EPSILON: f64 = 0.1;

/// Map a pixel in [0, 255] into (epsilon, 1 - epsilon).
pub fn phi(x: f64) -> Result<f64, ToymodelError> {
    if !(0.0..=255.0).contains(&x) {
        return Err(ToymodelError::PixelOutOfRange(x));
    }
    Ok((1.0 - 2.0 * LL_EPSILON) * x / 255.0 + LL_EPSILON)
}

pub fn phi_inv(y: f64) -> f64 {
    255.0 * (y - LL_EPSILON) / (1.0 - 2.0 * LL_EPSILON)
}

pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Density on (0, 1) of the Laplace distribution pushed through the sigmoid.
pub fn logit_laplace_pdf(x01: f64, mu: f64, b: f64) -> f64 {
    1.0 / (2.0 * b * x01 * (1.0 - x01)) * (-(logit(x01) - mu).abs() / b).exp()
}

/// Negative log density of the mapped pixel under (mu, ln b).
pub fn logit_laplace_nll(x_pixel: f64, mu: f64, ln_b: f64) -> Result<f64, ToymodelError> {
    let x = phi(x_pixel)?;
    let b = ln_b.exp();
    Ok((2.0 * b).ln() + x.ln() + (1.0 - x).ln() + (logit(x) - mu).abs() / b)
}

/// Gradient of the negative log density with respect to (mu, ln b).
pub fn logit_laplace_nll_grad(
    x_pixel: f64,
    mu: f64,
    ln_b: f64,
) -> Result<(f64, f64), ToymodelError> {
    let x = phi(x_pixel)?;
    let b = ln_b.exp();
    let t = logit(x) - mu;
    let d_mu = -t.signum() / b;
    let d_ln_b = 1.0 - t.abs() / b;
    Ok((d_mu, d_ln_b))
}

/// Reconstructed pixel from the location parameter; the scale parameter is
/// deliberately ignored.
pub fn reconstruct_pixel(mu: f64) -> f64 {
    phi_inv(sigmoid(mu)).clamp(0.0, 255.0)
}

/// Surrogate objective to minimize: (reconstruction NLL sum + beta * KL sum)
/// normalized by the pixel count. With this normalization the effective KL
/// coefficient is beta * grid_positions / pixel_count.
pub fn elb(recon_nll_sum: f64, kl_sum: f64, beta: f64, pixel_count: usize, _grid_positions: usize) -> f64 {
    assert!(pixel_count > 0, "pixel count must be positive");
    (recon_nll_sum + beta * kl_sum) / pixel_count as f64
}

/// The coefficient multiplying the mean per-position KL after normalizing
/// the objective by the pixel count.
pub fn effective_kl_weight(beta: f64, pixel_count: usize, grid_positions: usize) -> f64 {
    beta * grid_positions as f64 / pixel_count as f64
}

// ---------------------------------------------------------------------------
// Toy discrete autoencoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DvaeConfig {
    /// Pixels per image (a square grayscale patch, e.g. 64 for 8x8).
    pub pixels: usize,
    /// Latent grid positions (e.g. 16 for a 4x4 code grid).
    pub grid: usize,
    /// Codebook size.
    pub vocab: usize,
    pub enc_hidden: usize,
    pub code_dim: usize,
    pub dec_hidden: usize,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        DvaeConfig { pixels: 64, grid: 16, vocab: 64, enc_hidden: 32, code_dim: 16, dec_hidden: 64 }
    }
}

/// Dense encoder/decoder around a categorical bottleneck. The encoder maps
/// mapped pixels to per-position codebook logits; a relaxed (or hard) code
/// selects codebook vectors; the decoder emits per-pixel location and
/// log-scale parameters for the reconstruction density.
#[derive(Debug, Clone)]
pub struct DvaeModel {
    pub cfg: DvaeConfig,
    pub we1: Tensor,
    pub we2: Tensor,
    pub codebook: Tensor,
    pub wd1: Tensor,
    pub wd2: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    /// Relaxed sampling with externally supplied Gumbel noise.
    Relaxed,
    /// Hard argmax tokenization without noise (evaluation of the
    /// non-relaxed objective).
    Hard,
}

#[derive(Debug, Clone)]
pub struct DvaeLoss {
    pub recon_nll_sum: f64,
    pub kl_sum: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct DvaeGrads {
    pub we1: Tensor,
    pub we2: Tensor,
    pub codebook: Tensor,
    pub wd1: Tensor,
    pub wd2: Tensor,
}

impl DvaeModel {
    pub fn new(cfg: DvaeConfig, seed: u64) -> Self {
        let s = |salt: u64| crate::cluster::derive_seed(seed, salt);
        DvaeModel {
            cfg,
            we1: gaussian_table(cfg.pixels, cfg.enc_hidden, 0.3, s(1)),
            we2: gaussian_table(cfg.enc_hidden, cfg.grid * cfg.vocab, 0.3, s(2)),
            codebook: gaussian_table(cfg.vocab, cfg.code_dim, 0.3, s(3)),
            wd1: gaussian_table(cfg.grid * cfg.code_dim, cfg.dec_hidden, 0.3, s(4)),
            wd2: gaussian_table(cfg.dec_hidden, 2 * cfg.pixels, 0.1, s(5)),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.we1, &self.we2, &self.codebook, &self.wd1, &self.wd2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.we1,
            &mut self.we2,
            &mut self.codebook,
            &mut self.wd1,
            &mut self.wd2,
        ]
    }

    pub fn param_names() -> [&'static str; 5] {
        ["enc_in", "enc_logits", "codebook", "dec_in", "dec_out"]
    }

    fn encode_logits(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor), ToymodelError> {
        let batch = images.rows();
        let mut feats = Tensor::zeros(batch, self.cfg.pixels);
        for bi in 0..batch {
            for p in 0..self.cfg.pixels {
                feats.set(bi, p, phi(images.get(bi, p))?);
            }
        }
        let h1_pre = feats.matmul(&self.we1, false, false)?;
        let h1 = h1_pre.map(gelu);
        let logits = h1.matmul(&self.we2, false, false)?;
        Ok((feats, h1_pre, logits))
    }

    /// Per-position codebook logits for a batch of images; rows are grid
    /// positions of consecutive samples.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, ToymodelError> {
        let (_, _, logits) = self.encode_logits(images)?;
        Ok(logits)
    }

    /// Objective and (for the relaxed mode) parameter gradients. `noise`
    /// must hold one Gumbel draw per (sample, grid position, vocab entry)
    /// in relaxed mode and is ignored in hard mode. The KL term is always
    /// computed from the noise-free softmax of the logits.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        tau: f64,
        beta: f64,
        noise: Option<&Tensor>,
        mode: CodeMode,
        want_grads: bool,
    ) -> Result<(DvaeLoss, Option<DvaeGrads>), ToymodelError> {
        let cfg = self.cfg;
        let batch = images.rows();
        if images.cols() != cfg.pixels {
            return Err(ToymodelError::BadConfig(format!(
                "expected {} pixels per image, got {}",
                cfg.pixels,
                images.cols()
            )));
        }
        if mode == CodeMode::Relaxed {
            let need = (batch, cfg.grid * cfg.vocab);
            match noise {
                Some(t) if t.shape() == need => {}
                _ => {
                    return Err(ToymodelError::BadConfig(format!(
                        "relaxed mode needs a noise tensor of shape {need:?}"
                    )))
                }
            }
        }

        let (feats, h1_pre, logits) = self.encode_logits(images)?;
        let h1 = h1_pre.map(gelu);

        // Codes, KL, and decoder input.
        let mut z = Tensor::zeros(batch, cfg.grid * cfg.vocab);
        let mut kl_sum = 0.0;
        for bi in 0..batch {
            for gpos in 0..cfg.grid {
                let lo = gpos * cfg.vocab;
                let l: Vec<f64> = (0..cfg.vocab).map(|k| logits.get(bi, lo + k)).collect();
                let q = softmax_slice(&l);
                kl_sum += kl_to_uniform(&q);
                match mode {
                    CodeMode::Relaxed => {
                        let noise = noise.expect("checked above");
                        let g: Vec<f64> = (0..cfg.vocab).map(|k| noise.get(bi, lo + k)).collect();
                        let soft = gumbel_softmax_with_noise(&l, tau, &g);
                        for (k, &v) in soft.iter().enumerate() {
                            z.set(bi, lo + k, v);
                        }
                    }
                    CodeMode::Hard => {
                        z.set(bi, lo + tokenize_argmax(&l), 1.0);
                    }
                }
            }
        }

        // z viewed as (batch * grid, vocab) times the codebook.
        let z_flat = Tensor::from_vec(batch * cfg.grid, cfg.vocab, z.data().to_vec())?;
        let c_flat = z_flat.matmul(&self.codebook, false, false)?;
        let codes = Tensor::from_vec(batch, cfg.grid * cfg.code_dim, c_flat.data().to_vec())?;
        let h2_pre = codes.matmul(&self.wd1, false, false)?;
        let h2 = h2_pre.map(gelu);
        let out = h2.matmul(&self.wd2, false, false)?;

        let mut recon_nll_sum = 0.0;
        for bi in 0..batch {
            for p in 0..cfg.pixels {
                recon_nll_sum += logit_laplace_nll(
                    images.get(bi, p),
                    out.get(bi, p),
                    out.get(bi, cfg.pixels + p),
                )?;
            }
        }
        let pixel_count = batch * cfg.pixels;
        let objective = elb(recon_nll_sum, kl_sum, beta, pixel_count, batch * cfg.grid);
        let loss = DvaeLoss { recon_nll_sum, kl_sum, objective };
        if !want_grads {
            return Ok((loss, None));
        }
        assert!(
            mode == CodeMode::Relaxed,
            "gradients are only defined for the relaxed objective"
        );

        // Backward. The objective normalizes by the pixel count.
        let scale = 1.0 / pixel_count as f64;
        let mut d_out = Tensor::zeros(batch, 2 * cfg.pixels);
        for bi in 0..batch {
            for p in 0..cfg.pixels {
                let (dmu, dlnb) = logit_laplace_nll_grad(
                    images.get(bi, p),
                    out.get(bi, p),
                    out.get(bi, cfg.pixels + p),
                )?;
                d_out.set(bi, p, dmu * scale);
                d_out.set(bi, cfg.pixels + p, dlnb * scale);
            }
        }
        let d_wd2 = h2.matmul(&d_out, true, false)?;
        let d_h2 = d_out.matmul(&self.wd2, false, true)?;
        let d_h2_pre = d_h2.zip_map(&h2_pre, |g, hp| g * gelu_prime(hp))?;
        let d_wd1 = codes.matmul(&d_h2_pre, true, false)?;
        let d_codes = d_h2_pre.matmul(&self.wd1, false, true)?;

        let d_c_flat = Tensor::from_vec(batch * cfg.grid, cfg.code_dim, d_codes.data().to_vec())?;
        let d_codebook = z_flat.matmul(&d_c_flat, true, false)?;
        let d_z_flat = d_c_flat.matmul(&self.codebook, false, true)?;

        // Through the relaxed codes and the KL term into the logits.
        let mut d_logits = Tensor::zeros(batch, cfg.grid * cfg.vocab);
        let kl_coeff = beta * scale;
        let noise = noise.expect("relaxed mode verified above");
        for bi in 0..batch {
            for gpos in 0..cfg.grid {
                let lo = gpos * cfg.vocab;
                let l: Vec<f64> = (0..cfg.vocab).map(|k| logits.get(bi, lo + k)).collect();
                let g: Vec<f64> = (0..cfg.vocab).map(|k| noise.get(bi, lo + k)).collect();
                let soft = gumbel_softmax_with_noise(&l, tau, &g);
                let dz: Vec<f64> = (0..cfg.vocab)
                    .map(|k| d_z_flat.get(bi * cfg.grid + gpos, k))
                    .collect();
                let dot: f64 = dz.iter().zip(&soft).map(|(a, b)| a * b).sum();
                // Softmax jacobian with the 1/tau chain factor.
                for k in 0..cfg.vocab {
                    let dsoft = soft[k] * (dz[k] - dot) / tau;
                    d_logits.set(bi, lo + k, dsoft);
                }
                // KL path: d/dl of sum q (ln q + ln K).
                let q = softmax_slice(&l);
                let a: Vec<f64> = q
                    .iter()
                    .map(|&p| if p > 0.0 { p.ln() + (cfg.vocab as f64).ln() } else { 0.0 })
                    .collect();
                let qa: f64 = q.iter().zip(&a).map(|(x, y)| x * y).sum();
                for k in 0..cfg.vocab {
                    let cur = d_logits.get(bi, lo + k);
                    d_logits.set(bi, lo + k, cur + kl_coeff * q[k] * (a[k] - qa));
                }
            }
        }

        let d_we2 = h1.matmul(&d_logits, true, false)?;
        let d_h1 = d_logits.matmul(&self.we2, false, true)?;
        let d_h1_pre = d_h1.zip_map(&h1_pre, |g, hp| g * gelu_prime(hp))?;
        let d_we1 = feats.matmul(&d_h1_pre, true, false)?;

        Ok((
            loss,
            Some(DvaeGrads {
                we1: d_we1,
                we2: d_we2,
                codebook: d_codebook,
                wd1: d_wd1,
                wd2: d_wd2,
            }),
        ))
    }
}

/// One Gumbel-noise tensor per batch, deterministic in the seed.
pub fn gumbel_noise_tensor(batch: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = sample_gumbel(batch * width, &mut rng);
    Tensor::from_vec(batch, width, noise).expect("dimensions match by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_layout() -> SequenceLayout {
        SequenceLayout::new(6, 4, 4).unwrap()
    }

    // -- masks ------------------------------------------------------------

    #[test]
    fn layer_kinds_follow_the_rule() {
        let kinds: Vec<MaskKind> = (1..=4).map(|i| layer_mask_kind(i, 64).unwrap()).collect();
        assert_eq!(
            kinds,
            vec![MaskKind::Row, MaskKind::Column, MaskKind::Row, MaskKind::Row]
        );
        assert_eq!(layer_mask_kind(64, 64).unwrap(), MaskKind::Conv);
        assert_eq!(layer_mask_kind(62, 64).unwrap(), MaskKind::Column);
        assert!(layer_mask_kind(0, 64).is_err());
        assert!(layer_mask_kind(65, 64).is_err());
    }

    #[test]
    fn layer_kind_counts_for_a_depth_64_stack() {
        // Column layers are {2, 6, ..., 62}: sixteen of them. The final
        // layer (64) would otherwise be a row layer, so the convolutional
        // mask displaces a row layer, leaving 47.
        assert_eq!(layer_kind_counts(64).unwrap(), (47, 16, 1));
    }

    #[test]
    fn row_mask_window_spans_previous_row_same_column() {
        let mask = build_row_mask(toy_layout());
        let l = toy_layout();
        // Image raster 7 = (1, 3): window covers rasters 2..=6 plus self.
        let q = l.image_pos(7);
        for t in 0..l.text_len {
            assert!(mask.allowed(q, t), "image query must see text {t}");
        }
        for j in 2..=6 {
            assert!(mask.allowed(q, l.image_pos(j)), "raster {j} in window");
        }
        assert!(mask.allowed(q, q), "self");
        assert!(!mask.allowed(q, l.image_pos(0)));
        assert!(!mask.allowed(q, l.image_pos(1)));
        assert!(!mask.allowed(q, l.image_pos(8)), "future key");
        // The window's far end is the same column of the previous row:
        // raster 7 is (1,3) and raster 2 is (0,2)... the extent w+1 = 5
        // reaches raster 7-5=2; the same column of the previous row is
        // raster 3, inside the window.
        assert!(mask.allowed(q, l.image_pos(3)));
    }

    #[test]
    fn first_image_token_sees_only_text_and_itself() {
        let l = toy_layout();
        let mask = build_row_mask(l);
        let q = l.image_pos(0);
        for k in 0..l.total_len() {
            let expect = k < l.text_len || k == q;
            assert_eq!(mask.allowed(q, k), expect, "key {k}");
        }
    }

    #[test]
    fn row_mask_matches_brute_force_oracle() {
        // Independent restatement: image query j allows key position k iff
        // k is text, k == j, or k is an image raster in [j-w-1, j).
        let l = toy_layout();
        let mask = build_row_mask(l);
        let n = l.total_len();
        for qpos in 0..n {
            for kpos in 0..n {
                let expect = if qpos < l.text_len {
                    kpos <= qpos
                } else {
                    let j = qpos - l.text_len;
                    if kpos < l.text_len {
                        true
                    } else {
                        let k = kpos - l.text_len;
                        k == j || (k < j && j - k <= l.grid_w + 1)
                    }
                };
                assert_eq!(mask.allowed(qpos, kpos), expect, "q={qpos} k={kpos}");
            }
        }
    }

    #[test]
    fn column_mask_allows_same_column_history() {
        let l = toy_layout();
        let mask = build_column_mask(l, false);
        let q = l.image_pos(l.raster_of(2, 1));
        let mut allowed_keys: Vec<usize> = (0..l.total_len())
            .filter(|&k| mask.allowed(q, k))
            .collect();
        let mut expect: Vec<usize> = (0..l.text_len).collect();
        expect.push(l.image_pos(l.raster_of(0, 1)));
        expect.push(l.image_pos(l.raster_of(1, 1)));
        expect.push(q);
        allowed_keys.sort_unstable();
        expect.sort_unstable();
        assert_eq!(allowed_keys, expect);
    }

    #[test]
    fn transposed_column_mask_is_the_permutation_conjugate() {
        for (h, w) in [(4usize, 4usize), (3, 5)] {
            let l = SequenceLayout::new(5, h, w).unwrap();
            let base = build_column_mask(l, false);
            let t = build_column_mask(l, true);
            let perm = |pos: usize| -> usize {
                if pos < l.text_len {
                    pos
                } else {
                    let (r, c) = l.coords_of(pos - l.text_len);
                    l.text_len + c * l.grid_h + r
                }
            };
            for q in 0..l.total_len() {
                for k in 0..l.total_len() {
                    assert_eq!(
                        t.allowed(perm(q), perm(k)),
                        base.allowed(q, k),
                        "grid {h}x{w} q={q} k={k}"
                    );
                }
            }
            assert!(t.is_causal(), "transposed mask stays causal in its own frame");
        }
    }

    #[test]
    fn conv_mask_golden_window() {
        let l = toy_layout();
        let mask = build_conv_mask(l, 3).unwrap();
        let q = l.image_pos(l.raster_of(1, 1));
        let mut allowed_image: Vec<(usize, usize)> = (0..l.image_len())
            .filter(|&j| mask.allowed(q, l.image_pos(j)))
            .map(|j| l.coords_of(j))
            .collect();
        allowed_image.sort_unstable();
        assert_eq!(
            allowed_image,
            vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)],
            "3x3 kernel at (1,1)"
        );
        for t in 0..l.text_len {
            assert!(mask.allowed(q, t));
        }
    }

    #[test]
    fn conv_mask_wraps_across_row_boundaries() {
        // Left-edge query (2, 0) with k=3: centers at rasters 0, 4, 8 give
        // windows {0,1} (clipped), {3,4,5}, {7,8,9} -> the previous-row
        // windows wrap to column 3 of the row above.
        let l = toy_layout();
        let mask = build_conv_mask(l, 3).unwrap();
        let q = l.image_pos(l.raster_of(2, 0));
        let allowed: Vec<usize> = (0..l.image_len())
            .filter(|&j| mask.allowed(q, l.image_pos(j)))
            .collect();
        assert_eq!(allowed, vec![0, 1, 3, 4, 5, 7, 8]);
    }

    #[test]
    fn degenerate_kernel_allows_only_self_and_text() {
        // k = 1 collapses the window to the query itself: the row range is
        // r-(k-1)..=r = {r} and the 1-wide window holds only the center.
        let l = toy_layout();
        let mask = build_conv_mask(l, 1).unwrap();
        let q = l.image_pos(l.raster_of(2, 2));
        for k in 0..l.total_len() {
            let expect = k < l.text_len || k == q;
            assert_eq!(mask.allowed(q, k), expect, "key {k}");
        }
    }

    #[test]
    fn conv_kernel_validation() {
        let l = toy_layout();
        assert!(build_conv_mask(l, 2).is_err(), "even kernel");
        assert!(build_conv_mask(l, 9).is_err(), "kernel wider than 2w-1");
        assert!(build_conv_mask(l, 7).is_ok());
    }

    #[test]
    fn all_masks_satisfy_global_invariants_on_small_grids() {
        for h in 1..=8usize {
            for w in 1..=8usize {
                for t in [1usize, 3, 16] {
                    let l = SequenceLayout::new(t, h, w).unwrap();
                    let kmax = (2 * w - 1).min(5);
                    let kernel = if kmax % 2 == 0 { kmax - 1 } else { kmax };
                    let masks = [
                        build_row_mask(l),
                        build_column_mask(l, false),
                        build_column_mask(l, true),
                        build_conv_mask(l, kernel).unwrap(),
                    ];
                    for (mi, m) in masks.iter().enumerate() {
                        assert!(m.is_causal(), "mask {mi} grid {h}x{w} text {t}");
                        assert!(
                            m.image_queries_cover_all_text(),
                            "mask {mi} grid {h}x{w} text {t}"
                        );
                        assert!(
                            m.text_block_is_standard_causal(),
                            "mask {mi} grid {h}x{w} text {t}"
                        );
                        assert!(m.diagonal_is_allowed(), "mask {mi} grid {h}x{w} text {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn full_scale_head_arithmetic_is_consistent() {
        assert_eq!(full_scale::HEADS * full_scale::HEAD_DIM, full_scale::D_MODEL);
        assert_eq!(full_scale::GRID * full_scale::GRID, 1024);
    }

    // -- embeddings --------------------------------------------------------

    #[test]
    fn short_caption_uses_position_specific_pads() {
        let l = toy_layout();
        let sc = EmbeddingScheme::new(l, 32, 64, 8, 9);
        let x = sc.embed(&[3, 1, 4, 1], &[0; 16]).unwrap();
        for p in 4..6 {
            for d in 0..8 {
                assert_eq!(x.get(p, d), sc.text_pad.get(p, d), "pad row {p}");
            }
        }
        for d in 0..8 {
            assert_eq!(x.get(0, d), sc.text_tok.get(3, d) + sc.text_pos.get(0, d));
        }
    }

    #[test]
    fn empty_caption_is_all_pads() {
        let l = toy_layout();
        let sc = EmbeddingScheme::new(l, 32, 64, 8, 9);
        let x = sc.embed(&[], &[]).unwrap();
        for p in 0..l.text_len {
            for d in 0..8 {
                assert_eq!(x.get(p, d), sc.text_pad.get(p, d));
            }
        }
    }

    #[test]
    fn image_embedding_sums_vocab_row_and_column() {
        let l = toy_layout();
        let sc = EmbeddingScheme::new(l, 32, 64, 8, 9);
        let toks: Vec<usize> = (0..16).map(|j| (j * 3) % 64).collect();
        let x = sc.embed(&[1], &toks).unwrap();
        for j in 0..16 {
            let (r, c) = l.coords_of(j);
            for d in 0..8 {
                let expect =
                    sc.image_tok.get(toks[j], d) + sc.row_emb.get(r, d) + sc.col_emb.get(c, d);
                assert_eq!(x.get(l.image_pos(j), d), expect, "raster {j} dim {d}");
            }
        }
    }

    #[test]
    fn out_of_vocab_tokens_are_rejected() {
        let l = toy_layout();
        let sc = EmbeddingScheme::new(l, 32, 64, 8, 9);
        assert!(sc.embed(&[32], &[]).is_err());
        assert!(sc.embed(&[0], &[64]).is_err());
        assert!(sc.embed(&[0; 7], &[]).is_err(), "caption longer than text_len");
    }

    // -- resblocks ----------------------------------------------------------

    #[test]
    fn linear_resblock_gradient_is_analytic() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::from_fn(d, d, |_, _| rng.gen_range(-0.5..0.5));
        let stack = ResblockStack {
            blocks: vec![Resblock::Linear(w.clone())],
            precision: BranchPrecision::Wide,
            d_model: d,
        };
        let x = Tensor::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
        let up = Tensor::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
        let back = stack.forward_backward(&x, &up, &[1.0]).unwrap();
        let dw_expect = x.matmul(&up, true, false).unwrap();
        let dx_expect = up.add(&up.matmul(&w, false, true).unwrap()).unwrap();
        for (a, b) in back.param_grads[0][0].data().iter().zip(dw_expect.data()) {
            assert!((a - b).abs() < 1e-10, "dW {a} vs {b}");
        }
        for (a, b) in back.input_grad.data().iter().zip(dx_expect.data()) {
            assert!((a - b).abs() < 1e-10, "dx {a} vs {b}");
        }
    }

    /// Central finite differences of a scalar loss sum(output * up) with
    /// respect to every stack parameter.
    fn fd_check_stack(stack: &mut ResblockStack, x: &Tensor, up: &Tensor, tol: f64) {
        let scales: Vec<f64> = vec![1.0; stack.blocks.len()];
        let back = stack.forward_backward(x, up, &scales).unwrap();
        let h = 1e-5;
        for bi in 0..stack.blocks.len() {
            let n_params = stack.blocks[bi].params().len();
            for pi in 0..n_params {
                let (rows, cols) = stack.blocks[bi].params()[pi].shape();
                let mut worst_abs = 0.0f64;
                let mut max_grad = 0.0f64;
                for r in 0..rows {
                    for c in 0..cols {
                        let orig = stack.blocks[bi].params()[pi].get(r, c);
                        stack.blocks[bi].params_mut()[pi].set(r, c, orig + h);
                        let yp = stack.forward(x).unwrap();
                        stack.blocks[bi].params_mut()[pi].set(r, c, orig - h);
                        let ym = stack.forward(x).unwrap();
                        stack.blocks[bi].params_mut()[pi].set(r, c, orig);
                        let dot = |t: &Tensor| -> f64 {
                            t.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
                        };
                        let fd = (dot(&yp) - dot(&ym)) / (2.0 * h);
                        let an = back.param_grads[bi][pi].get(r, c);
                        worst_abs = worst_abs.max((fd - an).abs());
                        max_grad = max_grad.max(fd.abs());
                    }
                }
                assert!(
                    worst_abs <= tol * max_grad.max(1.0),
                    "block {bi} param {pi}: |fd - grad| {worst_abs:e} vs scale {max_grad:e}"
                );
            }
        }
    }

    #[test]
    fn two_mlp_stack_matches_finite_differences() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mk = |rows, cols, s: f64| Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-s..s));
        let mut stack = ResblockStack {
            blocks: vec![
                Resblock::Mlp(MlpBlock { w1: mk(d, 4 * d, 0.4), w2: mk(4 * d, d, 0.4) }),
                Resblock::Mlp(MlpBlock { w1: mk(d, 4 * d, 0.4), w2: mk(4 * d, d, 0.4) }),
            ],
            precision: BranchPrecision::Wide,
            d_model: d,
        };
        let x = mk(3, d, 1.0);
        let up = mk(3, d, 1.0);
        fd_check_stack(&mut stack, &x, &up, 1e-4);
    }

    #[test]
    fn attention_block_matches_finite_differences() {
        let l = SequenceLayout::new(2, 2, 2).unwrap();
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mk = |rows, cols, s: f64| Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-s..s));
        let mut stack = ResblockStack {
            blocks: vec![Resblock::Attention(AttentionBlock {
                wq: mk(d, d, 0.5),
                wk: mk(d, d, 0.5),
                wv: mk(d, d, 0.5),
                wo: mk(d, d, 0.5),
                mask: build_row_mask(l),
            })],
            precision: BranchPrecision::Wide,
            d_model: d,
        };
        let x = mk(l.total_len(), d, 1.0);
        let up = mk(l.total_len(), d, 1.0);
        fd_check_stack(&mut stack, &x, &up, 1e-4);
    }

    #[test]
    fn forced_overflow_flags_the_block_and_keeps_identity_path_finite() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mk = |rows, cols, s: f64| Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-s..s));
        let stack = ResblockStack {
            blocks: vec![
                Resblock::Mlp(MlpBlock { w1: mk(d, 4 * d, 0.4), w2: mk(4 * d, d, 0.4) }),
                Resblock::Mlp(MlpBlock { w1: mk(d, 4 * d, 0.4), w2: mk(4 * d, d, 0.4) }),
            ],
            precision: BranchPrecision::Fp16,
            d_model: d,
        };
        let x = mk(3, d, 1.0);
        let up = mk(3, d, 1.0);
        // An enormous scale on block 1 overflows its branch gradients in
        // 16-bit storage; block 0 keeps a moderate scale.
        let back = stack.forward_backward(&x, &up, &[256.0, 1e30]).unwrap();
        assert!(!back.finite_flags[1], "overflown block must be flagged");
        assert!(back.finite_flags[0], "preceding block stays finite");
        assert!(back.input_grad.all_finite(), "identity path survives filtering");
        for g in &back.param_grads[1] {
            assert!(g.all_finite(), "filtered branch grads contain no nonfinite values");
        }
    }

    #[test]
    fn fp16_branch_quantizes_stored_tensors() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mk = |rows, cols, s: f64| Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-s..s));
        let stack = ResblockStack {
            blocks: vec![Resblock::Mlp(MlpBlock { w1: mk(d, 4 * d, 0.4), w2: mk(4 * d, d, 0.4) })],
            precision: BranchPrecision::Fp16,
            d_model: d,
        };
        let x = mk(3, d, 1.0);
        let up = mk(3, d, 1.0);
        let back = stack.forward_backward(&x, &up, &[64.0]).unwrap();
        for g in &back.param_grads[0] {
            for &v in g.data() {
                assert!(FP16.is_representable(v), "param grad {v:e} off the fp16 grid");
            }
        }
    }

    // -- sequence model ------------------------------------------------------

    #[test]
    fn weighted_ce_mixes_an_eighth_and_seven_eighths() {
        assert_eq!(weighted_ce(8.0, 8.0), 8.0);
        assert_eq!(weighted_ce(8.0, 0.0), 1.0);
        assert_eq!(weighted_ce(0.0, 8.0), 7.0);
    }

    #[test]
    fn sequence_model_gradients_match_finite_differences() {
        let l = SequenceLayout::new(3, 2, 2).unwrap();
        let mut model =
            SequenceModel::new(l, 8, 8, 6, 1, 3, BranchPrecision::Wide, 42).unwrap();
        let text = [1usize, 2, 3];
        let image = [4usize, 0, 6, 2];
        let scales = vec![1.0; model.n_resblocks()];
        let (_, grads) = model.loss_and_grads(&text, &image, &scales).unwrap();

        let h = 1e-5;
        // Probe a handful of entries in every table kind.
        let check = |model: &mut SequenceModel, which: &str, r: usize, c: usize, analytic: f64| {
            let read = |m: &mut SequenceModel| -> f64 { m.loss(&text, &image).unwrap() };
            let get_set = |m: &mut SequenceModel, v: Option<f64>| -> f64 {
                let t: &mut Tensor = match which {
                    "text_tok" => &mut m.scheme.text_tok,
                    "text_pad" => &mut m.scheme.text_pad,
                    "image_tok" => &mut m.scheme.image_tok,
                    "row_emb" => &mut m.scheme.row_emb,
                    "col_emb" => &mut m.scheme.col_emb,
                    "text_head" => &mut m.text_head,
                    "image_head" => &mut m.image_head,
                    _ => unreachable!(),
                };
                let old = t.get(r, c);
                if let Some(v) = v {
                    t.set(r, c, v);
                }
                old
            };
            let orig = get_set(model, None);
            get_set(model, Some(orig + h));
            let fp = read(model);
            get_set(model, Some(orig - h));
            let fm = read(model);
            get_set(model, Some(orig));
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3),
                "{which}[{r}][{c}]: fd {fd:e} vs analytic {analytic:e}"
            );
        };

        check(&mut model, "text_tok", 2, 1, grads.text_tok.get(2, 1));
        check(&mut model, "text_pad", 1, 0, grads.text_pad.get(1, 0));
        check(&mut model, "image_tok", 4, 3, grads.image_tok.get(4, 3));
        check(&mut model, "row_emb", 1, 2, grads.row_emb.get(1, 2));
        check(&mut model, "col_emb", 0, 5, grads.col_emb.get(0, 5));
        check(&mut model, "text_head", 3, 2, grads.text_head.get(3, 2));
        check(&mut model, "image_head", 0, 4, grads.image_head.get(0, 4));

        // And one stack parameter per block kind.
        {
            let analytic = grads.stack[0][0].get(1, 1);
            let orig = model.stack.blocks[0].params()[0].get(1, 1);
            model.stack.blocks[0].params_mut()[0].set(1, 1, orig + h);
            let fp = model.loss(&text, &image).unwrap();
            model.stack.blocks[0].params_mut()[0].set(1, 1, orig - h);
            let fm = model.loss(&text, &image).unwrap();
            model.stack.blocks[0].params_mut()[0].set(1, 1, orig);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3),
                "attention q_proj: fd {fd:e} vs analytic {analytic:e}"
            );
        }
        {
            let analytic = grads.stack[1][1].get(2, 3);
            let orig = model.stack.blocks[1].params()[1].get(2, 3);
            model.stack.blocks[1].params_mut()[1].set(2, 3, orig + h);
            let fp = model.loss(&text, &image).unwrap();
            model.stack.blocks[1].params_mut()[1].set(2, 3, orig - h);
            let fm = model.loss(&text, &image).unwrap();
            model.stack.blocks[1].params_mut()[1].set(2, 3, orig);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3),
                "mlp_out: fd {fd:e} vs analytic {analytic:e}"
            );
        }
    }

    #[test]
    fn pad_positions_carry_no_text_loss() {
        // A one-token caption has no text targets at all; the image path
        // still produces loss.
        let l = toy_layout();
        let model = SequenceModel::new(l, 32, 64, 8, 1, 3, BranchPrecision::Wide, 3).unwrap();
        let toks: Vec<usize> = (0..16).map(|j| j % 64).collect();
        let scales = vec![1.0; model.n_resblocks()];
        let (loss, grads) = model.loss_and_grads(&[5], &toks, &scales).unwrap();
        assert!(loss > 0.0);
        assert!(
            grads.text_head.data().iter().all(|&v| v == 0.0),
            "no text targets means no text-head gradient"
        );
    }

    // -- gumbel-softmax -------------------------------------------------------

    #[test]
    fn tiny_temperature_recovers_the_noisy_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = [0.3, -1.0, 0.8, 0.1, -0.4, 2.0];
        let noise = sample_gumbel(logits.len(), &mut rng);
        let soft = gumbel_softmax_with_noise(&logits, 1e-4, &noise);
        let winner = (0..logits.len())
            .max_by(|&a, &b| {
                (logits[a] + noise[a])
                    .partial_cmp(&(logits[b] + noise[b]))
                    .unwrap()
            })
            .unwrap();
        assert!(soft[winner] > 0.999, "winner mass {}", soft[winner]);
    }

    #[test]
    fn uniform_logits_average_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = 8;
        let logits = vec![0.0; k];
        let mut mean = vec![0.0; k];
        let draws = 10000;
        for _ in 0..draws {
            let soft = gumbel_softmax(&logits, 1.0, &mut rng);
            for (m, s) in mean.iter_mut().zip(&soft) {
                *m += s / draws as f64;
            }
        }
        for (i, m) in mean.iter().enumerate() {
            assert!(
                (m - 1.0 / k as f64).abs() < 0.01,
                "component {i} mean {m} strays from 1/{k}"
            );
        }
    }

    #[test]
    fn argmax_tokenization_takes_the_largest_logit() {
        assert_eq!(tokenize_argmax(&[1.0, 5.0, 2.0]), 1);
        assert_eq!(tokenize_argmax(&[-3.0]), 0);
    }

    #[test]
    fn kl_to_uniform_examples() {
        let k = 4;
        let uniform = vec![0.25; k];
        assert!(kl_to_uniform(&uniform).abs() < 1e-12);
        let onehot = vec![1.0, 0.0, 0.0, 0.0];
        assert!((kl_to_uniform(&onehot) - (k as f64).ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gumbel_softmax_outputs_lie_on_the_simplex(
            seed in 0u64..1000,
            tau in 0.05f64..5.0,
            k in 2usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let soft = gumbel_softmax(&logits, tau, &mut rng);
            let sum: f64 = soft.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(soft.iter().all(|&v| v >= 0.0));
        }
    }

    // -- logit-Laplace ---------------------------------------------------------

    #[test]
    fn density_at_the_median_is_two() {
        // logit(0.5) = 0, so with mu = 0, b = 1 the density is
        // 1/(2 * 0.25) = 2.
        assert!((logit_laplace_pdf(0.5, 0.0, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_mapping_endpoints_and_inverse() {
        assert!((phi(0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((phi(255.0).unwrap() - 0.9).abs() < 1e-15);
        for x in [0.0, 17.0, 128.0, 200.5, 255.0] {
            let round = phi_inv(phi(x).unwrap());
            assert!((round - x).abs() < 1e-12, "{x} -> {round}");
        }
        assert!(phi(-1.0).is_err());
        assert!(phi(256.0).is_err());
    }

    /// Adaptive Simpson quadrature used as an independent normalization
    /// oracle.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f((a + b) / 2.0) + f(b))
        }
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = (a + b) / 2.0;
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        rec(f, a, b, simpson(f, a, b), tol, 20)
    }

    #[test]
    fn density_normalizes_to_one_by_quadrature() {
        for (mu, b) in [(0.0, 1.0), (1.0, 0.5), (-2.0, 2.0)] {
            // Integrate over (0,1) through the substitution x = sigmoid(t),
            // which regularizes the endpoint singularities; the kink at
            // t = mu splits the domain. Beyond |t| = 30 sigmoid saturates
            // in f64, and the excluded tail mass is far below the 1e-6
            // tolerance.
            let g = |t: f64| {
                let x = sigmoid(t);
                logit_laplace_pdf(x, mu, b) * x * (1.0 - x)
            };
            let integral =
                adaptive_simpson(&g, -30.0, mu, 1e-9) + adaptive_simpson(&g, mu, 30.0, 1e-9);
            assert!(
                (integral - 1.0).abs() < 1e-6,
                "mu {mu} b {b}: integral {integral}"
            );
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let cases = [(12.0, 0.3, -0.2), (200.0, -1.0, 0.5), (90.0, 2.0, 1.0)];
        let h = 1e-6;
        for (x, mu, ln_b) in cases {
            let (dmu, dlnb) = logit_laplace_nll_grad(x, mu, ln_b).unwrap();
            let fmu = (logit_laplace_nll(x, mu + h, ln_b).unwrap()
                - logit_laplace_nll(x, mu - h, ln_b).unwrap())
                / (2.0 * h);
            let flnb = (logit_laplace_nll(x, mu, ln_b + h).unwrap()
                - logit_laplace_nll(x, mu, ln_b - h).unwrap())
                / (2.0 * h);
            assert!((dmu - fmu).abs() < 1e-6, "dmu {dmu} vs {fmu}");
            assert!((dlnb - flnb).abs() < 1e-6, "dlnb {dlnb} vs {flnb}");
        }
    }

    #[test]
    fn reconstruction_ignores_scale_and_inverts_the_mapping() {
        for target in [3.0f64, 100.0, 252.0] {
            let mu = logit(phi(target).unwrap());
            let recon = reconstruct_pixel(mu);
            assert!((recon - target).abs() < 1e-9, "{target} -> {recon}");
        }
        assert_eq!(reconstruct_pixel(50.0), 255.0, "saturates at the top");
        assert_eq!(reconstruct_pixel(-50.0), 0.0, "saturates at the bottom");
    }

    #[test]
    fn effective_kl_weight_examples() {
        // Full-scale dims: 256x256x3 pixels against a 32x32 grid.
        let w = effective_kl_weight(6.6, 256 * 256 * 3, 32 * 32);
        assert!((w - 6.6 / 192.0).abs() < 1e-15);
        // Toy dims: 8x8x1 pixels against a 4x4 grid.
        let w = effective_kl_weight(2.0, 64, 16);
        assert!((w - 0.5).abs() < 1e-15);
        assert_eq!(elb(10.0, 4.0, 0.0, 5, 2), 2.0, "beta 0 is pure reconstruction");
    }

    // -- toy dVAE ----------------------------------------------------------------

    fn tiny_dvae_cfg() -> DvaeConfig {
        DvaeConfig { pixels: 16, grid: 4, vocab: 5, enc_hidden: 6, code_dim: 3, dec_hidden: 7 }
    }

    fn random_images(batch: usize, pixels: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(batch, pixels, |_, _| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn dvae_relaxed_gradients_match_finite_differences() {
        let cfg = tiny_dvae_cfg();
        let mut model = DvaeModel::new(cfg, 21);
        let images = random_images(2, cfg.pixels, 22);
        let noise = gumbel_noise_tensor(2, cfg.grid * cfg.vocab, 23);
        let tau = 0.7;
        let beta = 1.3;
        let (_, grads) = model
            .loss_and_grads(&images, tau, beta, Some(&noise), CodeMode::Relaxed, true)
            .unwrap();
        let grads = grads.unwrap();
        let h = 1e-5;
        let probes: [(usize, usize, usize); 5] =
            [(0, 2, 3), (1, 4, 7), (2, 3, 1), (3, 5, 2), (4, 1, 9)];
        let analytic = [
            grads.we1.get(2, 3),
            grads.we2.get(4, 7),
            grads.codebook.get(3, 1),
            grads.wd1.get(5, 2),
            grads.wd2.get(1, 9),
        ];
        for (pi, &(which, r, c)) in probes.iter().enumerate() {
            let orig = model.params()[which].get(r, c);
            model.params_mut()[which].set(r, c, orig + h);
            let (lp, _) = model
                .loss_and_grads(&images, tau, beta, Some(&noise), CodeMode::Relaxed, false)
                .unwrap();
            model.params_mut()[which].set(r, c, orig - h);
            let (lm, _) = model
                .loss_and_grads(&images, tau, beta, Some(&noise), CodeMode::Relaxed, false)
                .unwrap();
            model.params_mut()[which].set(r, c, orig);
            let fd = (lp.objective - lm.objective) / (2.0 * h);
            assert!(
                (fd - analytic[pi]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {which} [{r}][{c}]: fd {fd:e} vs analytic {:e}",
                analytic[pi]
            );
        }
    }

    #[test]
    fn hard_mode_needs_no_noise_and_beta_zero_drops_kl() {
        let cfg = tiny_dvae_cfg();
        let model = DvaeModel::new(cfg, 31);
        let images = random_images(3, cfg.pixels, 32);
        let (loss, grads) = model
            .loss_and_grads(&images, 1.0, 0.0, None, CodeMode::Hard, false)
            .unwrap();
        assert!(grads.is_none());
        assert!(loss.kl_sum > 0.0, "KL is still reported");
        assert!(
            (loss.objective - loss.recon_nll_sum / (3.0 * cfg.pixels as f64)).abs() < 1e-12,
            "beta 0 leaves reconstruction only"
        );
    }

    #[test]
    fn relaxed_objective_approaches_hard_objective_as_tau_shrinks() {
        // With the same trained-ish logits and coupled noise, the relaxed
        // code converges to a one-hot as tau drops, so the relaxed
        // objective approaches an argmax evaluation. The gap need not hit
        // zero (the noisy argmax can differ from the noise-free one), but
        // it must shrink markedly.
        let cfg = tiny_dvae_cfg();
        let model = DvaeModel::new(cfg, 41);
        let images = random_images(4, cfg.pixels, 42);
        let noise = gumbel_noise_tensor(4, cfg.grid * cfg.vocab, 43).scale(0.1);
        let (hard, _) = model
            .loss_and_grads(&images, 1.0, 1.0, None, CodeMode::Hard, false)
            .unwrap();
        let gap_at = |tau: f64| -> f64 {
            let (relaxed, _) = model
                .loss_and_grads(&images, tau, 1.0, Some(&noise), CodeMode::Relaxed, false)
                .unwrap();
            (relaxed.objective - hard.objective).abs()
        };
        let gap_warm = gap_at(1.0);
        let gap_cold = gap_at(1.0 / 16.0);
        assert!(
            gap_cold < gap_warm,
            "gap at tau=1/16 ({gap_cold:e}) must undercut gap at tau=1 ({gap_warm:e})"
        );
    }
}
