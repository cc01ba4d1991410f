//! Tiny transformer stacks for the shared history encoder, the two directional
//! decoders and the entity text encoder, plus the trigger, type and entity heads.
//!
//! Parameters are stored as `f64` for exact gradient checks but always hold
//! values representable in `f32`, which is the checkpoint storage format.

mod checkpoint;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use vocab::{detokenize, tokenize, Specials, TokenId, Vocab, SPECIALS, SPECIAL_TOKENS};

use ndarray::{s, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::fluency_terms;
use crate::history::{PositionKind, UnifiedHistory};
use crate::kb::EntityId;
use crate::tape::{argmax, sigmoid, softmax, softmax_rows, Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("sequence of length {len} exceeds the context limit of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("history must be non-empty and end with the [SUM] marker")]
    MissingSummary,
    #[error("entity {0} is out of range for the entity head")]
    InvalidEntity(usize),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("checkpoint is truncated: expected {expected} data bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_context_length: usize,
    pub vocab_size: usize,
    pub n_types: usize,
    pub n_entities: usize,
    pub entity_layers: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: width 64, two layers, four heads.
    pub fn desk(vocab_size: usize, n_types: usize, n_entities: usize) -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_context_length: 256,
            vocab_size,
            n_types,
            n_entities,
            entity_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("max_context_length", self.max_context_length),
            ("vocab_size", self.vocab_size),
            ("n_types", self.n_types),
            ("entity_layers", self.entity_layers),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Left-to-right.
    Forward,
    /// Right-to-left.
    Backward,
}

/// Parameter groups, used for gradient checks and isolation tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    BaseEmbedding,
    Encoder,
    ForwardDecoder,
    BackwardDecoder,
    EntityEncoder,
    TriggerHead,
    TypeHead,
    EntityHead,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::BaseEmbedding,
        Component::Encoder,
        Component::ForwardDecoder,
        Component::BackwardDecoder,
        Component::EntityEncoder,
        Component::TriggerHead,
        Component::TypeHead,
        Component::EntityHead,
    ];

    fn prefix(self) -> &'static str {
        match self {
            Component::BaseEmbedding => "base_emb",
            Component::Encoder => "encoder.",
            Component::ForwardDecoder => "fwd.",
            Component::BackwardDecoder => "bwd.",
            Component::EntityEncoder => "entity.",
            Component::TriggerHead => "head.trigger",
            Component::TypeHead => "head.type",
            Component::EntityHead => "head.entity",
        }
    }
}

/// One element of a decoder context after the conditioning prefix.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextItem {
    Token(TokenId),
    Vector(Vec<f64>),
}

/// Conditioning prefix (history vectors) followed by tokens and raw vectors.
#[derive(Clone, Debug)]
pub struct DecoderContext<'a> {
    pub prefix: ArrayView2<'a, f64>,
    pub items: Vec<ContextItem>,
}

impl DecoderContext<'_> {
    pub fn len(&self) -> usize {
        self.prefix.nrows() + self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.items
            .iter()
            .filter_map(|i| match i {
                ContextItem::Token(t) => Some(*t),
                ContextItem::Vector(_) => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits) }
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.probs) as TokenId
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|&p| p >= 0.0 && p.is_finite()) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct StackIds {
    pos: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderIds {
    stack: StackIds,
    lm_w: ParamId,
    lm_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    base_emb: ParamId,
    encoder: StackIds,
    fwd: DecoderIds,
    bwd: DecoderIds,
    entity: StackIds,
    entity_proj_w: ParamId,
    entity_proj_b: ParamId,
    trigger_w: ParamId,
    type_w: ParamId,
    entity_v: ParamId,
}

/// Deterministic parameter factory: every tensor is created in a fixed order.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let value = match self.rng.as_mut() {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng) as f32 as f64)
            }
            None => Matrix::zeros((rows, cols)),
        };
        self.store.add(name, value)
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Matrix::from_elem((rows, cols), v))
    }

    fn stack(&mut self, prefix: &str, cfg: &ModelConfig, layers: usize) -> StackIds {
        let d = cfg.dim;
        let hidden = d * cfg.ffn_mult;
        let pos = self.normal(format!("{prefix}.pos"), cfg.max_context_length, d, 0.1);
        let resid_std = 1.0 / (d as f64).sqrt() / (2.0 * layers as f64).sqrt();
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                BlockIds {
                    ln1_g: self.constant(format!("{p}.ln1.g"), 1, d, 1.0),
                    ln1_b: self.constant(format!("{p}.ln1.b"), 1, d, 0.0),
                    qkv_w: self.normal(format!("{p}.attn.qkv.w"), d, 3 * d, 1.0 / (d as f64).sqrt()),
                    qkv_b: self.constant(format!("{p}.attn.qkv.b"), 1, 3 * d, 0.0),
                    out_w: self.normal(format!("{p}.attn.out.w"), d, d, resid_std),
                    out_b: self.constant(format!("{p}.attn.out.b"), 1, d, 0.0),
                    ln2_g: self.constant(format!("{p}.ln2.g"), 1, d, 1.0),
                    ln2_b: self.constant(format!("{p}.ln2.b"), 1, d, 0.0),
                    ff1_w: self.normal(format!("{p}.ff1.w"), d, hidden, 1.0 / (d as f64).sqrt()),
                    ff1_b: self.constant(format!("{p}.ff1.b"), 1, hidden, 0.0),
                    ff2_w: self.normal(format!("{p}.ff2.w"), hidden, d, 1.0 / (hidden as f64).sqrt() / (2.0 * layers as f64).sqrt()),
                    ff2_b: self.constant(format!("{p}.ff2.b"), 1, d, 0.0),
                }
            })
            .collect();
        StackIds {
            pos,
            blocks,
            lnf_g: self.constant(format!("{prefix}.lnf.g"), 1, d, 1.0),
            lnf_b: self.constant(format!("{prefix}.lnf.b"), 1, d, 0.0),
        }
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig) -> DecoderIds {
        let stack = self.stack(prefix, cfg, cfg.layers);
        let lm_w = self.normal(format!("{prefix}.lm.w"), cfg.dim, cfg.vocab_size, 1.0 / (cfg.dim as f64).sqrt());
        let lm_b = self.constant(format!("{prefix}.lm.b"), 1, cfg.vocab_size, 0.0);
        DecoderIds { stack, lm_w, lm_b }
    }

    fn layout(&mut self, cfg: &ModelConfig) -> Layout {
        let d = cfg.dim;
        let head_std = 1.0 / (d as f64).sqrt();
        let base_emb = self.normal("base_emb".into(), cfg.vocab_size, d, 0.3);
        let encoder = self.stack("encoder", cfg, cfg.layers);
        let fwd = self.decoder("fwd", cfg);
        let bwd = self.decoder("bwd", cfg);
        let entity = self.stack("entity", cfg, cfg.entity_layers);
        let entity_proj_w = self.normal("entity.proj.w".into(), d, d, 0.3 * head_std);
        let entity_proj_b = self.constant("entity.proj.b".into(), 1, d, 0.0);
        let trigger_w = self.normal("head.trigger".into(), d, 1, head_std);
        let type_w = self.normal("head.type".into(), d, cfg.n_types, head_std);
        let entity_v = self.normal("head.entity".into(), d, cfg.n_entities, head_std);
        Layout {
            base_emb,
            encoder,
            fwd,
            bwd,
            entity,
            entity_proj_w,
            entity_proj_b,
            trigger_w,
            type_w,
            entity_v,
        }
    }
}

/// All model parameters together with the vocabulary they index.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

impl ModelBundle {
    /// Randomly initialized model; deterministic given `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, vocab, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Same layout as [`ModelBundle::new`] with every weight matrix zeroed.
    pub(crate) fn zeroed(config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        Self::build(config, vocab, None)
    }

    fn build(config: ModelConfig, vocab: Vocab, rng: Option<ChaCha8Rng>) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocab has {} tokens but config declares {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = ParamStore::new();
        let layout = Init { store: &mut params, rng }.layout(&config);
        Ok(Self { config, vocab, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn specials(&self) -> Specials {
        self.vocab.specials()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn base_embeddings(&self) -> &Matrix {
        self.params.get(self.layout.base_emb)
    }

    pub fn component_params(&self, component: Component) -> Vec<ParamId> {
        let prefix = component.prefix();
        self.params.iter().filter(|(_, name, _)| name.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }

    pub fn trigger_weights(&self) -> ArrayView1<'_, f64> {
        self.params.get(self.layout.trigger_w).column(0)
    }

    pub fn type_weights(&self) -> &Matrix {
        self.params.get(self.layout.type_w)
    }

    pub fn entity_weights(&self) -> &Matrix {
        self.params.get(self.layout.entity_v)
    }

    pub fn set_param(&mut self, name: &str, value: Matrix) {
        let id = self.params.find(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(self.params.get(id).dim(), value.dim(), "shape of {name}");
        *self.params.get_mut(id) = value;
    }

    // ---- tape-level building blocks ----

    pub(crate) fn token_rows(&self, t: &mut Tape, ids: &[TokenId]) -> NodeId {
        let table = t.param(self.layout.base_emb);
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        t.rows(table, &rows)
    }

    fn block(&self, t: &mut Tape, b: &BlockIds, x: NodeId, causal: bool) -> NodeId {
        let (g1, b1) = (t.param(b.ln1_g), t.param(b.ln1_b));
        let a = t.layer_norm(x, g1, b1);
        let (wq, bq) = (t.param(b.qkv_w), t.param(b.qkv_b));
        let qkv = t.matmul(a, wq);
        let qkv = t.add_row(qkv, bq);
        let att = t.attention(qkv, self.config.heads, causal);
        let (wo, bo) = (t.param(b.out_w), t.param(b.out_b));
        let o = t.matmul(att, wo);
        let o = t.add_row(o, bo);
        let x = t.add(x, o);
        let (g2, b2) = (t.param(b.ln2_g), t.param(b.ln2_b));
        let c = t.layer_norm(x, g2, b2);
        let (w1, bb1) = (t.param(b.ff1_w), t.param(b.ff1_b));
        let h = t.matmul(c, w1);
        let h = t.add_row(h, bb1);
        let h = t.gelu(h);
        let (w2, bb2) = (t.param(b.ff2_w), t.param(b.ff2_b));
        let f = t.matmul(h, w2);
        let f = t.add_row(f, bb2);
        t.add(x, f)
    }

    fn run_stack(&self, t: &mut Tape, stack: &StackIds, x: NodeId, causal: bool) -> NodeId {
        let len = t.value(x).nrows();
        assert!(len <= self.config.max_context_length, "stack input longer than the context limit");
        let pos_table = t.param(stack.pos);
        let positions: Vec<usize> = (0..len).collect();
        let pos = t.rows(pos_table, &positions);
        let mut h = t.add(x, pos);
        for b in &stack.blocks {
            h = self.block(t, b, h, causal);
        }
        let (g, b) = (t.param(stack.lnf_g), t.param(stack.lnf_b));
        t.layer_norm(h, g, b)
    }

    /// Contextual output of the shared encoder at the last ([SUM]) position.
    pub(crate) fn encode_rows(&self, t: &mut Tape, rows: NodeId) -> NodeId {
        let h = self.run_stack(t, &self.layout.encoder, rows, false);
        let last = t.value(h).nrows() - 1;
        t.row(h, last)
    }

    /// Next-token logits of a decoder at the given positions of its context.
    pub(crate) fn decoder_logits(&self, t: &mut Tape, dir: Direction, rows: NodeId, positions: &[usize]) -> NodeId {
        let dec = match dir {
            Direction::Forward => &self.layout.fwd,
            Direction::Backward => &self.layout.bwd,
        };
        let h = self.run_stack(t, &dec.stack, rows, true);
        let sel = t.rows(h, positions);
        let (w, b) = (t.param(dec.lm_w), t.param(dec.lm_b));
        let logits = t.matmul(sel, w);
        t.add_row(logits, b)
    }

    /// Entity text encoder: encode, mean-pool, then one affine layer.
    pub(crate) fn entity_embedding_node(&self, t: &mut Tape, ids: &[TokenId]) -> NodeId {
        let ids: Vec<TokenId> = if ids.is_empty() {
            vec![SPECIALS.unk]
        } else {
            ids[..ids.len().min(self.config.max_context_length)].to_vec()
        };
        let rows = self.token_rows(t, &ids);
        let h = self.run_stack(t, &self.layout.entity, rows, false);
        let pooled = t.mean_rows(h);
        let (w, b) = (t.param(self.layout.entity_proj_w), t.param(self.layout.entity_proj_b));
        let out = t.matmul(pooled, w);
        t.add_row(out, b)
    }

    pub(crate) fn trigger_logit_node(&self, t: &mut Tape, s: NodeId) -> NodeId {
        let w = t.param(self.layout.trigger_w);
        t.matmul(s, w)
    }

    pub(crate) fn type_logits_node(&self, t: &mut Tape, s: NodeId) -> NodeId {
        let w = t.param(self.layout.type_w);
        t.matmul(s, w)
    }

    pub(crate) fn entity_logits_node(&self, t: &mut Tape, s: NodeId, candidates: &[EntityId]) -> NodeId {
        let v = t.param(self.layout.entity_v);
        let cols: Vec<usize> = candidates.iter().map(|e| e.0).collect();
        let picked = t.cols(v, &cols);
        t.matmul(s, picked)
    }

    pub(crate) fn context_rows(&self, t: &mut Tape, ctx: &DecoderContext) -> NodeId {
        let mut parts = Vec::new();
        if ctx.prefix.nrows() > 0 {
            parts.push(t.input(ctx.prefix.to_owned()));
        }
        let mut run: Vec<TokenId> = Vec::new();
        for item in &ctx.items {
            match item {
                ContextItem::Token(id) => run.push(*id),
                ContextItem::Vector(v) => {
                    if !run.is_empty() {
                        parts.push(self.token_rows(t, &std::mem::take(&mut run)));
                    }
                    parts.push(t.input(Matrix::from_shape_vec((1, v.len()), v.clone()).expect("row vector")));
                }
            }
        }
        if !run.is_empty() {
            parts.push(self.token_rows(t, &run));
        }
        t.concat(&parts)
    }

    // ---- inference ----

    /// Shared-encoder summary vector of a unified history.
    pub fn encode_history(&self, h: &UnifiedHistory) -> Result<Vec<f64>, ModelError> {
        if h.kinds.last() != Some(&PositionKind::SumMarker) {
            return Err(ModelError::MissingSummary);
        }
        self.check_len(h.len())?;
        let mut t = Tape::new(&self.params);
        let rows = t.input(h.vectors.clone());
        let s = self.encode_rows(&mut t, rows);
        Ok(t.value(s).row(0).to_vec())
    }

    pub fn trigger_score(&self, s: &[f64]) -> f64 {
        sigmoid(ArrayView1::from(s).dot(&self.trigger_weights()))
    }

    pub fn type_logits(&self, s: &[f64]) -> Vec<f64> {
        ArrayView1::from(s).dot(self.type_weights()).to_vec()
    }

    pub fn type_distribution(&self, s: &[f64]) -> Vec<f64> {
        softmax(&self.type_logits(s))
    }

    /// Highest-scoring type; ties go to the lowest index.
    pub fn predict_type(&self, s: &[f64]) -> usize {
        argmax(&self.type_logits(s))
    }

    pub fn score_entity(&self, s: &[f64], e: EntityId) -> Result<f64, ModelError> {
        let v = self.entity_weights();
        if e.0 >= v.ncols() {
            return Err(ModelError::InvalidEntity(e.0));
        }
        Ok(ArrayView1::from(s).dot(&v.column(e.0)))
    }

    /// Scores of every entity in id order.
    pub fn entity_scores(&self, s: &[f64]) -> Vec<f64> {
        ArrayView1::from(s).dot(self.entity_weights()).to_vec()
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len == 0 || len > self.config.max_context_length {
            return Err(ModelError::ContextTooLong { len, max: self.config.max_context_length });
        }
        Ok(())
    }

    pub fn next_token_distribution(&self, dir: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError> {
        self.check_len(ctx.len())?;
        let mut t = Tape::new(&self.params);
        let rows = self.context_rows(&mut t, ctx);
        let logits = self.decoder_logits(&mut t, dir, rows, &[ctx.len() - 1]);
        Ok(TokenDistribution::from_logits(t.value(logits).row(0).as_slice().expect("contiguous row")))
    }

    /// Next-token distributions at every position of the context (one causal pass).
    pub fn position_distributions(&self, dir: Direction, ctx: &DecoderContext) -> Result<Vec<TokenDistribution>, ModelError> {
        self.check_len(ctx.len())?;
        let mut t = Tape::new(&self.params);
        let rows = self.context_rows(&mut t, ctx);
        let positions: Vec<usize> = (0..ctx.len()).collect();
        let logits = self.decoder_logits(&mut t, dir, rows, &positions);
        let probs = softmax_rows(t.value(logits).view());
        Ok(probs.rows().into_iter().map(|r| TokenDistribution { probs: r.to_vec() }).collect())
    }

    /// Entity text encoder output for a token sequence.
    pub fn embed_text(&self, ids: &[TokenId]) -> Vec<f64> {
        let mut t = Tape::new(&self.params);
        let out = self.entity_embedding_node(&mut t, ids);
        t.value(out).row(0).to_vec()
    }

    /// Relaxed fluency score of a column-stochastic `Y` (vocab x T) under the
    /// forward decoder, and its gradient with respect to `Y`.
    ///
    /// Position `t` is fed the expected embedding `sum_w Y[w, t-1] * base_emb[w]`
    /// of the previous column, after `prefix` and `[BOS]`.
    pub fn relaxed_fluency(&self, prefix: ArrayView2<f64>, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>), ModelError> {
        let (vocab, cols) = y.dim();
        assert_eq!(vocab, self.config.vocab_size, "relaxed sequence rows must span the vocabulary");
        let len = prefix.nrows() + cols;
        self.check_len(len)?;
        let base = self.base_embeddings();
        let mut t = Tape::new(&self.params);
        let mut parts = Vec::new();
        if prefix.nrows() > 0 {
            parts.push(t.input(prefix.to_owned()));
        }
        parts.push(self.token_rows(&mut t, &[SPECIALS.bos]));
        let soft = if cols > 1 {
            let expected = y.slice(s![.., ..cols - 1]).t().dot(base);
            let node = t.input(expected);
            parts.push(node);
            Some(node)
        } else {
            None
        };
        let rows = t.concat(&parts);
        let positions: Vec<usize> = (prefix.nrows()..len).collect();
        let logits = self.decoder_logits(&mut t, Direction::Forward, rows, &positions);
        let probs = softmax_rows(t.value(logits).view());
        let (value, seed, mut grad) = fluency_terms(probs.view(), y);
        if !want_grad {
            return Ok((value, None));
        }
        if let Some(node) = soft {
            let grads = t.backward_with(logits, seed);
            if let Some(d_expected) = grads.node(node) {
                let d_y = base.dot(&d_expected.t());
                grad.slice_mut(s![.., ..cols - 1]).scaled_add(1.0, &d_y);
            }
        }
        Ok((value, Some(grad)))
    }
}

/// Rounds every value to the nearest `f32`.
pub(crate) fn round_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|v| v as f32 as f64);
}
