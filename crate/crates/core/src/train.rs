//! Joint training: trigger BCE, type CE, negative-sampled entity CE and
//! teacher-forced language-model losses for both decoding directions.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDialog;
use crate::history::{plan_history, reversal_permutation, DialogHistory, HistoryOptions, HistoryPlan, Slot, Speaker, Turn};
use crate::kb::{entities_of_type, precompute_embeddings, render_entity_text, EntityEmbeddingTable, EntityId, KnowledgeBase};
use crate::model::{round_to_f32, Direction, ModelBundle, TokenId, Vocab, SPECIALS};
use crate::tape::{argmax, Matrix, NodeId, Tape};
use crate::text::split_words;

pub const DEFAULT_HISTORY_LEN: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training corpus has no agent turns")]
    EmptyCorpus,
    #[error("dialog {dialog}, turn {turn}: {message}")]
    BadExample { dialog: String, turn: usize, message: String },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub trigger: f64,
    #[serde(rename = "type")]
    pub type_: f64,
    pub entity: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { trigger: 1.0, type_: 1.0, entity: 1.0, lm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub neg_samples: usize,
    pub loss_weights: LossWeights,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            neg_samples: 50,
            loss_weights: LossWeights::default(),
            grad_clip: 1.0,
            weight_decay: 0.01,
            seed: 17,
            history_len: DEFAULT_HISTORY_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = self.loss_weights;
        let checks = [
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.neg_samples > 0, "neg_samples must be positive"),
            (self.grad_clip > 0.0, "grad_clip must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.history_len >= 2, "history_len must be at least 2"),
            ([w.trigger, w.type_, w.entity, w.lm].iter().all(|v| *v >= 0.0 && v.is_finite()), "loss weights must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::InvalidConfig(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// One agent turn prepared for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub dialog: usize,
    pub turn: usize,
    pub plan: HistoryPlan,
    pub trigger: bool,
    pub gold_type: Option<usize>,
    pub gold_entity: Option<EntityId>,
    /// Tokens before the gold mention (empty on non-recommendation turns).
    pub left: Vec<TokenId>,
    /// Tokens after the gold mention, or the whole utterance on non-recommendation turns.
    pub right: Vec<TokenId>,
    /// The whole gold utterance.
    pub utterance: Vec<TokenId>,
}

/// Vocabulary over every dialog turn plus every rendered entity text.
pub fn corpus_vocab(dialogs: &[LabeledDialog], kb: &KnowledgeBase) -> Vocab {
    let mut texts: Vec<String> = dialogs.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())).collect();
    texts.extend(kb.all_entity_ids().into_iter().map(|e| render_entity_text(kb, e).expect("listed ids are in the kb")));
    Vocab::build(texts.iter().map(String::as_str))
}

/// Preceding turns of turn `i`, split into history and the most recent turn.
pub fn history_before(dialog: &LabeledDialog, i: usize, vocab: &crate::model::Vocab, kb: &KnowledgeBase) -> (DialogHistory, Turn) {
    let mut turns: Vec<Turn> = dialog.turns[..i].iter().map(|t| Turn::from_text(t.speaker, &t.text, vocab, kb)).collect();
    let last = turns.pop().unwrap_or_else(|| Turn::new(Speaker::User, vec![], vec![]));
    (DialogHistory { turns }, last)
}

/// Every agent turn of every dialog, in corpus order.
pub fn prepare_examples(
    dialogs: &[LabeledDialog],
    kb: &KnowledgeBase,
    model: &ModelBundle,
    opts: HistoryOptions,
) -> Result<Vec<Example>, TrainError> {
    let vocab = model.vocab();
    let mut out = Vec::new();
    for (d, dialog) in dialogs.iter().enumerate() {
        for (i, turn) in dialog.turns.iter().enumerate() {
            if turn.speaker != Speaker::Agent {
                continue;
            }
            let bad = |message: String| TrainError::BadExample { dialog: dialog.id.clone(), turn: i, message };
            let (hist, last) = history_before(dialog, i, vocab, kb);
            let plan = plan_history(&hist, &last, opts).map_err(|e| bad(e.to_string()))?;
            let words = split_words(&turn.text);
            let utterance = vocab.encode_words(&words);
            let trigger = turn.trigger.unwrap_or(false);
            let (mut left, mut right) = (vec![], utterance.clone());
            let mut gold_type = None;
            if trigger {
                let gold = turn.gold_entity.ok_or_else(|| bad("trigger without gold entity".into()))?;
                let m = crate::kb::link_mentions(&words, kb)
                    .into_iter()
                    .find(|m| m.entity == gold)
                    .ok_or_else(|| bad(format!("gold entity {} is not mentioned in the utterance", gold.0)))?;
                left = utterance[..m.start].to_vec();
                right = utterance[m.end..].to_vec();
                gold_type = Some(kb.entity(gold).map_err(|e| bad(e.to_string()))?.type_id);
            }
            out.push(Example {
                dialog: d,
                turn: i,
                plan,
                trigger,
                gold_type,
                gold_entity: turn.gold_entity.filter(|_| trigger),
                left,
                right,
                utterance,
            });
        }
    }
    Ok(out)
}

/// Uniform sample of `n - 1` non-gold candidates, with the gold entity first.
pub fn negative_sample<R: Rng>(candidates: &[EntityId], gold: EntityId, n: usize, rng: &mut R) -> Result<Vec<EntityId>, TrainError> {
    if candidates.is_empty() {
        return Err(TrainError::NoCandidates);
    }
    let others: Vec<EntityId> = candidates.iter().copied().filter(|&e| e != gold).collect();
    let size = n.max(1).min(if candidates.contains(&gold) { candidates.len() } else { candidates.len() + 1 });
    let take = (size - 1).min(others.len());
    let mut out = Vec::with_capacity(take + 1);
    out.push(gold);
    out.extend(index::sample(rng, others.len(), take).into_iter().map(|i| others[i]));
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trigger: f64,
    #[serde(rename = "type")]
    pub type_: f64,
    pub entity: f64,
    pub lm_fwd: f64,
    pub lm_bwd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.trigger, self.type_, self.entity, self.lm_fwd, self.lm_bwd, self.total].iter().all(|v| v.is_finite())
    }
}

/// Running sums of each loss component with its own example count.
#[derive(Clone, Copy, Debug, Default)]
struct LossAccumulator {
    sums: [f64; 6],
    counts: [usize; 6],
}

impl LossAccumulator {
    fn add(&mut self, parts: &ExampleLoss) {
        for (k, v) in parts.values.iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
    }

    fn mean(&self) -> LossBreakdown {
        let m = |k: usize| if self.counts[k] == 0 { 0.0 } else { self.sums[k] / self.counts[k] as f64 };
        LossBreakdown { trigger: m(0), type_: m(1), entity: m(2), lm_fwd: m(3), lm_bwd: m(4), total: m(5) }
    }
}

/// Per-example component values; `None` where the component does not apply or has weight 0.
struct ExampleLoss {
    values: [Option<f64>; 6],
}

/// Static inputs shared by every example's loss graph.
pub struct LossContext<'a> {
    pub kb: &'a KnowledgeBase,
    pub entity_tokens: Vec<Vec<TokenId>>,
    pub weights: LossWeights,
    pub neg_samples: usize,
}

impl<'a> LossContext<'a> {
    pub fn new(kb: &'a KnowledgeBase, model: &ModelBundle, weights: LossWeights, neg_samples: usize) -> Self {
        let entity_tokens = kb
            .entities()
            .iter()
            .map(|e| model.vocab().encode(&render_entity_text(kb, e.id).expect("valid id")))
            .collect();
        Self { kb, entity_tokens, weights, neg_samples }
    }
}

/// Builds the unified-history rows on the tape, embedding entities live.
fn history_rows(model: &ModelBundle, t: &mut Tape, plan: &HistoryPlan, ents: &mut HashMap<EntityId, NodeId>, ctx: &LossContext) -> NodeId {
    let mut parts = Vec::new();
    let mut run: Vec<TokenId> = Vec::new();
    for slot in &plan.slots {
        match *slot {
            Slot::Token(id) => run.push(id),
            Slot::Entity(e) => {
                if !run.is_empty() {
                    parts.push(model.token_rows(t, &std::mem::take(&mut run)));
                }
                parts.push(entity_node(model, t, e, ents, ctx));
            }
        }
    }
    if !run.is_empty() {
        parts.push(model.token_rows(t, &run));
    }
    t.concat(&parts)
}

fn entity_node(model: &ModelBundle, t: &mut Tape, e: EntityId, ents: &mut HashMap<EntityId, NodeId>, ctx: &LossContext) -> NodeId {
    *ents.entry(e).or_insert_with(|| model.entity_embedding_node(t, &ctx.entity_tokens[e.0]))
}

/// Decoder input rows and prediction targets for one teacher-forced direction.
///
/// `prefix` is the (possibly reversed) history, `own` the tokens this direction
/// emits in reading order and `other` the opposite side in this direction's
/// reading order, nearest-to-entity last. `visible` of the opposite side's
/// tokens are shown; `visible == other.len() + 1` also shows its boundary token.
#[allow(clippy::too_many_arguments)]
fn teacher_forced(
    model: &ModelBundle,
    t: &mut Tape,
    dir: Direction,
    prefix: NodeId,
    e_vec: NodeId,
    other: &[TokenId],
    visible: usize,
    own: &[TokenId],
) -> NodeId {
    let (boundary_other, end_own) = match dir {
        Direction::Forward => (SPECIALS.bos, SPECIALS.eos),
        Direction::Backward => (SPECIALS.eos, SPECIALS.bos),
    };
    let mut tokens: Vec<TokenId> = Vec::new();
    if visible > other.len() {
        tokens.push(boundary_other);
    }
    tokens.extend_from_slice(&other[other.len() - visible.min(other.len())..]);
    tokens.push(SPECIALS.ent);
    let start = t.value(prefix).nrows() + 1 + tokens.len() - 1;
    tokens.extend_from_slice(own);
    let rows = model.token_rows(t, &tokens);
    let all = t.concat(&[prefix, e_vec, rows]);
    let positions: Vec<usize> = (start..start + own.len() + 1).collect();
    let targets: Vec<usize> = own.iter().chain(std::iter::once(&end_own)).map(|&x| x as usize).collect();
    let logits = model.decoder_logits(t, dir, all, &positions);
    t.softmax_ce(logits, &targets)
}

/// Loss graph of one example. Returns the weighted total node (if any term is
/// active) and the per-component values.
fn example_graph(model: &ModelBundle, t: &mut Tape, ex: &Example, ctx: &LossContext, rng: &mut ChaCha8Rng) -> Result<(Option<NodeId>, ExampleLoss), TrainError> {
    let w = ctx.weights;
    let mut ents = HashMap::new();
    let h = history_rows(model, t, &ex.plan, &mut ents, ctx);
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    let mut values = [None; 6];
    let needs_summary = w.trigger > 0.0 || (ex.trigger && (w.type_ > 0.0 || w.entity > 0.0));
    let s = needs_summary.then(|| model.encode_rows(t, h));
    if let Some(s) = s.filter(|_| w.trigger > 0.0) {
        let logit = model.trigger_logit_node(t, s);
        let l = t.bce_logits(logit, if ex.trigger { 1.0 } else { 0.0 });
        values[0] = Some(t.scalar(l));
        terms.push((l, w.trigger));
    }
    if ex.trigger {
        let gold = ex.gold_entity.expect("recommendation example has a gold entity");
        let gold_type = ex.gold_type.expect("recommendation example has a gold type");
        if let Some(s) = s.filter(|_| w.type_ > 0.0) {
            let logits = model.type_logits_node(t, s);
            let l = t.softmax_ce(logits, &[gold_type]);
            values[1] = Some(t.scalar(l));
            terms.push((l, w.type_));
        }
        if let Some(s) = s.filter(|_| w.entity > 0.0) {
            let pool = entities_of_type(ctx.kb, gold_type).map_err(|_| TrainError::NoCandidates)?;
            let cands = negative_sample(pool, gold, ctx.neg_samples, rng)?;
            let logits = model.entity_logits_node(t, s, &cands);
            let l = t.softmax_ce(logits, &[0]);
            values[2] = Some(t.scalar(l));
            terms.push((l, w.entity));
        }
        if w.lm > 0.0 {
            let e_vec = entity_node(model, t, gold, &mut ents, ctx);
            let left_fwd: Vec<TokenId> = ex.left.clone();
            let visible = rng.gen_range(0..=left_fwd.len() + 1);
            let l = teacher_forced(model, t, Direction::Forward, h, e_vec, &left_fwd, visible, &ex.right);
            values[3] = Some(t.scalar(l));
            terms.push((l, w.lm));

            let perm = reversal_permutation(&ex.plan.kinds, &ex.plan.turn_of);
            let rev_h = t.rows(h, &perm);
            let right_bwd: Vec<TokenId> = ex.right.iter().rev().copied().collect();
            let left_bwd: Vec<TokenId> = ex.left.iter().rev().copied().collect();
            let visible = rng.gen_range(0..=right_bwd.len() + 1);
            let l = teacher_forced(model, t, Direction::Backward, rev_h, e_vec, &right_bwd, visible, &left_bwd);
            values[4] = Some(t.scalar(l));
            terms.push((l, w.lm));
        }
    } else if w.lm > 0.0 {
        let mut tokens = vec![SPECIALS.bos];
        tokens.extend_from_slice(&ex.utterance);
        let start = t.value(h).nrows();
        let rows = model.token_rows(t, &tokens);
        let all = t.concat(&[h, rows]);
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let targets: Vec<usize> = ex.utterance.iter().chain(std::iter::once(&SPECIALS.eos)).map(|&x| x as usize).collect();
        let logits = model.decoder_logits(t, Direction::Forward, all, &positions);
        let l = t.softmax_ce(logits, &targets);
        values[3] = Some(t.scalar(l));
        terms.push((l, w.lm));
    }
    if terms.is_empty() {
        return Ok((None, ExampleLoss { values }));
    }
    let total = t.weighted_sum(&terms);
    values[5] = Some(t.scalar(total));
    Ok((Some(total), ExampleLoss { values }))
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Mean loss components over `batch` without computing gradients.
pub fn training_losses(model: &ModelBundle, batch: &[Example], ctx: &LossContext, seed: u64) -> Result<LossBreakdown, TrainError> {
    let mut acc = LossAccumulator::default();
    for (i, ex) in batch.iter().enumerate() {
        let mut t = Tape::new(model.params());
        let (_, parts) = example_graph(model, &mut t, ex, ctx, &mut example_rng(seed, 0, i))?;
        acc.add(&parts);
    }
    Ok(acc.mean())
}

/// Mean-over-batch total loss and its gradient for every parameter.
/// Parameters no loss term reaches get `None`.
pub fn batch_gradients(
    model: &ModelBundle,
    batch: &[(usize, &Example)],
    ctx: &LossContext,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Vec<Option<Matrix>>, LossAccumulatorSnapshot), TrainError> {
    let per_example: Vec<Result<(f64, Vec<Option<Matrix>>, ExampleLoss), TrainError>> = batch
        .par_iter()
        .map(|&(index, ex)| {
            let mut t = Tape::new(model.params());
            let (total, parts) = example_graph(model, &mut t, ex, ctx, &mut example_rng(seed, epoch, index))?;
            Ok(match total {
                Some(node) => (t.scalar(node), t.backward(node).into_params(), parts),
                None => (0.0, vec![None; model.params().len()], parts),
            })
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Option<Matrix>> = vec![None; model.params().len()];
    let mut loss = 0.0;
    let mut acc = LossAccumulator::default();
    for r in per_example {
        let (l, g, parts) = r?;
        loss += l * scale;
        acc.add(&parts);
        for (slot, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                match slot {
                    Some(s) => s.scaled_add(scale, &gi),
                    None => *slot = Some(gi * scale),
                }
            }
        }
    }
    Ok((loss, grads, LossAccumulatorSnapshot(acc)))
}

/// Opaque per-batch component sums, merged into epoch averages.
pub struct LossAccumulatorSnapshot(LossAccumulator);

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    /// Updates every parameter that has a gradient; others are left untouched.
    /// Parameters stay on the `f32` grid.
    pub fn step(&mut self, model: &mut ModelBundle, grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            let decay = if decays(model.params().name(id)) { self.weight_decay } else { 0.0 };
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let p = model.params_mut().get_mut(id);
            ndarray::Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= lr * (update + decay * *p);
            });
            round_to_f32(p);
        }
    }
}

fn decays(name: &str) -> bool {
    !(name.contains(".ln") || name.ends_with(".b") || name.ends_with(".g"))
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub trigger_f1: f64,
    pub type_accuracy: f64,
    pub recall_at_1: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub dev: Option<HeadMetrics>,
    pub wall_time_secs: f64,
}

/// Trigger F1, type accuracy and type-filtered Recall@1 from the heads alone.
pub fn head_metrics(model: &ModelBundle, kb: &KnowledgeBase, emb: &EntityEmbeddingTable, examples: &[Example]) -> HeadMetrics {
    let rows: Vec<(bool, bool, Option<(bool, bool)>)> = examples
        .par_iter()
        .map(|ex| {
            let h = ex.plan.materialize(emb, model.base_embeddings()).expect("plan entities are in the table");
            let s = model.encode_history(&h).expect("history fits the context");
            let fired = model.trigger_score(&s) >= 0.5;
            let rec = ex.gold_type.zip(ex.gold_entity).map(|(gt, ge)| {
                let t_star = model.predict_type(&s);
                let scores = model.entity_scores(&s);
                let pool = entities_of_type(kb, t_star).expect("valid type");
                let best = pool.iter().copied().max_by(|a, b| scores[a.0].total_cmp(&scores[b.0]).then(b.0.cmp(&a.0)));
                (t_star == gt, best == Some(ge))
            });
            (ex.trigger, fired, rec)
        })
        .collect();
    let tp = rows.iter().filter(|r| r.0 && r.1).count() as f64;
    let fp = rows.iter().filter(|r| !r.0 && r.1).count() as f64;
    let fn_ = rows.iter().filter(|r| r.0 && !r.1).count() as f64;
    let recs: Vec<(bool, bool)> = rows.iter().filter_map(|r| r.2).collect();
    let frac = |f: &dyn Fn(&(bool, bool)) -> bool| {
        if recs.is_empty() {
            0.0
        } else {
            recs.iter().filter(|r| f(r)).count() as f64 / recs.len() as f64
        }
    };
    HeadMetrics {
        trigger_f1: if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) },
        type_accuracy: frac(&|r| r.0),
        recall_at_1: frac(&|r| r.1),
        n: rows.len(),
    }
}

/// Trains in place. `dev` examples, when given, are scored after the last epoch.
pub fn train(
    model: &mut ModelBundle,
    examples: &[Example],
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    dev: Option<&[Example]>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let ctx = LossContext::new(kb, model, cfg.loss_weights, cfg.neg_samples);
    let mut opt = AdamW::new(model.params().len(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &Example)> = chunk.iter().map(|&i| (i, &examples[i])).collect();
            let (loss, mut grads, parts) = batch_gradients(model, &batch, &ctx, cfg.seed, epoch)?;
            if !loss.is_finite() || !parts.0.mean().is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            for k in 0..6 {
                acc.sums[k] += parts.0.sums[k];
                acc.counts[k] += parts.0.counts[k];
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = if step < steps_per_epoch { cfg.lr * (step + 1) as f64 / steps_per_epoch as f64 } else { cfg.lr };
            opt.step(model, &grads, lr);
            step += 1;
        }
        let er = EpochReport { epoch: epoch + 1, losses: acc.mean() };
        log::info!("epoch {} {:?}", er.epoch, er.losses);
        on_epoch(&er);
        report.epochs.push(er);
    }
    if let Some(dev) = dev {
        let emb = precompute_embeddings(kb, model);
        report.dev = Some(head_metrics(model, kb, &emb, dev));
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Index of the best-scoring entity; ties go to the lowest id.
pub fn best_entity(scores: &[f64], pool: &[EntityId]) -> Option<EntityId> {
    let vals: Vec<f64> = pool.iter().map(|e| scores[e.0]).collect();
    (!pool.is_empty()).then(|| pool[argmax(&vals)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};
    use crate::model::{Component, ModelConfig};

    pub(crate) fn setup(n_dialogs: usize, dim: usize) -> (crate::data::Corpus, ModelBundle) {
        let corpus = generate_corpus(&CorpusConfig { n_dialogs, n_entities_per_type: 5, ..CorpusConfig::default() }).unwrap();
        let vocab = corpus_vocab(&corpus.train, &corpus.kb);
        let mut cfg = ModelConfig::desk(vocab.len(), 4, corpus.kb.len());
        cfg.dim = dim;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.max_context_length = 128;
        let model = ModelBundle::new(cfg, vocab, 5).unwrap();
        (corpus, model)
    }

    #[test]
    fn negative_sample_rules() {
        let cands: Vec<EntityId> = (0..20).map(EntityId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = negative_sample(&cands, EntityId(3), 50, &mut rng).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, cands);
        assert!(negative_sample(&[], EntityId(0), 3, &mut rng).is_err());
        let mut counts = [0usize; 20];
        let draws = 10_000;
        for _ in 0..draws {
            let s = negative_sample(&cands, EntityId(7), 5, &mut rng).unwrap();
            assert_eq!(s.len(), 5);
            assert_eq!(s.iter().filter(|&&e| e == EntityId(7)).count(), 1);
            for e in s {
                counts[e.0] += 1;
            }
        }
        let p = 4.0 / 19.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (e, &c) in counts.iter().enumerate() {
            if e != 7 {
                assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "entity {e}: {c}");
            }
        }
    }

    #[test]
    fn hand_computed_losses() {
        let (corpus, mut model) = setup(20, 8);
        for name in ["head.trigger", "head.type", "head.entity"] {
            let id = model.params().find(name).unwrap();
            let dim = model.params().get(id).dim();
            model.set_param(name, Matrix::zeros(dim));
        }
        let opts = HistoryOptions::new(DEFAULT_HISTORY_LEN);
        let examples = prepare_examples(&corpus.train, &corpus.kb, &model, opts).unwrap();
        let pos = examples.iter().find(|e| e.trigger).unwrap().clone();
        let neg = examples.iter().find(|e| !e.trigger).unwrap().clone();
        let ctx = LossContext::new(&corpus.kb, &model, LossWeights::default(), 5);
        let l = training_losses(&model, &[pos.clone(), neg], &ctx, 1).unwrap();
        assert!((l.trigger - 2f64.ln()).abs() < 1e-12);
        assert!((l.type_ - 4f64.ln()).abs() < 1e-12);
        assert!((l.entity - 5f64.ln()).abs() < 1e-12);
        assert!(l.is_finite() && l.lm_fwd > 0.0 && l.lm_bwd > 0.0);
    }

    #[test]
    fn examples_split_at_the_gold_mention() {
        let (corpus, model) = setup(20, 8);
        let examples = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
        for ex in examples.iter().filter(|e| e.trigger) {
            let name = model.vocab().encode(&corpus.kb.entity(ex.gold_entity.unwrap()).unwrap().name);
            let mut joined = ex.left.clone();
            joined.extend(&name);
            joined.extend(&ex.right);
            assert_eq!(joined, ex.utterance);
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (corpus, mut model) = setup(20, 8);
        let before = model.clone();
        let examples = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
        let report = train(&mut model, &examples, &corpus.kb, &TrainConfig { epochs: 0, ..TrainConfig::default() }, None, |_| {}).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(model, before);
    }

    fn changed(a: &ModelBundle, b: &ModelBundle, c: Component) -> bool {
        a.component_params(c).into_iter().any(|id| a.params().get(id) != b.params().get(id))
    }

    #[test]
    fn single_loss_only_moves_reachable_parameters() {
        let (corpus, model) = setup(10, 8);
        let examples = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
        let zero = LossWeights { trigger: 0.0, type_: 0.0, entity: 0.0, lm: 0.0 };
        let cases = [
            (LossWeights { trigger: 1.0, ..zero }, vec![Component::TriggerHead, Component::Encoder], vec![Component::TypeHead, Component::EntityHead, Component::ForwardDecoder, Component::BackwardDecoder]),
            (LossWeights { type_: 1.0, ..zero }, vec![Component::TypeHead], vec![Component::TriggerHead, Component::EntityHead, Component::ForwardDecoder, Component::BackwardDecoder]),
            (LossWeights { entity: 1.0, ..zero }, vec![Component::EntityHead], vec![Component::TriggerHead, Component::TypeHead, Component::ForwardDecoder, Component::BackwardDecoder]),
            (LossWeights { lm: 1.0, ..zero }, vec![Component::ForwardDecoder, Component::BackwardDecoder], vec![Component::TriggerHead, Component::TypeHead, Component::EntityHead, Component::Encoder]),
        ];
        for (weights, moved, frozen) in cases {
            let mut m = model.clone();
            let cfg = TrainConfig { epochs: 1, loss_weights: weights, ..TrainConfig::default() };
            train(&mut m, &examples, &corpus.kb, &cfg, None, |_| {}).unwrap();
            for c in moved {
                assert!(changed(&model, &m, c), "{weights:?} should move {c:?}");
            }
            for c in frozen {
                assert!(!changed(&model, &m, c), "{weights:?} must not move {c:?}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, model) = setup(10, 8);
        let examples = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let mut a = model.clone();
        let mut b = model.clone();
        let ra = train(&mut a, &examples, &corpus.kb, &cfg, None, |_| {}).unwrap();
        let rb = train(&mut b, &examples, &corpus.kb, &cfg, None, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
    }
}
