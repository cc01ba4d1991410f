//! Held-out evaluation of the full pipeline: heads, retrieval and generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDialog;
use crate::decode::DecodeMode;
use crate::history::Speaker;
use crate::kb::{EntityEmbeddingTable, EntityId, KnowledgeBase};
use crate::metrics::{mentioned_entities, MetricsError, MetricsReport, RankedList};
use crate::model::ModelBundle;
use crate::pipeline::{analyze, finish, mention_count, PipelineConfig, PipelineError};
use crate::text::split_words;
use crate::train::history_before;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint expects {expected}, data has {found}")]
    Mismatch { expected: String, found: String },
    #[error("dialog {dialog}, turn {turn}: {message}")]
    BadTurn { dialog: String, turn: usize, message: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub trigger_f1: f64,
    pub type_accuracy: f64,
    /// Share of triggered turns whose reply names the chosen entity exactly once.
    pub constraint_satisfaction: f64,
    pub n_triggered: usize,
    pub n_rec_turns: usize,
    pub decoder: String,
    pub use_trigger: bool,
    pub use_type_filter: bool,
}

/// Per-turn outcome, kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub dialog: String,
    pub turn: usize,
    pub gold_trigger: bool,
    pub triggered: bool,
    pub gold_entity: Option<EntityId>,
    pub chosen: Option<EntityId>,
    pub type_correct: Option<bool>,
    pub gold_rank: Option<usize>,
    pub reply: String,
    pub reference: String,
}

pub fn check_compatible(model: &ModelBundle, kb: &KnowledgeBase) -> Result<(), EvalError> {
    let c = model.config();
    if c.n_entities != kb.len() || c.n_types != kb.num_types() {
        return Err(EvalError::Mismatch {
            expected: format!("{} entities over {} types", c.n_entities, c.n_types),
            found: format!("{} entities over {} types", kb.len(), kb.num_types()),
        });
    }
    Ok(())
}

struct Scored {
    outcome: TurnOutcome,
    ranked: Option<RankedList>,
    hyp: Vec<String>,
    reference: Vec<String>,
    satisfied: Option<bool>,
}

/// Runs the pipeline on every agent turn of `dialogs` with gold histories.
pub fn evaluate(
    model: &ModelBundle,
    kb: &KnowledgeBase,
    emb: &EntityEmbeddingTable,
    dialogs: &[LabeledDialog],
    cfg: &PipelineConfig,
) -> Result<(EvalReport, Vec<TurnOutcome>), EvalError> {
    check_compatible(model, kb)?;
    cfg.validate()?;
    let jobs: Vec<(&LabeledDialog, usize)> = dialogs
        .iter()
        .flat_map(|d| d.turns.iter().enumerate().filter(|(_, t)| t.speaker == Speaker::Agent).map(move |(i, _)| (d, i)))
        .collect();
    let scored = jobs
        .par_iter()
        .map(|&(d, i)| score_turn(model, kb, emb, d, i, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let lists: Vec<RankedList> = scored.iter().filter_map(|s| s.ranked.clone()).collect();
    let hyps: Vec<Vec<String>> = scored.iter().map(|s| s.hyp.clone()).collect();
    let refs: Vec<Vec<String>> = scored.iter().map(|s| s.reference.clone()).collect();
    let metrics = MetricsReport::default().with_retrieval(&lists).with_generation(&hyps, &refs, kb)?;

    let outcomes: Vec<TurnOutcome> = scored.iter().map(|s| s.outcome.clone()).collect();
    let count = |f: &dyn Fn(&TurnOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64;
    let tp = count(&|o| o.gold_trigger && o.triggered);
    let fp = count(&|o| !o.gold_trigger && o.triggered);
    let fn_ = count(&|o| o.gold_trigger && !o.triggered);
    let typed: Vec<bool> = outcomes.iter().filter_map(|o| o.type_correct).collect();
    let sat: Vec<bool> = scored.iter().filter_map(|s| s.satisfied).collect();
    let frac = |v: &[bool]| if v.is_empty() { 0.0 } else { v.iter().filter(|b| **b).count() as f64 / v.len() as f64 };
    let report = EvalReport {
        metrics,
        trigger_f1: if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) },
        type_accuracy: frac(&typed),
        constraint_satisfaction: frac(&sat),
        n_triggered: sat.len(),
        n_rec_turns: lists.len(),
        decoder: cfg.decoder.mode.as_str().to_string(),
        use_trigger: cfg.use_trigger,
        use_type_filter: cfg.use_type_filter,
    };
    Ok((report, outcomes))
}

fn score_turn(
    model: &ModelBundle,
    kb: &KnowledgeBase,
    emb: &EntityEmbeddingTable,
    d: &LabeledDialog,
    i: usize,
    cfg: &PipelineConfig,
) -> Result<Scored, EvalError> {
    let turn = &d.turns[i];
    let (hist, last) = history_before(d, i, model.vocab(), kb);
    let a = analyze(model, kb, emb, &hist, &last, cfg)?;
    let decision = finish(model, kb, emb, &a, cfg)?;
    let gold_trigger = turn.trigger.unwrap_or(false);
    let gold_entity = turn.gold_entity.filter(|_| gold_trigger);
    let ranked = gold_entity
        .map(|g| RankedList::new(a.ranking.ranked.iter().map(|r| r.0).collect(), g))
        .transpose()?;
    let type_correct = gold_entity
        .map(|g| kb.entity(g).map(|e| e.type_id == a.ranking.type_star))
        .transpose()
        .map_err(|e| EvalError::BadTurn { dialog: d.id.clone(), turn: i, message: e.to_string() })?;
    let satisfied = decision.chosen.map(|e| mention_count(&decision.utterance, kb, e) == 1);
    if cfg.decoder.mode == DecodeMode::Hopskip && satisfied == Some(false) {
        log::warn!("dialog {} turn {}: reply does not name the chosen entity exactly once: {}", d.id, i, decision.utterance);
    }
    Ok(Scored {
        outcome: TurnOutcome {
            dialog: d.id.clone(),
            turn: i,
            gold_trigger,
            triggered: decision.triggered,
            gold_entity,
            chosen: decision.chosen,
            type_correct,
            gold_rank: ranked.as_ref().and_then(RankedList::rank),
            reply: decision.utterance.clone(),
            reference: turn.text.clone(),
        },
        ranked,
        hyp: split_words(&decision.utterance),
        reference: split_words(&turn.text),
        satisfied,
    })
}

/// Entities linked in each reply and reference, for inspection.
pub fn outcome_entities(outcomes: &[TurnOutcome], kb: &KnowledgeBase) -> Vec<(Vec<EntityId>, Vec<EntityId>)> {
    outcomes
        .iter()
        .map(|o| (mentioned_entities(&split_words(&o.reply), kb), mentioned_entities(&split_words(&o.reference), kb)))
        .collect()
}
