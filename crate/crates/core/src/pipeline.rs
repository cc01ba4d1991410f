//! One system turn: trigger, type, filter, score, decode.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{decode_cold, decode_hopskip, decode_unconstrained, DecodeConfig, DecodeError, DecodeMode};
use crate::history::{build_unified_history, reverse_history, DialogHistory, HistoryError, HistoryOptions, Speaker, Turn, UnifiedHistory};
use crate::kb::{entities_of_type, EntityEmbeddingTable, EntityId, KnowledgeBase};
use crate::model::{ModelBundle, ModelError, TokenId};
use crate::tape::argmax;
use crate::text::split_words;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("the knowledge base has no entities")]
    EmptyKb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub trigger_threshold: f64,
    pub use_trigger: bool,
    pub use_type_filter: bool,
    pub decoder: DecodeConfig,
    pub top_k_report: usize,
    pub history_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trigger_threshold: 0.5,
            use_trigger: true,
            use_type_filter: true,
            decoder: DecodeConfig::default(),
            top_k_report: 10,
            history_len: crate::train::DEFAULT_HISTORY_LEN,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.trigger_threshold > 0.0 && self.trigger_threshold < 1.0) {
            return Err(PipelineError::InvalidConfig("trigger_threshold must lie in (0, 1)".into()));
        }
        self.decoder.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    pub fn history_options(&self) -> HistoryOptions {
        HistoryOptions::new(self.history_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub id: EntityId,
    pub name: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub history_ms: f64,
    pub heads_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnDecision {
    pub triggered: bool,
    pub trigger_score: f64,
    /// Predicted type; `None` when not triggered or when type filtering is off.
    pub type_star: Option<String>,
    pub type_distribution: Vec<(String, f64)>,
    /// Top candidates, best first; empty when not triggered.
    pub candidates: Vec<ScoredEntity>,
    pub chosen: Option<EntityId>,
    pub utterance: String,
    pub tokens: Vec<TokenId>,
    pub decoder_used: DecodeMode,
    pub entity_included: bool,
    /// The type-filtered pool was empty and the full KB was ranked instead.
    pub fallback: bool,
    pub timings: StageTimings,
}

impl TurnDecision {
    /// The reply as a history turn, with its entity mentions linked.
    pub fn agent_turn(&self, model: &ModelBundle, kb: &KnowledgeBase) -> Turn {
        Turn::from_text(Speaker::Agent, &self.utterance, model.vocab(), kb)
    }
}

/// Entities ranked for one summary vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub type_star: usize,
    pub type_distribution: Vec<f64>,
    /// Whole pool, best first; ties keep id order.
    pub ranked: Vec<(EntityId, f64)>,
    pub fallback: bool,
}

/// Everything computed before decoding.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub history: UnifiedHistory,
    pub summary: Vec<f64>,
    pub trigger_score: f64,
    pub ranking: Ranking,
    pub history_ms: f64,
    pub heads_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

pub fn rank_entities(model: &ModelBundle, kb: &KnowledgeBase, s: &[f64], use_type_filter: bool) -> Result<Ranking, PipelineError> {
    let type_distribution = model.type_distribution(s);
    let type_star = argmax(&type_distribution);
    let all = kb.all_entity_ids();
    if all.is_empty() {
        return Err(PipelineError::EmptyKb);
    }
    let (pool, fallback) = if use_type_filter {
        match entities_of_type(kb, type_star) {
            Ok(p) if !p.is_empty() => (p.to_vec(), false),
            _ => (all, true),
        }
    } else {
        (all, false)
    };
    let scores = model.entity_scores(s);
    let mut ranked: Vec<(EntityId, f64)> = pool.into_iter().map(|e| (e, scores[e.0])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(Ranking { type_star, type_distribution, ranked, fallback })
}

pub fn analyze(
    model: &ModelBundle,
    kb: &KnowledgeBase,
    emb: &EntityEmbeddingTable,
    history: &DialogHistory,
    next_user: &Turn,
    cfg: &PipelineConfig,
) -> Result<Analysis, PipelineError> {
    let t0 = Instant::now();
    let h = build_unified_history(history, next_user, emb, model.base_embeddings(), cfg.history_options())?;
    let history_ms = ms_since(t0);
    let t1 = Instant::now();
    let summary = model.encode_history(&h)?;
    let trigger_score = model.trigger_score(&summary);
    let ranking = rank_entities(model, kb, &summary, cfg.use_type_filter)?;
    Ok(Analysis { history: h, summary, trigger_score, ranking, history_ms, heads_ms: ms_since(t1) })
}

/// Decodes the reply for an analyzed turn.
pub fn finish(model: &ModelBundle, kb: &KnowledgeBase, emb: &EntityEmbeddingTable, a: &Analysis, cfg: &PipelineConfig) -> Result<TurnDecision, PipelineError> {
    let started = Instant::now();
    let triggered = !cfg.use_trigger || a.trigger_score >= cfg.trigger_threshold;
    let chosen = triggered.then(|| a.ranking.ranked[0].0);
    let dc = &cfg.decoder;
    let result = match (chosen, dc.mode) {
        (Some(e), DecodeMode::Hopskip) => {
            let rev = reverse_history(&a.history);
            let surface = model.vocab().encode_words(kb.name_tokens(e).map_err(|err| PipelineError::InvalidConfig(err.to_string()))?);
            decode_hopskip(model, &a.history, &rev, &emb.row(e), &surface, dc)?
        }
        (Some(e), DecodeMode::Cold) => {
            let set = model.vocab().encode_words(kb.name_tokens(e).map_err(|err| PipelineError::InvalidConfig(err.to_string()))?);
            decode_cold(model, &a.history, &set, dc)?
        }
        (_, DecodeMode::Beam) => decode_unconstrained(model, &a.history, dc)?,
        _ => decode_unconstrained(model, &a.history, &DecodeConfig { mode: DecodeMode::Greedy, ..dc.clone() })?,
    };
    let utterance = model.vocab().decode(&result.tokens);
    let types = kb.types();
    let candidates = if triggered {
        a.ranking
            .ranked
            .iter()
            .take(cfg.top_k_report)
            .map(|&(id, score)| {
                let ent = kb.entity(id).expect("ranked ids come from the kb");
                ScoredEntity { id, name: ent.name.clone(), type_name: types[ent.type_id].clone(), score }
            })
            .collect()
    } else {
        vec![]
    };
    let mode_used = match (chosen, dc.mode) {
        (_, DecodeMode::Beam) => DecodeMode::Beam,
        (None, _) => DecodeMode::Greedy,
        (Some(_), m) => m,
    };
    let entity_included = chosen.is_some_and(|e| mention_count(&utterance, kb, e) > 0);
    let decode_ms = ms_since(started);
    Ok(TurnDecision {
        triggered,
        trigger_score: a.trigger_score,
        type_star: (triggered && cfg.use_type_filter).then(|| types[a.ranking.type_star].clone()),
        type_distribution: types.iter().cloned().zip(a.ranking.type_distribution.iter().copied()).collect(),
        candidates,
        chosen,
        utterance,
        tokens: result.tokens,
        decoder_used: mode_used,
        entity_included,
        fallback: a.ranking.fallback,
        timings: StageTimings { history_ms: a.history_ms, heads_ms: a.heads_ms, decode_ms, total_ms: a.history_ms + a.heads_ms + decode_ms },
    })
}

pub fn respond_turn(
    model: &ModelBundle,
    kb: &KnowledgeBase,
    emb: &EntityEmbeddingTable,
    history: &DialogHistory,
    next_user: &Turn,
    cfg: &PipelineConfig,
) -> Result<TurnDecision, PipelineError> {
    let a = analyze(model, kb, emb, history, next_user, cfg)?;
    finish(model, kb, emb, &a, cfg)
}

/// Responds to `user_utterance` given the turns before it.
pub fn respond(
    model: &ModelBundle,
    kb: &KnowledgeBase,
    emb: &EntityEmbeddingTable,
    history: &DialogHistory,
    user_utterance: &str,
    cfg: &PipelineConfig,
) -> Result<TurnDecision, PipelineError> {
    let user = Turn::from_text(Speaker::User, user_utterance, model.vocab(), kb);
    respond_turn(model, kb, emb, history, &user, cfg)
}

/// Occurrences of the entity's name in `text` as a whole-word, case-insensitive token run.
pub fn mention_count(text: &str, kb: &KnowledgeBase, e: EntityId) -> usize {
    let Ok(name) = kb.name_tokens(e) else { return 0 };
    let words: Vec<String> = split_words(text).into_iter().map(|w| w.to_lowercase()).collect();
    let name: Vec<String> = name.iter().map(|w| w.to_lowercase()).collect();
    if name.is_empty() {
        return 0;
    }
    words.windows(name.len()).filter(|w| *w == name.as_slice()).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::precompute_embeddings;
    use crate::model::tests::tiny;

    fn tiny_kb() -> KnowledgeBase {
        let json = r#"{"types":["movie","music","food","poi"],"entities":[
            {"id":0,"name":"a","type":"movie","attributes":{}},
            {"id":1,"name":"b","type":"movie","attributes":{}},
            {"id":2,"name":"c","type":"music","attributes":{}},
            {"id":3,"name":"d","type":"food","attributes":{}},
            {"id":4,"name":"e","type":"poi","attributes":{}},
            {"id":5,"name":"f g","type":"poi","attributes":{}}],"triples":[]}"#;
        KnowledgeBase::from_json(json).unwrap()
    }

    #[test]
    fn disabled_trigger_always_recommends() {
        let m = tiny(8);
        let kb = tiny_kb();
        let emb = precompute_embeddings(&kb, &m);
        let cfg = PipelineConfig { use_trigger: false, ..PipelineConfig::default() };
        for text in ["watch the movie tonight", "please", "a b c"] {
            let d = respond(&m, &kb, &emb, &DialogHistory::default(), text, &cfg).unwrap();
            assert!(d.triggered);
            let chosen = d.chosen.unwrap();
            assert_eq!(d.candidates[0].id, chosen);
            assert_eq!(mention_count(&d.utterance, &kb, chosen), 1, "{}", d.utterance);
            let t = d.type_star.clone().unwrap();
            assert!(d.candidates.iter().all(|c| c.type_name == t));
        }
    }

    #[test]
    fn threshold_controls_the_trigger() {
        let m = tiny(8);
        let kb = tiny_kb();
        let emb = precompute_embeddings(&kb, &m);
        let base = respond(&m, &kb, &emb, &DialogHistory::default(), "hello", &PipelineConfig::default()).unwrap();
        let p = base.trigger_score;
        for (thr, fired) in [((p + 1.0) / 2.0, false), (p / 2.0, true)] {
            let cfg = PipelineConfig { trigger_threshold: thr, ..PipelineConfig::default() };
            let d = respond(&m, &kb, &emb, &DialogHistory::default(), "hello", &cfg).unwrap();
            assert_eq!(d.triggered, fired);
            assert_eq!(d.chosen.is_some(), fired);
            assert_eq!(d.candidates.is_empty(), !fired);
        }
    }

    #[test]
    fn respond_is_deterministic() {
        let m = tiny(8);
        let kb = tiny_kb();
        let emb = precompute_embeddings(&kb, &m);
        for mode in [DecodeMode::Greedy, DecodeMode::Hopskip, DecodeMode::Cold] {
            let cfg = PipelineConfig { use_trigger: false, decoder: DecodeConfig { max_len: 6, ..DecodeConfig::with_mode(mode) }, ..PipelineConfig::default() };
            let a = respond(&m, &kb, &emb, &DialogHistory::default(), "watch a movie", &cfg).unwrap();
            let b = respond(&m, &kb, &emb, &DialogHistory::default(), "watch a movie", &cfg).unwrap();
            assert_eq!((a.utterance, a.chosen, a.candidates), (b.utterance, b.chosen, b.candidates));
        }
    }

    #[test]
    fn unfiltered_ranking_covers_the_kb() {
        let m = tiny(8);
        let kb = tiny_kb();
        let s = vec![0.1; 8];
        let r = rank_entities(&m, &kb, &s, false).unwrap();
        assert_eq!(r.ranked.len(), kb.len());
        assert!(r.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        let f = rank_entities(&m, &kb, &s, true).unwrap();
        assert!(f.ranked.iter().all(|(e, _)| kb.entity(*e).unwrap().type_id == f.type_star));
    }

    #[test]
    fn mention_count_is_word_aligned() {
        let kb = tiny_kb();
        assert_eq!(mention_count("f g and F G", &kb, EntityId(5)), 2);
        assert_eq!(mention_count("fg g", &kb, EntityId(5)), 0);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig { trigger_threshold: 1.0, ..PipelineConfig::default() }.validate().is_err());
    }
}
