//! Retrieval metrics (Recall@k, MRR) and generation metrics (BLEU-1/2,
//! entity F1 over sets and multisets).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::kb::{link_mentions, EntityId, KnowledgeBase};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("metric is undefined on an empty collection")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("BLEU order must be 1 or 2, got {0}")]
    InvalidOrder(usize),
    #[error("{pred} predictions but {gold} references")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("candidate {0} appears twice in a ranked list")]
    DuplicateCandidate(EntityId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    /// Best first.
    pub candidates: Vec<EntityId>,
    pub gold: EntityId,
}

impl RankedList {
    pub fn new(candidates: Vec<EntityId>, gold: EntityId) -> Result<Self, MetricsError> {
        let mut seen = HashSet::new();
        if let Some(dup) = candidates.iter().find(|c| !seen.insert(**c)) {
            return Err(MetricsError::DuplicateCandidate(*dup));
        }
        Ok(Self { candidates, gold })
    }

    /// Orders `scores` (indexed by entity id) over `pool`, best first; ties keep pool order.
    pub fn from_scores(pool: &[EntityId], scores: &[f64], gold: EntityId) -> Result<Self, MetricsError> {
        let mut candidates = pool.to_vec();
        candidates.sort_by(|a, b| scores[b.0].total_cmp(&scores[a.0]));
        Self::new(candidates, gold)
    }

    /// 1-based rank of the gold entity.
    pub fn rank(&self) -> Option<usize> {
        self.candidates.iter().position(|c| *c == self.gold).map(|p| p + 1)
    }
}

pub fn recall_at_k(lists: &[RankedList], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    mean(lists.iter().map(|l| if l.rank().is_some_and(|r| r <= k) { 1.0 } else { 0.0 }), lists.len())
}

pub fn mrr(lists: &[RankedList]) -> Result<f64, MetricsError> {
    mean(lists.iter().map(|l| l.rank().map_or(0.0, |r| 1.0 / r as f64)), lists.len())
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(values.sum::<f64>() / n as f64)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], m: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(m) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU with modified precisions up to order `n` and brevity penalty.
pub fn bleu_n<T: Eq + Hash>(hypothesis: &[T], reference: &[T], n: usize) -> Result<f64, MetricsError> {
    if !(1..=2).contains(&n) {
        return Err(MetricsError::InvalidOrder(n));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for m in 1..=n {
        let total = hypothesis.len().saturating_sub(m - 1);
        let refs = ngram_counts(reference, m);
        let clipped: usize = ngram_counts(hypothesis, m).iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64).min(0.0);
    Ok((log_sum / n as f64 + bp).exp())
}

/// Arithmetic mean of sentence BLEU over aligned pairs.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64, MetricsError> {
    check_lengths(hypotheses.len(), references.len())?;
    let scores = hypotheses.iter().zip(references).map(|(h, r)| bleu_n(h, r, n)).collect::<Result<Vec<_>, _>>()?;
    mean(scores.into_iter(), hypotheses.len())
}

fn check_lengths(pred: usize, gold: usize) -> Result<(), MetricsError> {
    if pred != gold {
        return Err(MetricsError::LengthMismatch { pred, gold });
    }
    Ok(())
}

/// Entities linked in an utterance, in order of mention, repeats kept.
pub fn mentioned_entities<S: AsRef<str>>(tokens: &[S], kb: &KnowledgeBase) -> Vec<EntityId> {
    link_mentions(tokens, kb).into_iter().map(|m| m.entity).collect()
}

fn micro_f1(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    2.0 * p * r / (p + r)
}

fn multiset(items: &[EntityId]) -> BTreeMap<EntityId, usize> {
    let mut m = BTreeMap::new();
    for &e in items {
        *m.entry(e).or_insert(0) += 1;
    }
    m
}

/// Micro-averaged F1 over per-utterance entity sets.
pub fn entity_f1(pred: &[Vec<EntityId>], gold: &[Vec<EntityId>]) -> Result<f64, MetricsError> {
    check_lengths(pred.len(), gold.len())?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let p: HashSet<_> = p.iter().collect();
        let g: HashSet<_> = g.iter().collect();
        tp += p.intersection(&g).count();
        np += p.len();
        ng += g.len();
    }
    Ok(micro_f1(tp, np, ng))
}

/// Micro-averaged F1 over per-utterance entity multisets; repeats count.
pub fn multiset_entity_f1(pred: &[Vec<EntityId>], gold: &[Vec<EntityId>]) -> Result<f64, MetricsError> {
    check_lengths(pred.len(), gold.len())?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let g = multiset(g);
        tp += multiset(p).iter().map(|(e, &c)| c.min(g.get(e).copied().unwrap_or(0))).sum::<usize>();
        np += p.len();
        ng += g.values().sum::<usize>();
    }
    Ok(micro_f1(tp, np, ng))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r10: f64,
    pub r50: f64,
    pub mrr: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub entity_f1: f64,
    pub multiset_f1: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            10 => Some(self.r10),
            50 => Some(self.r50),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.r1, self.r10, self.r50, self.mrr, self.bleu1, self.bleu2, self.entity_f1, self.multiset_f1]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    /// Retrieval fields; zero when `lists` is empty.
    pub fn with_retrieval(mut self, lists: &[RankedList]) -> Self {
        if !lists.is_empty() {
            self.r1 = recall_at_k(lists, 1).expect("non-empty");
            self.r10 = recall_at_k(lists, 10).expect("non-empty");
            self.r50 = recall_at_k(lists, 50).expect("non-empty");
            self.mrr = mrr(lists).expect("non-empty");
        }
        self
    }

    /// Generation fields from tokenized hypotheses and references; zero when empty.
    pub fn with_generation<S: AsRef<str> + Eq + Hash>(mut self, hyps: &[Vec<S>], refs: &[Vec<S>], kb: &KnowledgeBase) -> Result<Self, MetricsError> {
        check_lengths(hyps.len(), refs.len())?;
        self.n = hyps.len();
        if hyps.is_empty() {
            return Ok(self);
        }
        self.bleu1 = corpus_bleu(hyps, refs, 1)?;
        self.bleu2 = corpus_bleu(hyps, refs, 2)?;
        let pred: Vec<_> = hyps.iter().map(|h| mentioned_entities(h, kb)).collect();
        let gold: Vec<_> = refs.iter().map(|r| mentioned_entities(r, kb)).collect();
        self.entity_f1 = entity_f1(&pred, &gold)?;
        self.multiset_f1 = multiset_entity_f1(&pred, &gold)?;
        Ok(self)
    }
}
