//! Unified history: dialog turns flattened into one vector sequence where
//! entity mentions become `[ENT]` markers and the mentioned entities' KB
//! embeddings follow each turn, closed by a `[SUM]` position.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::kb::{link_mentions, EntityEmbeddingTable, EntityId, KnowledgeBase, Mention};
use crate::model::{TokenId, Vocab, SPECIALS};
use crate::tape::Matrix;
use crate::text::split_words;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("max_len {0} cannot hold [SUM] plus one token")]
    MaxLenTooSmall(usize),
    #[error("turn {turn}: mention span {start}..{end} is invalid for {len} tokens")]
    InvalidSpan { turn: usize, start: usize, end: usize, len: usize },
    #[error("turn {turn}: mentions overlap")]
    OverlappingMentions { turn: usize },
    #[error("entity {0} has no embedding")]
    UnknownEntity(EntityId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<TokenId>,
    pub mentions: Vec<Mention>,
}

impl Turn {
    pub fn new(speaker: Speaker, tokens: Vec<TokenId>, mentions: Vec<Mention>) -> Self {
        Self { speaker, tokens, mentions }
    }

    /// Tokenizes `text` and links entity mentions against `kb`.
    pub fn from_text(speaker: Speaker, text: &str, vocab: &Vocab, kb: &KnowledgeBase) -> Self {
        let words = split_words(text);
        let mentions = link_mentions(&words, kb);
        Self { speaker, tokens: vocab.encode_words(&words), mentions }
    }

    fn validate(&self, turn: usize) -> Result<(), HistoryError> {
        let mut last_end = 0;
        let mut sorted = self.mentions.clone();
        sorted.sort_by_key(|m| m.start);
        for m in &sorted {
            if m.start >= m.end || m.end > self.tokens.len() {
                return Err(HistoryError::InvalidSpan { turn, start: m.start, end: m.end, len: self.tokens.len() });
            }
            if m.start < last_end {
                return Err(HistoryError::OverlappingMentions { turn });
            }
            last_end = m.end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DialogHistory {
    pub turns: Vec<Turn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionKind {
    BaseToken,
    EntMarker,
    EntityEmbed,
    SumMarker,
}

/// What a position's vector is looked up from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Token(TokenId),
    Entity(EntityId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryOptions {
    pub max_len: usize,
    /// Prefix every turn with a `[USR]` or `[SYS]` token.
    pub speaker_markers: bool,
}

impl HistoryOptions {
    pub fn new(max_len: usize) -> Self {
        Self { max_len, speaker_markers: true }
    }
}

/// Positions of a unified history before vectors are attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryPlan {
    pub slots: Vec<Slot>,
    pub kinds: Vec<PositionKind>,
    pub entity_at: Vec<Option<EntityId>>,
    /// Turn index per position; the final `[SUM]` carries the number of turns.
    pub turn_of: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedHistory {
    pub vectors: Matrix,
    pub slots: Vec<Slot>,
    pub kinds: Vec<PositionKind>,
    pub entity_at: Vec<Option<EntityId>>,
    pub turn_of: Vec<usize>,
}

impl UnifiedHistory {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn plan(&self) -> HistoryPlan {
        HistoryPlan {
            slots: self.slots.clone(),
            kinds: self.kinds.clone(),
            entity_at: self.entity_at.clone(),
            turn_of: self.turn_of.clone(),
        }
    }

    pub fn count(&self, kind: PositionKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }
}

/// One turn's positions: leading tokens (with `[ENT]` markers) then the entity appendix.
struct Segment {
    tokens: Vec<(Slot, PositionKind, Option<EntityId>)>,
    appendix: Vec<EntityId>,
}

impl Segment {
    fn len(&self) -> usize {
        self.tokens.len() + self.appendix.len()
    }

    fn from_turn(turn: &Turn, speaker_markers: bool) -> Self {
        let mut tokens = Vec::with_capacity(turn.tokens.len() + 1);
        if speaker_markers {
            let marker = match turn.speaker {
                Speaker::User => SPECIALS.usr,
                Speaker::Agent => SPECIALS.sys,
            };
            tokens.push((Slot::Token(marker), PositionKind::BaseToken, None));
        }
        let mut mentions = turn.mentions.clone();
        mentions.sort_by_key(|m| m.start);
        let mut appendix = Vec::with_capacity(mentions.len());
        let mut i = 0;
        let mut next = mentions.iter().peekable();
        while i < turn.tokens.len() {
            match next.peek() {
                Some(m) if m.start == i => {
                    tokens.push((Slot::Token(SPECIALS.ent), PositionKind::EntMarker, Some(m.entity)));
                    appendix.push(m.entity);
                    i = m.end;
                    next.next();
                }
                _ => {
                    tokens.push((Slot::Token(turn.tokens[i]), PositionKind::BaseToken, None));
                    i += 1;
                }
            }
        }
        Self { tokens, appendix }
    }

    /// Drops `n` leading token positions; dropped `[ENT]` markers take their appendix entry along.
    fn trim_front(&mut self, n: usize) {
        let removed: usize = self.tokens.drain(..n).filter(|t| t.1 == PositionKind::EntMarker).count();
        self.appendix.drain(..removed);
    }
}

/// Lays out the positions of the unified history for `h` followed by `next_user`.
///
/// Oldest whole turns are dropped while the sequence is too long; if the
/// newest surviving turn alone still does not fit, its leading tokens are trimmed.
pub fn plan_history(h: &DialogHistory, next_user: &Turn, opts: HistoryOptions) -> Result<HistoryPlan, HistoryError> {
    if opts.max_len < 2 {
        return Err(HistoryError::MaxLenTooSmall(opts.max_len));
    }
    let turns: Vec<&Turn> = h.turns.iter().chain(std::iter::once(next_user)).collect();
    for (i, t) in turns.iter().enumerate() {
        t.validate(i)?;
    }
    let mut segments: Vec<Segment> = turns.iter().map(|t| Segment::from_turn(t, opts.speaker_markers)).collect();
    let budget = opts.max_len - 1;
    let mut first = 0;
    let mut total: usize = segments.iter().map(Segment::len).sum();
    while total > budget && first + 1 < segments.len() {
        total -= segments[first].len();
        first += 1;
    }
    while total > budget {
        let seg = &mut segments[first];
        let before = seg.len();
        let excess = total - budget;
        seg.trim_front(excess.min(seg.tokens.len()));
        total -= before - seg.len();
    }

    let mut plan = HistoryPlan { slots: vec![], kinds: vec![], entity_at: vec![], turn_of: vec![] };
    for (turn, seg) in segments.iter().enumerate().skip(first) {
        for &(slot, kind, entity) in &seg.tokens {
            plan.slots.push(slot);
            plan.kinds.push(kind);
            plan.entity_at.push(entity);
            plan.turn_of.push(turn);
        }
        for &e in &seg.appendix {
            plan.slots.push(Slot::Entity(e));
            plan.kinds.push(PositionKind::EntityEmbed);
            plan.entity_at.push(Some(e));
            plan.turn_of.push(turn);
        }
    }
    plan.slots.push(Slot::Token(SPECIALS.sum));
    plan.kinds.push(PositionKind::SumMarker);
    plan.entity_at.push(None);
    plan.turn_of.push(turns.len());
    Ok(plan)
}

impl HistoryPlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Looks up each position's vector in the base or entity embedding table.
    pub fn materialize(&self, emb: &EntityEmbeddingTable, base_emb: &Matrix) -> Result<UnifiedHistory, HistoryError> {
        let dim = base_emb.ncols();
        let mut vectors = Array2::zeros((self.slots.len(), dim));
        for (i, slot) in self.slots.iter().enumerate() {
            match *slot {
                Slot::Token(t) => vectors.row_mut(i).assign(&base_emb.row(t as usize)),
                Slot::Entity(e) => {
                    if e.0 >= emb.len() {
                        return Err(HistoryError::UnknownEntity(e));
                    }
                    vectors.row_mut(i).assign(&emb.vectors.row(e.0));
                }
            }
        }
        Ok(UnifiedHistory {
            vectors,
            slots: self.slots.clone(),
            kinds: self.kinds.clone(),
            entity_at: self.entity_at.clone(),
            turn_of: self.turn_of.clone(),
        })
    }
}

pub fn build_unified_history(
    h: &DialogHistory,
    next_user: &Turn,
    emb: &EntityEmbeddingTable,
    base_emb: &Matrix,
    opts: HistoryOptions,
) -> Result<UnifiedHistory, HistoryError> {
    plan_history(h, next_user, opts)?.materialize(emb, base_emb)
}

/// Index permutation that reverses the token part of every turn in place.
pub fn reversal_permutation(kinds: &[PositionKind], turn_of: &[usize]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..kinds.len()).collect();
    let mut start = 0;
    while start < kinds.len() {
        let turn = turn_of[start];
        let mut end = start;
        while end < kinds.len() && turn_of[end] == turn {
            end += 1;
        }
        let token_end = (start..end)
            .find(|&i| !matches!(kinds[i], PositionKind::BaseToken | PositionKind::EntMarker))
            .unwrap_or(end);
        perm[start..token_end].reverse();
        start = end;
    }
    perm
}

pub fn reverse_history(h: &UnifiedHistory) -> UnifiedHistory {
    let perm = reversal_permutation(&h.kinds, &h.turn_of);
    let mut vectors = Array2::zeros(h.vectors.dim());
    for (dst, &src) in perm.iter().enumerate() {
        vectors.row_mut(dst).assign(&h.vectors.row(src));
    }
    UnifiedHistory {
        vectors,
        slots: perm.iter().map(|&i| h.slots[i]).collect(),
        kinds: perm.iter().map(|&i| h.kinds[i]).collect(),
        entity_at: perm.iter().map(|&i| h.entity_at[i]).collect(),
        turn_of: perm.iter().map(|&i| h.turn_of[i]).collect(),
    }
}
