//! Response generators: greedy and beam search, the bidirectional HopSkip
//! decoder that grows an utterance around a mandatory entity, and relaxed
//! gradient-based decoding under soft fluency and word-set constraints.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::history::UnifiedHistory;
use crate::model::{ContextItem, DecoderContext, Direction, ModelBundle, ModelError, TokenDistribution, TokenId, SPECIALS};
use crate::tape::{argmax, softmax_rows, Matrix};

const LOG_CLAMP: f64 = 1e-12;
const MAX_HALVINGS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("relaxed energy became non-finite at step {step} (fluency {fluency}, compulsory {compulsory})")]
    NonFiniteEnergy { step: usize, fluency: f64, compulsory: f64 },
    #[error("the mandatory token set is empty")]
    EmptyConstraint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
    Hopskip,
    Cold,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [DecodeMode::Greedy, DecodeMode::Beam, DecodeMode::Hopskip, DecodeMode::Cold];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
            DecodeMode::Hopskip => "hopskip",
            DecodeMode::Cold => "cold",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown decoder `{s}` (expected hopskip, cold, greedy or beam)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColdConfig {
    /// Relaxed length; derived from the greedy draft when unset.
    pub t_relaxed: Option<usize>,
    pub steps: usize,
    pub step_size: f64,
    pub phi_fluency: f64,
    pub phi_compulsory: f64,
    pub init_smoothing: f64,
}

impl Default for ColdConfig {
    fn default() -> Self {
        Self { t_relaxed: None, steps: 8, step_size: 2.0, phi_fluency: 1.0, phi_compulsory: 5.0, init_smoothing: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_len: usize,
    pub beam_width: usize,
    pub cold: ColdConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Hopskip, max_len: 24, beam_width: 4, cold: ColdConfig::default() }
    }
}

impl DecodeConfig {
    pub fn with_mode(mode: DecodeMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let c = &self.cold;
        let checks = [
            (self.max_len >= 2, "max_len must be at least 2"),
            (self.beam_width >= 1, "beam_width must be at least 1"),
            (c.steps >= 1, "cold.steps must be at least 1"),
            (c.init_smoothing > 0.0 && c.init_smoothing < 1.0, "cold.init_smoothing must lie in (0, 1)"),
            (c.step_size > 0.0, "cold.step_size must be positive"),
            (c.t_relaxed.map_or(true, |t| t >= 1), "cold.t_relaxed must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(DecodeError::InvalidConfig(msg.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub side: Side,
    pub token: TokenId,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Final utterance with the entity surface inlined and boundary tokens removed.
    pub tokens: Vec<TokenId>,
    pub entity_included: bool,
    pub entity_position: Option<usize>,
    pub trace: Vec<TraceStep>,
    /// Post-hoc constraint repairs; always 0.
    pub repairs: usize,
}

/// Column-stochastic `W x T` matrix; column `t` is a distribution over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSequence {
    pub y: Matrix,
}

impl RelaxedSequence {
    /// Column-wise softmax of the logits `z`.
    pub fn from_logits(z: &Matrix) -> Self {
        Self { y: softmax_rows(z.t()).reversed_axes() }
    }

    pub fn is_valid(&self) -> bool {
        self.y.iter().all(|&v| v >= 0.0 && v.is_finite()) && self.y.axis_iter(Axis(1)).all(|c| (c.sum() - 1.0).abs() <= 1e-6)
    }

    /// Per-column argmax; ties go to the lowest id.
    pub fn discretize(&self) -> Vec<TokenId> {
        self.y.axis_iter(Axis(1)).map(|c| argmax(&c.to_vec()) as TokenId).collect()
    }
}

/// What the decoders need from a language model.
pub trait StepModel: Sync {
    fn vocab_size(&self) -> usize;

    fn next_token_distribution(&self, dir: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError>;

    /// Relaxed fluency of `y` after `prefix` and, when requested, its gradient w.r.t. `y`.
    fn relaxed_fluency(&self, prefix: ArrayView2<f64>, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>), ModelError>;
}

impl StepModel for ModelBundle {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn next_token_distribution(&self, dir: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError> {
        ModelBundle::next_token_distribution(self, dir, ctx)
    }

    fn relaxed_fluency(&self, prefix: ArrayView2<f64>, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>), ModelError> {
        ModelBundle::relaxed_fluency(self, prefix, y, want_grad)
    }
}

/// Fluency value `sum_t sum_w P[t, w] ln Y[w, t]` for predictive rows `probs` (`T x W`),
/// the upstream gradient w.r.t. the logits behind `probs`, and the direct gradient w.r.t. `Y`.
pub fn fluency_terms(probs: ArrayView2<f64>, y: &Matrix) -> (f64, Matrix, Matrix) {
    let (vocab, cols) = y.dim();
    let log_y = y.mapv(|v| v.max(LOG_CLAMP).ln());
    let mut value = 0.0;
    let mut seed = Matrix::zeros((cols, vocab));
    let mut direct = Matrix::zeros((vocab, cols));
    for c in 0..cols {
        let p = probs.row(c);
        let ly = log_y.column(c);
        let inner = p.dot(&ly);
        value += inner;
        for w in 0..vocab {
            seed[[c, w]] = p[w] * (ly[w] - inner);
            if y[[w, c]] > LOG_CLAMP {
                direct[[w, c]] = p[w] / y[[w, c]];
            }
        }
    }
    (value, seed, direct)
}

pub fn fluency_constraint<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, y: &RelaxedSequence) -> Result<f64, DecodeError> {
    Ok(model.relaxed_fluency(h.vectors.view(), &y.y, false)?.0)
}

fn dedup(set: &[TokenId]) -> Vec<TokenId> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// `sum_{s in S} ln(1 - prod_t (1 - Y[s, t]))`, each term clamped at `ln 1e-12`.
pub fn compulsory_constraint(y: &RelaxedSequence, set: &[TokenId]) -> Result<f64, DecodeError> {
    Ok(compulsory_with_grad(&y.y, set, false)?.0)
}

fn compulsory_with_grad(y: &Matrix, set: &[TokenId], want_grad: bool) -> Result<(f64, Option<Matrix>), DecodeError> {
    if set.is_empty() {
        return Err(DecodeError::EmptyConstraint);
    }
    let cols = y.ncols();
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Matrix::zeros(y.dim()));
    for s in dedup(set) {
        let row = y.row(s as usize);
        let never: f64 = row.iter().map(|v| 1.0 - v).product();
        let hit = (1.0 - never).max(LOG_CLAMP);
        value += hit.ln();
        if let Some(g) = grad.as_mut() {
            for t in 0..cols {
                let others: f64 = (0..cols).filter(|&u| u != t).map(|u| 1.0 - row[u]).product();
                g[[s as usize, t]] = others / hit;
            }
        }
    }
    Ok((value, grad))
}

fn bos_context<'a>(h: &'a UnifiedHistory, tokens: &[TokenId]) -> DecoderContext<'a> {
    let mut items = vec![ContextItem::Token(SPECIALS.bos)];
    items.extend(tokens.iter().map(|&t| ContextItem::Token(t)));
    DecoderContext { prefix: h.vectors.view(), items }
}

fn greedy<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, max_len: usize) -> Result<DecodeResult, DecodeError> {
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    while trace.len() < max_len {
        let d = model.next_token_distribution(Direction::Forward, &bos_context(h, &tokens))?;
        let tok = d.argmax();
        trace.push(TraceStep { side: Side::Right, token: tok, prob: d.prob(tok) });
        if tok == SPECIALS.eos {
            break;
        }
        tokens.push(tok);
    }
    Ok(DecodeResult { tokens, entity_included: false, entity_position: None, trace, repairs: 0 })
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    trace: Vec<TraceStep>,
    logp: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.logp / self.trace.len().max(1) as f64
    }
}

fn beam<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, max_len: usize, width: usize) -> Result<DecodeResult, DecodeError> {
    let mut alive = vec![Hypothesis { tokens: vec![], trace: vec![], logp: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(Hypothesis, TokenId, f64)> = Vec::new();
        for hyp in &alive {
            let d = model.next_token_distribution(Direction::Forward, &bos_context(h, &hyp.tokens))?;
            for (w, &p) in d.probs.iter().enumerate() {
                if p > 0.0 {
                    candidates.push((hyp.clone(), w as TokenId, p));
                }
            }
        }
        // stable: equal scores keep generation order
        candidates.sort_by(|a, b| (b.0.logp + b.2.ln()).total_cmp(&(a.0.logp + a.2.ln())));
        alive.clear();
        for (mut hyp, tok, p) in candidates.into_iter().take(width) {
            hyp.logp += p.ln();
            hyp.trace.push(TraceStep { side: Side::Right, token: tok, prob: p });
            if tok == SPECIALS.eos {
                finished.push(hyp);
            } else {
                hyp.tokens.push(tok);
                alive.push(hyp);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let mut best = 0;
    for (i, hyp) in finished.iter().enumerate() {
        if hyp.normalized() > finished[best].normalized() {
            best = i;
        }
    }
    let hyp = finished.swap_remove(best);
    Ok(DecodeResult { tokens: hyp.tokens, entity_included: false, entity_position: None, trace: hyp.trace, repairs: 0 })
}

/// Left-to-right decoding from `[BOS]` conditioned on `h`.
pub fn decode_unconstrained<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, cfg: &DecodeConfig) -> Result<DecodeResult, DecodeError> {
    match cfg.mode {
        DecodeMode::Greedy => greedy(model, h, cfg.max_len),
        DecodeMode::Beam => beam(model, h, cfg.max_len, cfg.beam_width),
        other => Err(DecodeError::InvalidConfig(format!("{other} is not an unconstrained mode"))),
    }
}

/// Bidirectional decoding around a mandatory entity.
///
/// Steps alternate right, left, right, ...; each direction sees the entity
/// vector, the opposite side in its own reading order, `[ENT]`, then its own
/// tokens. The right side closes on `[EOS]`, the left on `[BOS]`, and either
/// closes after `max_len / 2` tokens.
pub fn decode_hopskip<M: StepModel + ?Sized>(
    model: &M,
    h: &UnifiedHistory,
    rev_h: &UnifiedHistory,
    e_vec: &[f64],
    surface: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    let cap = (cfg.max_len / 2).max(1);
    // emission order: left holds y_-1, y_-2, ...; right holds y_1, y_2, ...
    let mut left: Vec<TokenId> = Vec::new();
    let mut right: Vec<TokenId> = Vec::new();
    let (mut left_open, mut right_open) = (true, true);
    let mut trace = Vec::new();
    let mut side = Side::Right;
    while left_open || right_open {
        match side {
            Side::Right if right_open => {
                let mut items = vec![ContextItem::Vector(e_vec.to_vec())];
                items.extend(left.iter().rev().map(|&t| ContextItem::Token(t)));
                items.push(ContextItem::Token(SPECIALS.ent));
                items.extend(right.iter().map(|&t| ContextItem::Token(t)));
                let d = model.next_token_distribution(Direction::Forward, &DecoderContext { prefix: h.vectors.view(), items })?;
                let tok = d.argmax();
                trace.push(TraceStep { side, token: tok, prob: d.prob(tok) });
                right.push(tok);
                if tok == SPECIALS.eos || right.len() >= cap {
                    right_open = false;
                }
            }
            Side::Left if left_open => {
                let mut items = vec![ContextItem::Vector(e_vec.to_vec())];
                items.extend(right.iter().rev().map(|&t| ContextItem::Token(t)));
                items.push(ContextItem::Token(SPECIALS.ent));
                items.extend(left.iter().map(|&t| ContextItem::Token(t)));
                let d = model.next_token_distribution(Direction::Backward, &DecoderContext { prefix: rev_h.vectors.view(), items })?;
                let tok = d.argmax();
                trace.push(TraceStep { side, token: tok, prob: d.prob(tok) });
                left.push(tok);
                if tok == SPECIALS.bos || left.len() >= cap {
                    left_open = false;
                }
            }
            _ => {}
        }
        side = match side {
            Side::Right => Side::Left,
            Side::Left => Side::Right,
        };
    }
    let left: Vec<TokenId> = left.into_iter().filter(|&t| t != SPECIALS.bos && t != SPECIALS.eos).rev().collect();
    let right = right.into_iter().filter(|&t| t != SPECIALS.bos && t != SPECIALS.eos);
    let position = left.len();
    let mut tokens = left;
    tokens.extend_from_slice(surface);
    tokens.extend(right);
    Ok(DecodeResult { tokens, entity_included: true, entity_position: Some(position), trace, repairs: 0 })
}

fn energy<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, z: &Matrix, set: &[TokenId], cfg: &ColdConfig, want_grad: bool) -> Result<(f64, f64, f64, Option<Matrix>), DecodeError> {
    let y = RelaxedSequence::from_logits(z).y;
    let (fl, gf) = model.relaxed_fluency(h.vectors.view(), &y, want_grad)?;
    let (cp, gc) = compulsory_with_grad(&y, set, want_grad)?;
    let e = cfg.phi_fluency * fl + cfg.phi_compulsory * cp;
    let grad_z = match (gf, gc) {
        (Some(gf), Some(gc)) => {
            let gy = gf * cfg.phi_fluency + gc * cfg.phi_compulsory;
            // softmax Jacobian per column
            let mut gz = Matrix::zeros(y.dim());
            for t in 0..y.ncols() {
                let yc = y.column(t);
                let inner = yc.dot(&gy.column(t));
                for w in 0..y.nrows() {
                    gz[[w, t]] = yc[w] * (gy[[w, t]] - inner);
                }
            }
            Some(gz)
        }
        _ => None,
    };
    Ok((e, fl, cp, grad_z))
}

struct Optimized {
    z: Matrix,
    /// Energy after initialization and after every accepted step.
    energies: Vec<f64>,
}

fn optimize<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, set: &[TokenId], cfg: &DecodeConfig) -> Result<Optimized, DecodeError> {
    let c = &cfg.cold;
    let draft = greedy(model, h, cfg.max_len)?;
    let lo = 4.min(cfg.max_len);
    let cols = c.t_relaxed.unwrap_or_else(|| draft.tokens.len().clamp(lo, cfg.max_len));
    let vocab = model.vocab_size();
    let eps = c.init_smoothing;
    let mut z = Matrix::from_elem((vocab, cols), (eps / vocab as f64).ln());
    for t in 0..cols {
        let tok = draft.tokens.get(t).copied().unwrap_or(SPECIALS.eos);
        z[[tok as usize, t]] = ((1.0 - eps) + eps / vocab as f64).ln();
    }
    let (mut e, mut fl, mut cp, mut grad) = energy(model, h, &z, set, c, c.steps > 0)?;
    let mut energies = vec![e];
    for step in 0..c.steps {
        if !e.is_finite() {
            return Err(DecodeError::NonFiniteEnergy { step, fluency: fl, compulsory: cp });
        }
        let g = grad.take().expect("gradient requested");
        let mut eta = c.step_size;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &z + &(&g * eta);
            let (e2, _, _, _) = energy(model, h, &candidate, set, c, false)?;
            if e2.is_finite() && e2 >= e {
                accepted = Some(candidate);
                break;
            }
            eta /= 2.0;
        }
        let Some(next) = accepted else { break };
        z = next;
        (e, fl, cp, grad) = energy(model, h, &z, set, c, true)?;
        energies.push(e);
        log::debug!("relaxed step {step}: energy {e:.4} (fluency {fl:.4}, compulsory {cp:.4})");
    }
    if !e.is_finite() {
        return Err(DecodeError::NonFiniteEnergy { step: c.steps, fluency: fl, compulsory: cp });
    }
    Ok(Optimized { z, energies })
}

/// Relaxed decoding: gradient ascent on column logits under fluency and
/// mandatory-token constraints, then per-column argmax. No repair is applied.
pub fn decode_cold<M: StepModel + ?Sized>(model: &M, h: &UnifiedHistory, set: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeResult, DecodeError> {
    if set.is_empty() {
        return Err(DecodeError::EmptyConstraint);
    }
    let run = optimize(model, h, set, cfg)?;
    log::debug!("cold energy {:?} -> {:?}", run.energies.first(), run.energies.last());
    let relaxed = RelaxedSequence::from_logits(&run.z);
    let raw = relaxed.discretize();
    let trace = raw.iter().enumerate().map(|(t, &tok)| TraceStep { side: Side::Right, token: tok, prob: relaxed.y[[tok as usize, t]] }).collect();
    let tokens: Vec<TokenId> = raw.into_iter().filter(|&t| !SPECIALS.is_special(t)).collect();
    let wanted = dedup(set);
    let entity_position = tokens.iter().position(|t| wanted.contains(t));
    Ok(DecodeResult { entity_included: entity_position.is_some(), entity_position, tokens, trace, repairs: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{PositionKind, Slot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::sync::Mutex;

    const V: usize = 12;
    const WATCH: TokenId = 9;
    const TONIGHT: TokenId = 10;
    const ENTITY: TokenId = 11;

    fn history(dim: usize) -> UnifiedHistory {
        UnifiedHistory {
            vectors: Matrix::zeros((1, dim)),
            slots: vec![Slot::Token(SPECIALS.sum)],
            kinds: vec![PositionKind::SumMarker],
            entity_at: vec![None],
            turn_of: vec![0],
        }
    }

    fn one_hot(tok: TokenId) -> TokenDistribution {
        let mut probs = vec![0.0; V];
        probs[tok as usize] = 1.0;
        TokenDistribution { probs }
    }

    /// Emits a fixed script per direction, indexed by the number of own tokens so far.
    struct Scripted {
        fwd: Vec<TokenId>,
        bwd: Vec<TokenId>,
        seen: Mutex<Vec<(Direction, Vec<ContextItem>, usize)>>,
    }

    impl StepModel for Scripted {
        fn vocab_size(&self) -> usize {
            V
        }

        fn next_token_distribution(&self, dir: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError> {
            self.seen.lock().unwrap().push((dir, ctx.items.clone(), ctx.prefix.nrows()));
            let ent = ctx.items.iter().position(|i| *i == ContextItem::Token(SPECIALS.ent));
            let own = match ent {
                Some(p) => ctx.items.len() - p - 1,
                None => ctx.items.len() - 1,
            };
            let script = match dir {
                Direction::Forward => &self.fwd,
                Direction::Backward => &self.bwd,
            };
            Ok(one_hot(script[own.min(script.len() - 1)]))
        }

        fn relaxed_fluency(&self, _: ArrayView2<f64>, _: &Matrix, _: bool) -> Result<(f64, Option<Matrix>), ModelError> {
            unreachable!()
        }
    }

    fn scripted(fwd: &[TokenId], bwd: &[TokenId]) -> Scripted {
        Scripted { fwd: fwd.to_vec(), bwd: bwd.to_vec(), seen: Mutex::new(vec![]) }
    }

    #[test]
    fn hopskip_with_immediate_boundaries_returns_the_entity() {
        let m = scripted(&[SPECIALS.eos], &[SPECIALS.bos]);
        let h = history(2);
        let r = decode_hopskip(&m, &h, &h, &[0.0, 0.0], &[ENTITY], &DecodeConfig::default()).unwrap();
        assert_eq!(r.tokens, vec![ENTITY]);
        assert!(r.entity_included);
        assert_eq!(r.entity_position, Some(0));
    }

    #[test]
    fn hopskip_alternates_sides() {
        let m = scripted(&[TONIGHT, SPECIALS.eos], &[WATCH, SPECIALS.bos]);
        let h = history(2);
        let r = decode_hopskip(&m, &h, &h, &[0.5, 0.5], &[ENTITY], &DecodeConfig::default()).unwrap();
        assert_eq!(r.tokens, vec![WATCH, ENTITY, TONIGHT]);
        let trace: Vec<(Side, TokenId)> = r.trace.iter().map(|s| (s.side, s.token)).collect();
        assert_eq!(trace, vec![(Side::Right, TONIGHT), (Side::Left, WATCH), (Side::Right, SPECIALS.eos), (Side::Left, SPECIALS.bos)]);
        let seen = m.seen.lock().unwrap();
        // first backward step sees e_vec, then y1, then [ENT]
        assert_eq!(seen[1].0, Direction::Backward);
        assert_eq!(
            seen[1].1,
            vec![ContextItem::Vector(vec![0.5, 0.5]), ContextItem::Token(TONIGHT), ContextItem::Token(SPECIALS.ent)]
        );
        // third step: forward sees the left token before [ENT]
        assert_eq!(
            seen[2].1,
            vec![ContextItem::Vector(vec![0.5, 0.5]), ContextItem::Token(WATCH), ContextItem::Token(SPECIALS.ent), ContextItem::Token(TONIGHT)]
        );
    }

    #[test]
    fn hopskip_caps_each_side() {
        let m = scripted(&[TONIGHT], &[WATCH]);
        let h = history(2);
        let cfg = DecodeConfig { max_len: 6, ..DecodeConfig::default() };
        let r = decode_hopskip(&m, &h, &h, &[0.0, 0.0], &[ENTITY], &cfg).unwrap();
        assert_eq!(r.tokens, vec![WATCH, WATCH, WATCH, ENTITY, TONIGHT, TONIGHT, TONIGHT]);
        assert!(r.trace.iter().filter(|s| s.side == Side::Left).all(|s| s.token == WATCH));
    }

    #[test]
    fn greedy_stops_on_eos() {
        let m = scripted(&[SPECIALS.eos], &[SPECIALS.bos]);
        let r = decode_unconstrained(&m, &history(2), &DecodeConfig::with_mode(DecodeMode::Greedy)).unwrap();
        assert!(r.tokens.is_empty());
        assert!(!r.entity_included);
    }

    /// Next-token probabilities as a fixed function of (context length, last token).
    struct RandomTable {
        table: Vec<Vec<f64>>,
    }

    impl RandomTable {
        fn new(rng: &mut ChaCha8Rng) -> Self {
            let table = (0..64)
                .map(|_| {
                    let raw: Vec<f64> = (0..V).map(|_| rng.gen_range(0.0f64..1.0).powi(3)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            Self { table }
        }
    }

    impl StepModel for RandomTable {
        fn vocab_size(&self) -> usize {
            V
        }

        fn next_token_distribution(&self, _: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError> {
            let last = match ctx.items.last() {
                Some(ContextItem::Token(t)) => *t as usize,
                _ => 0,
            };
            Ok(TokenDistribution { probs: self.table[(ctx.items.len() * 7 + last) % 64].clone() })
        }

        fn relaxed_fluency(&self, _: ArrayView2<f64>, _: &Matrix, _: bool) -> Result<(f64, Option<Matrix>), ModelError> {
            unreachable!()
        }
    }

    #[test]
    fn beam_of_width_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = history(2);
        for _ in 0..100 {
            let m = RandomTable::new(&mut rng);
            let g = decode_unconstrained(&m, &h, &DecodeConfig { mode: DecodeMode::Greedy, max_len: 6, ..DecodeConfig::default() }).unwrap();
            let b = decode_unconstrained(&m, &h, &DecodeConfig { mode: DecodeMode::Beam, max_len: 6, beam_width: 1, ..DecodeConfig::default() }).unwrap();
            assert_eq!(g, b);
        }
    }

    /// Fixed distribution over three live tokens, independent of context.
    struct ThreeToken {
        probs: [f64; 3],
    }

    const LIVE: [TokenId; 3] = [WATCH, TONIGHT, SPECIALS.eos];

    impl StepModel for ThreeToken {
        fn vocab_size(&self) -> usize {
            V
        }

        fn next_token_distribution(&self, _: Direction, _: &DecoderContext) -> Result<TokenDistribution, ModelError> {
            let mut probs = vec![0.0; V];
            for (t, p) in LIVE.iter().zip(self.probs) {
                probs[*t as usize] = p;
            }
            Ok(TokenDistribution { probs })
        }

        fn relaxed_fluency(&self, _: ArrayView2<f64>, _: &Matrix, _: bool) -> Result<(f64, Option<Matrix>), ModelError> {
            unreachable!()
        }
    }

    /// Every sequence of at most 3 steps, scored by mean log-probability.
    fn exhaustive(probs: [f64; 3], max_len: usize) -> Vec<TokenId> {
        let mut best: Option<(f64, Vec<TokenId>)> = None;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let ended = seq.last() == Some(&2);
            if ended || seq.len() == max_len {
                let score = seq.iter().map(|&i| probs[i].ln()).sum::<f64>() / seq.len() as f64;
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, seq.iter().filter(|&&i| i != 2).map(|&i| LIVE[i]).collect()));
                }
                continue;
            }
            for i in 0..3 {
                let mut next = seq.clone();
                next.push(i);
                stack.push(next);
            }
        }
        best.unwrap().1
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        for probs in [[0.5, 0.3, 0.2], [0.3, 0.2, 0.5], [0.45, 0.1, 0.45], [0.2, 0.45, 0.35]] {
            let m = ThreeToken { probs };
            let cfg = DecodeConfig { mode: DecodeMode::Beam, max_len: 3, beam_width: 2, ..DecodeConfig::default() };
            let r = decode_unconstrained(&m, &history(2), &cfg).unwrap();
            assert_eq!(r.tokens, exhaustive(probs, 3), "{probs:?}");
        }
    }

    /// Context-free predictive distribution for the relaxed objective.
    struct FixedFluency {
        probs: Vec<f64>,
        calls: RefCell<usize>,
    }

    unsafe impl Sync for FixedFluency {}

    impl StepModel for FixedFluency {
        fn vocab_size(&self) -> usize {
            self.probs.len()
        }

        fn next_token_distribution(&self, _: Direction, ctx: &DecoderContext) -> Result<TokenDistribution, ModelError> {
            // greedy draft: two copies of the mode, then [EOS]
            let mut probs = vec![0.0; self.probs.len()];
            let tok = if ctx.items.len() <= 2 { crate::tape::argmax(&self.probs) } else { SPECIALS.eos as usize };
            probs[tok] = 1.0;
            Ok(TokenDistribution { probs })
        }

        fn relaxed_fluency(&self, _: ArrayView2<f64>, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>), ModelError> {
            *self.calls.borrow_mut() += 1;
            let p = Matrix::from_shape_fn((y.ncols(), y.nrows()), |(_, w)| self.probs[w]);
            let (v, _, direct) = fluency_terms(p.view(), y);
            Ok((v, want_grad.then_some(direct)))
        }
    }

    fn fixed(probs: &[f64]) -> FixedFluency {
        FixedFluency { probs: probs.to_vec(), calls: RefCell::new(0) }
    }

    #[test]
    fn fluency_hand_values() {
        let m = fixed(&[0.5, 0.5]);
        let y = RelaxedSequence { y: Matrix::from_shape_vec((2, 1), vec![0.9, 0.1]).unwrap() };
        let v = fluency_constraint(&m, &history(1), &y).unwrap();
        assert!((v - (0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln())).abs() < 1e-12);
        assert!((v - -1.2040).abs() < 1e-4);
        let sure = fixed(&[1.0, 0.0]);
        let y = RelaxedSequence { y: Matrix::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap() };
        assert_eq!(fluency_constraint(&sure, &history(1), &y).unwrap(), 0.0);
    }

    #[test]
    fn compulsory_hand_values() {
        let mut y = Matrix::zeros((4, 2));
        y[[1, 1]] = 1.0;
        y[[0, 0]] = 1.0;
        assert_eq!(compulsory_constraint(&RelaxedSequence { y: y.clone() }, &[1]).unwrap(), 0.0);
        assert!((compulsory_constraint(&RelaxedSequence { y }, &[3]).unwrap() - 1e-12f64.ln()).abs() < 1e-9);
        let uniform = RelaxedSequence { y: Matrix::from_elem((4, 2), 0.25) };
        let v = compulsory_constraint(&uniform, &[2]).unwrap();
        assert!((v - (1.0 - 0.75f64 * 0.75).ln()).abs() < 1e-12);
        assert!((v - -0.8267).abs() < 1e-4);
        assert!(compulsory_constraint(&uniform, &[]).is_err());
    }

    #[test]
    fn compulsory_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Matrix::from_shape_fn((5, 3), |_| rng.gen_range(0.05..0.9));
        let (_, g) = compulsory_with_grad(&y, &[1, 3], true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for s in [1usize, 3] {
            for t in 0..3 {
                let mut yp = y.clone();
                yp[[s, t]] += h;
                let mut ym = y.clone();
                ym[[s, t]] -= h;
                let fd = (compulsory_with_grad(&yp, &[1, 3], false).unwrap().0 - compulsory_with_grad(&ym, &[1, 3], false).unwrap().0) / (2.0 * h);
                assert!((fd - g[[s, t]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cold_without_steps_returns_the_draft() {
        let m = fixed(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.2, 0.1]);
        let mut cfg = DecodeConfig::with_mode(DecodeMode::Cold);
        cfg.cold.steps = 0;
        cfg.cold.phi_compulsory = 0.0;
        let draft = decode_unconstrained(&m, &history(1), &DecodeConfig::with_mode(DecodeMode::Greedy)).unwrap();
        let r = decode_cold(&m, &history(1), &[ENTITY], &cfg).unwrap();
        assert_eq!(r.tokens, draft.tokens);
        assert_eq!(r.repairs, 0);
    }

    #[test]
    fn cold_energy_never_decreases() {
        let m = fixed(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 0.2, 0.1]);
        let cfg = DecodeConfig { cold: ColdConfig { steps: 20, ..ColdConfig::default() }, ..DecodeConfig::with_mode(DecodeMode::Cold) };
        let run = optimize(&m, &history(1), &[ENTITY], &cfg).unwrap();
        assert!(run.energies.len() > 1);
        assert!(run.energies.windows(2).all(|w| w[1] >= w[0]));
    }

    /// Grid search over the two column logits of token `s`, others fixed, for a
    /// `W = 3, T = 2` problem; returns whether any column's argmax is `s`.
    fn grid_lands_on(probs: &[f64], s: TokenId, phi_c: f64) -> bool {
        let m = fixed(probs);
        let h = history(1);
        let c = ColdConfig { phi_compulsory: phi_c, ..ColdConfig::default() };
        let base = Matrix::from_shape_fn((3, 2), |(w, _)| if w == 0 { 2.0 } else { 0.0 });
        let mut best = (f64::NEG_INFINITY, base.clone());
        let steps: Vec<f64> = (0..=80).map(|i| -2.0 + 0.1 * i as f64).collect();
        for &a in &steps {
            for &b in &steps {
                let mut z = base.clone();
                z[[s as usize, 0]] = a;
                z[[s as usize, 1]] = b;
                let e = energy(&m, &h, &z, &[s], &c, false).unwrap().0;
                if e > best.0 {
                    best = (e, z);
                }
            }
        }
        RelaxedSequence::from_logits(&best.1).discretize().contains(&s)
    }

    #[test]
    fn cold_reaches_mandatory_token_like_grid_search() {
        // three-token vocabulary: pad/unk/bos slots stand in for words here
        let probs = [0.8, 0.15, 0.05];
        let s: TokenId = 2;
        assert!(grid_lands_on(&probs, s, 20.0));
        let m = fixed(&probs);
        let cfg = DecodeConfig {
            max_len: 2,
            cold: ColdConfig { t_relaxed: Some(2), steps: 30, phi_compulsory: 20.0, ..ColdConfig::default() },
            ..DecodeConfig::with_mode(DecodeMode::Cold)
        };
        let h = history(1);
        let draft = greedy(&m, &h, 2).unwrap();
        assert!(!draft.tokens.contains(&s));
        let r = decode_cold(&m, &h, &[s], &cfg).unwrap();
        assert!(r.trace.iter().any(|t| t.token == s));
        assert_eq!(r.repairs, 0);
    }

    #[test]
    fn relaxed_sequence_is_column_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Matrix::from_shape_fn((7, 3), |_| rng.gen_range(-5.0..5.0));
        assert!(RelaxedSequence::from_logits(&z).is_valid());
    }

    #[test]
    fn modes_parse() {
        for m in DecodeMode::ALL {
            assert_eq!(m.as_str().parse::<DecodeMode>().unwrap(), m);
        }
        assert!("magic".parse::<DecodeMode>().is_err());
        let mut c = DecodeConfig::default();
        assert!(c.validate().is_ok());
        c.cold.init_smoothing = 1.0;
        assert!(c.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn compulsory_is_monotone(vals in prop::collection::vec(0.01f64..0.95, 12), s in 0usize..4, t in 0usize..3, bump in 0.001f64..0.04) {
                let y = Matrix::from_shape_vec((4, 3), vals).unwrap();
                let mut y2 = y.clone();
                y2[[s, t]] += bump;
                let a = compulsory_constraint(&RelaxedSequence { y }, &[s as TokenId]).unwrap();
                let b = compulsory_constraint(&RelaxedSequence { y: y2 }, &[s as TokenId]).unwrap();
                prop_assert!(b > a);
            }

            #[test]
            fn fluency_is_never_positive(vals in prop::collection::vec(0.01f64..1.0, 8), p in prop::collection::vec(0.01f64..1.0, 4)) {
                let mut y = Matrix::from_shape_vec((4, 2), vals).unwrap();
                for mut c in y.columns_mut() { let s = c.sum(); c.mapv_inplace(|v| v / s); }
                let s: f64 = p.iter().sum();
                let m = fixed(&p.iter().map(|v| v / s).collect::<Vec<_>>());
                let v = fluency_constraint(&m, &history(1), &RelaxedSequence { y }).unwrap();
                prop_assert!(v <= 0.0);
            }
        }
    }
}
