//! Hand-computed values of the relaxed-decoding constraints and a
//! perturbation check of compulsory monotonicity.

use corecog::decode::{compulsory_constraint, fluency_constraint, fluency_terms, RelaxedSequence, StepModel};
use corecog::history::{PositionKind, Slot, UnifiedHistory};
use corecog::model::{DecoderContext, Direction, ModelError, TokenDistribution, TokenId, SPECIALS};
use corecog::tape::Matrix;
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-6;
pub const PERTURBATIONS: usize = 1000;

/// Predicts the same distribution at every position.
struct Fixed(Vec<f64>);

impl StepModel for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }

    fn next_token_distribution(&self, _: Direction, _: &DecoderContext) -> Result<TokenDistribution, ModelError> {
        Ok(TokenDistribution { probs: self.0.clone() })
    }

    fn relaxed_fluency(&self, _: ArrayView2<f64>, y: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>), ModelError> {
        let p = Matrix::from_shape_fn((y.ncols(), y.nrows()), |(_, w)| self.0[w]);
        let (v, _, direct) = fluency_terms(p.view(), y);
        Ok((v, want_grad.then_some(direct)))
    }
}

fn history() -> UnifiedHistory {
    UnifiedHistory {
        vectors: Matrix::zeros((1, 4)),
        slots: vec![Slot::Token(SPECIALS.sum)],
        kinds: vec![PositionKind::SumMarker],
        entity_at: vec![None],
        turn_of: vec![0],
    }
}

fn seq(rows: usize, cols: usize, values: Vec<f64>) -> RelaxedSequence {
    RelaxedSequence { y: Matrix::from_shape_vec((rows, cols), values).unwrap() }
}

/// `(case, computed, hand value)` for every hand-derived case.
pub fn hand_cases() -> Vec<(&'static str, f64, f64)> {
    let fluency = |probs: &[f64], y: RelaxedSequence| fluency_constraint(&Fixed(probs.to_vec()), &history(), &y).unwrap();
    let one_hot = seq(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    vec![
        ("fluency, Pr=(0.5,0.5), Y=(0.9,0.1)", fluency(&[0.5, 0.5], seq(2, 1, vec![0.9, 0.1])), 0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln()),
        ("fluency matches a deterministic prediction", fluency(&[1.0, 0.0], seq(2, 1, vec![1.0, 0.0])), 0.0),
        ("compulsory, uniform Y over W=4, T=2", compulsory_constraint(&seq(4, 2, vec![0.25; 8]), &[2]).unwrap(), (1.0 - 0.75f64 * 0.75).ln()),
        ("compulsory, s certain somewhere", compulsory_constraint(&one_hot, &[1]).unwrap(), 0.0),
        ("compulsory, Y[s,t]=0 everywhere", compulsory_constraint(&one_hot, &[3]).unwrap(), 1e-12f64.ln()),
    ]
}

/// The printed four-decimal values agree with the exact hand arithmetic.
pub fn rounded_values_agree() -> bool {
    let exact_fluency: f64 = 0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln();
    let exact_compulsory: f64 = (1.0 - 0.75f64 * 0.75).ln();
    (exact_fluency - -1.2040).abs() < 5e-5 && (exact_compulsory - -0.8267).abs() < 5e-5
}

/// Number of random single-entry increases of `Y[s, t]` that strictly raised the constraint.
pub fn monotone_perturbations(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PERTURBATIONS)
        .filter(|_| {
            let (w, t) = (rng.gen_range(2..8), rng.gen_range(1..6));
            let y = Matrix::from_shape_fn((w, t), |_| rng.gen_range(0.0..0.95));
            let set: Vec<TokenId> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(0..w) as TokenId).collect();
            let (s, col) = (set[rng.gen_range(0..set.len())] as usize, rng.gen_range(0..t));
            let mut bumped = y.clone();
            bumped[[s, col]] += rng.gen_range(0.001..0.05);
            let before = compulsory_constraint(&RelaxedSequence { y }, &set).unwrap();
            let after = compulsory_constraint(&RelaxedSequence { y: bumped }, &set).unwrap();
            after > before
        })
        .count()
}
