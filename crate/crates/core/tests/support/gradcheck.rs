//! Central finite-difference check of the joint training loss, per component.

use corecog::data::{generate_corpus, CorpusConfig};
use corecog::history::HistoryOptions;
use corecog::model::{Component, ModelBundle, ModelConfig};
use corecog::train::{batch_gradients, corpus_vocab, prepare_examples, LossContext, LossWeights, DEFAULT_HISTORY_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COORDS: usize = 20;
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

#[derive(Debug)]
pub struct ComponentCheck {
    pub component: Component,
    pub coords: usize,
    pub worst_rel_err: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.coords == COORDS && self.worst_rel_err <= TOLERANCE
    }
}

/// Checks `COORDS` random coordinates, drawn with replacement among those with a
/// non-zero analytic gradient, in every component.
pub fn run(dim: usize, seed: u64) -> Vec<ComponentCheck> {
    let corpus = generate_corpus(&CorpusConfig { n_dialogs: 12, n_entities_per_type: 4, ..CorpusConfig::default() }).unwrap();
    let vocab = corpus_vocab(&corpus.train, &corpus.kb);
    let cfg = ModelConfig { dim, layers: 2, heads: 2, max_context_length: 160, ..ModelConfig::desk(vocab.len(), corpus.kb.num_types(), corpus.kb.len()) };
    let model = ModelBundle::new(cfg, vocab, seed).unwrap();
    let examples = prepare_examples(&corpus.train, &corpus.kb, &model, HistoryOptions::new(DEFAULT_HISTORY_LEN)).unwrap();
    let batch: Vec<_> = examples.iter().enumerate().filter(|(_, e)| e.trigger).take(3).chain(examples.iter().enumerate().filter(|(_, e)| !e.trigger).take(2)).collect();
    let ctx = LossContext::new(&corpus.kb, &model, LossWeights::default(), 6);
    let (_, grads, _) = batch_gradients(&model, &batch, &ctx, seed, 0).unwrap();
    let loss_at = |m: &ModelBundle| batch_gradients(m, &batch, &ctx, seed, 0).unwrap().0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Component::ALL
        .iter()
        .map(|&component| {
            let pool: Vec<(usize, usize, f64)> = model
                .component_params(component)
                .into_iter()
                .filter_map(|id| grads[id.0].as_ref().map(|g| (id.0, g)))
                .flat_map(|(p, g)| g.iter().enumerate().filter(|(_, v)| v.abs() > 1e-8).map(move |(i, v)| (p, i, *v)).collect::<Vec<_>>())
                .collect();
            let mut worst: f64 = 0.0;
            let mut coords = 0;
            for _ in 0..if pool.is_empty() { 0 } else { COORDS } {
                let (p, i, analytic) = pool[rng.gen_range(0..pool.len())];
                let mut plus = model.clone();
                let mut minus = model.clone();
                let id = plus.component_params(component).into_iter().find(|id| id.0 == p).unwrap();
                let cols = plus.params().get(id).ncols();
                plus.params_mut().get_mut(id)[[i / cols, i % cols]] += STEP;
                minus.params_mut().get_mut(id)[[i / cols, i % cols]] -= STEP;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
                worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR));
                coords += 1;
            }
            ComponentCheck { component, coords, worst_rel_err: worst }
        })
        .collect()
}
