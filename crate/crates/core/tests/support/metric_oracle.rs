//! Brute-force references for the retrieval and generation metrics, written
//! without hashing or windows, and a frozen 20-case fixture.

use corecog::kb::EntityId;
use corecog::metrics::{corpus_bleu, entity_f1, mrr, multiset_entity_f1, recall_at_k, RankedList};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-9;

fn e(i: usize) -> EntityId {
    EntityId(i)
}

fn oracle_rank(l: &RankedList) -> usize {
    let mut r = 0;
    for (i, c) in l.candidates.iter().enumerate() {
        if *c == l.gold && r == 0 {
            r = i + 1;
        }
    }
    r
}

pub fn oracle_recall(lists: &[RankedList], k: usize) -> f64 {
    lists.iter().filter(|l| (1..=k).contains(&oracle_rank(l))).count() as f64 / lists.len() as f64
}

pub fn oracle_mrr(lists: &[RankedList]) -> f64 {
    lists
        .iter()
        .map(|l| match oracle_rank(l) {
            0 => 0.0,
            r => 1.0 / r as f64,
        })
        .sum::<f64>()
        / lists.len() as f64
}

fn oracle_precision(h: &[u8], r: &[u8], m: usize) -> (usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> { (0..s.len().saturating_sub(m - 1)).map(|i| s[i..i + m].to_vec()).collect() };
    let hg = grams(h);
    let mut pool = grams(r);
    let mut hits = 0;
    for g in &hg {
        if let Some(p) = pool.iter().position(|x| x == g) {
            pool.remove(p);
            hits += 1;
        }
    }
    (hits, hg.len())
}

pub fn oracle_bleu(h: &[u8], r: &[u8], n: usize) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for m in 1..=n {
        let (hits, total) = oracle_precision(h, r, m);
        if hits == 0 {
            return 0.0;
        }
        prod *= hits as f64 / total as f64;
    }
    let bp = if h.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    bp * prod.powf(1.0 / n as f64)
}

pub fn oracle_f1(pred: &[Vec<EntityId>], gold: &[Vec<EntityId>], multi: bool) -> f64 {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let (mut p, mut g) = (p.clone(), g.clone());
        if !multi {
            p.sort();
            p.dedup();
            g.sort();
            g.dedup();
        }
        np += p.len();
        ng += g.len();
        for x in &p {
            if let Some(i) = g.iter().position(|y| y == x) {
                g.remove(i);
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let (p, r) = (tp as f64 / np as f64, tp as f64 / ng as f64);
    2.0 * p * r / (p + r)
}

pub struct Case {
    pub lists: Vec<RankedList>,
    pub hyps: Vec<Vec<u8>>,
    pub refs: Vec<Vec<u8>>,
    pub pred: Vec<Vec<EntityId>>,
    pub gold: Vec<Vec<EntityId>>,
}

/// Frozen 20-case fixture drawn from a fixed seed.
pub fn fixture() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..20)
        .map(|_| {
            let n = rng.gen_range(1..8);
            let lists = (0..n)
                .map(|_| {
                    let mut c: Vec<EntityId> = (0..60).map(e).collect();
                    c.shuffle(&mut rng);
                    c.truncate(rng.gen_range(1..60));
                    RankedList::new(c, e(rng.gen_range(0..60))).unwrap()
                })
                .collect();
            let seq = |rng: &mut ChaCha8Rng, lo: usize| (0..rng.gen_range(lo..9)).map(|_| rng.gen_range(0..5u8)).collect::<Vec<u8>>();
            let hyps = (0..n).map(|_| seq(&mut rng, 0)).collect();
            let refs = (0..n).map(|_| seq(&mut rng, 1)).collect();
            let ents = |rng: &mut ChaCha8Rng| (0..rng.gen_range(0..4)).map(|_| e(rng.gen_range(0..4))).collect::<Vec<_>>();
            let pred = (0..n).map(|_| ents(&mut rng)).collect();
            let gold = (0..n).map(|_| ents(&mut rng)).collect();
            Case { lists, hyps, refs, pred, gold }
        })
        .collect()
}

/// Largest absolute difference between each metric and its brute-force reference over the fixture.
pub fn fixture_max_error() -> f64 {
    let mut worst: f64 = 0.0;
    for c in fixture() {
        for k in [1, 10, 50] {
            worst = worst.max((recall_at_k(&c.lists, k).unwrap() - oracle_recall(&c.lists, k)).abs());
        }
        worst = worst.max((mrr(&c.lists).unwrap() - oracle_mrr(&c.lists)).abs());
        for n in [1, 2] {
            let want = c.hyps.iter().zip(&c.refs).map(|(h, r)| oracle_bleu(h, r, n)).sum::<f64>() / c.hyps.len() as f64;
            worst = worst.max((corpus_bleu(&c.hyps, &c.refs, n).unwrap() - want).abs());
        }
        worst = worst.max((entity_f1(&c.pred, &c.gold).unwrap() - oracle_f1(&c.pred, &c.gold, false)).abs());
        worst = worst.max((multiset_entity_f1(&c.pred, &c.gold).unwrap() - oracle_f1(&c.pred, &c.gold, true)).abs());
    }
    worst
}

fn ranked(rank: usize) -> RankedList {
    let mut c: Vec<EntityId> = (1..=80).map(e).collect();
    c[rank - 1] = e(0);
    RankedList::new(c, e(0)).unwrap()
}

/// `(case, computed, hand value)` for the hand-derived examples.
pub fn hand_cases() -> Vec<(&'static str, f64, f64)> {
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let stutter = [vec![e(1), e(1), e(2)]];
    let gold = [vec![e(1)]];
    vec![
        ("R@10 with gold ranks (1, 5, 60)", recall_at_k(&[ranked(1), ranked(5), ranked(60)], 10).unwrap(), 2.0 / 3.0),
        ("MRR with gold ranks (1, 2, 4)", mrr(&[ranked(1), ranked(2), ranked(4)]).unwrap(), (1.0 + 0.5 + 0.25) / 3.0),
        ("BLEU-1 'the cat sat' vs 'the cat sat down'", corpus_bleu(&[words("the cat sat")], &[words("the cat sat down")], 1).unwrap(), (-1.0f64 / 3.0).exp()),
        ("set entity F1 {A,A,B} vs {A}", entity_f1(&stutter, &gold).unwrap(), 2.0 / 3.0),
        ("multiset entity F1 {A,A,B} vs {A}", multiset_entity_f1(&stutter, &gold).unwrap(), 0.5),
    ]
}
