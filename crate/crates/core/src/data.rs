//! Synthetic knowledge base and labeled dialog corpus, plus the dialog JSONL format.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::history::Speaker;
use crate::kb::{link_mentions, Entity, EntityId, KnowledgeBase};
use crate::text::split_words;

pub const DEFAULT_TYPES: [&str; 4] = ["movie", "music", "food", "poi"];
const KEYS_PER_TYPE: usize = 8;
const MIN_ATTRIBUTES: usize = 2;
const MAX_ATTRIBUTES: usize = 4;
const VALUES_PER_KEY: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("could not generate {0} uniquely identifiable entities; lower n_entities_per_type")]
    Infeasible(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("dialog {dialog}, turn {turn}: {message}")]
    Inconsistent { dialog: String, turn: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_entities_per_type: usize,
    pub types: Vec<String>,
    pub n_dialogs: usize,
    /// Inclusive range of recommendation episodes per dialog.
    pub turns_range: (usize, usize),
    pub chitchat_ratio: f64,
    pub attribute_overlap: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities_per_type: 10,
            types: DEFAULT_TYPES.iter().map(|s| s.to_string()).collect(),
            n_dialogs: 1500,
            turns_range: (3, 4),
            chitchat_ratio: 0.3,
            attribute_overlap: 0.25,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.types.iter().map(String::as_str).ne(DEFAULT_TYPES) {
            return bad("types must be movie, music, food, poi");
        }
        if self.n_entities_per_type == 0 {
            return bad("n_entities_per_type must be positive");
        }
        if self.turns_range.0 == 0 || self.turns_range.0 > self.turns_range.1 {
            return bad("turns_range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.chitchat_ratio) || !(0.0..=1.0).contains(&self.attribute_overlap) {
            return bad("ratios must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTurn {
    pub speaker: Speaker,
    pub text: String,
    pub entities: Vec<EntityId>,
    pub trigger: Option<bool>,
    pub gold_entity: Option<EntityId>,
    pub gold_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDialog {
    pub id: String,
    pub turns: Vec<LabeledTurn>,
}

impl LabeledDialog {
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, t) in self.turns.iter().enumerate() {
            let fail = |m: &str| Err(DataError::Inconsistent { dialog: self.id.clone(), turn: i, message: m.to_string() });
            match t.speaker {
                Speaker::User if t.trigger.is_some() || t.gold_entity.is_some() || t.gold_type.is_some() => {
                    return fail("user turns carry no recommendation labels")
                }
                Speaker::Agent if t.trigger.is_none() => return fail("agent turn lacks a trigger label"),
                Speaker::Agent if t.trigger == Some(true) && t.gold_entity.is_none() => {
                    return fail("trigger is true but gold_entity is null")
                }
                Speaker::Agent if t.trigger == Some(false) && t.gold_entity.is_some() => {
                    return fail("gold_entity is set but trigger is false")
                }
                _ => {}
            }
            if t.gold_entity.is_some() != t.gold_type.is_some() {
                return fail("gold_type must accompany gold_entity");
            }
        }
        Ok(())
    }

    /// Also checks ids against `kb` and that `gold_type` is the gold entity's type.
    pub fn validate_against(&self, kb: &KnowledgeBase) -> Result<(), DataError> {
        self.validate()?;
        for (i, t) in self.turns.iter().enumerate() {
            let fail = |m: String| Err(DataError::Inconsistent { dialog: self.id.clone(), turn: i, message: m });
            for e in t.entities.iter().chain(&t.gold_entity) {
                if e.0 >= kb.len() {
                    return fail(format!("entity {} is not in the knowledge base", e.0));
                }
            }
            if let (Some(e), Some(ty)) = (t.gold_entity, &t.gold_type) {
                if kb.type_name_of(e).ok() != Some(ty.as_str()) {
                    return fail(format!("gold_type `{ty}` does not match entity {}", e.0));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub kb: KnowledgeBase,
    pub train: Vec<LabeledDialog>,
    pub dev: Vec<LabeledDialog>,
    pub test: Vec<LabeledDialog>,
}

pub fn dialogs_to_jsonl(dialogs: &[LabeledDialog]) -> String {
    let mut out = String::new();
    for d in dialogs {
        out.push_str(&serde_json::to_string(d).expect("dialog serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_dialogs(text: &str) -> Result<Vec<LabeledDialog>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: LabeledDialog =
            serde_json::from_str(line).map_err(|e| DataError::Malformed { line: i + 1, message: e.to_string() })?;
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

pub fn save_dialogs(dialogs: &[LabeledDialog], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, dialogs_to_jsonl(dialogs)).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn load_dialogs(path: impl AsRef<Path>) -> Result<Vec<LabeledDialog>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_dialogs(&text)
}

// ---- generator ----

const SHARED_KEYS: [[&str; KEYS_PER_TYPE]; 2] = [
    ["mood", "era", "style", "vibe", "theme", "origin", "rating", "format"],
    ["region", "price", "ambience", "season", "crowd", "hours", "size", "budget"],
];

fn exclusive_keys(type_id: usize) -> [&'static str; KEYS_PER_TYPE] {
    match type_id {
        0 => ["genre", "director", "studio", "setting", "language", "runtime", "cast", "award"],
        1 => ["instrument", "artist", "label", "tempo", "album", "key", "vocals", "decade"],
        2 => ["flavor", "ingredient", "course", "texture", "cuisine", "spice", "diet", "cooking"],
        _ => ["landmark", "activity", "terrain", "access", "district", "view", "facility", "parking"],
    }
}

fn type_noun(type_id: usize) -> &'static str {
    ["movie", "song", "dish", "place"][type_id]
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "dr"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

struct WordMaker {
    used: HashSet<String>,
}

impl WordMaker {
    fn new() -> Self {
        let mut used: HashSet<String> = HashSet::new();
        for t in TEMPLATE_TEXT {
            used.extend(split_words(t));
        }
        for ty in 0..4 {
            used.extend(exclusive_keys(ty).iter().map(|s| s.to_string()));
            used.insert(type_noun(ty).to_string());
        }
        for keys in SHARED_KEYS {
            used.extend(keys.iter().map(|s| s.to_string()));
        }
        used.extend(DEFAULT_TYPES.iter().map(|s| s.to_string()));
        Self { used }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Key for slot `i` of a type: shared within its pair when `i < shared`.
fn key_for(type_id: usize, slot: usize, shared: usize) -> &'static str {
    if slot < shared {
        SHARED_KEYS[type_id / 2][slot]
    } else {
        exclusive_keys(type_id)[slot]
    }
}

/// Smallest attribute subset (size 1, then 2) that no other entity also has.
pub fn identifying_attributes(kb_entities: &[Entity], e: usize) -> Option<Vec<(String, String)>> {
    let attrs = &kb_entities[e].attributes;
    let unique = |subset: &[&(String, String)]| {
        !kb_entities.iter().enumerate().any(|(j, other)| j != e && subset.iter().all(|a| other.attributes.contains(a)))
    };
    for a in attrs {
        if unique(&[a]) {
            return Some(vec![a.clone()]);
        }
    }
    for i in 0..attrs.len() {
        for j in i + 1..attrs.len() {
            if unique(&[&attrs[i], &attrs[j]]) {
                return Some(vec![attrs[i].clone(), attrs[j].clone()]);
            }
        }
    }
    None
}

fn build_kb(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, words: &mut WordMaker) -> Result<KnowledgeBase, DataError> {
    let shared = (cfg.attribute_overlap * KEYS_PER_TYPE as f64).round() as usize;
    // value pools keyed by key name, so shared keys share their pool
    let mut pools: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
    for ty in 0..DEFAULT_TYPES.len() {
        for slot in 0..KEYS_PER_TYPE {
            let key = key_for(ty, slot, shared);
            if !pools.contains_key(key) {
                let values = (0..VALUES_PER_KEY).map(|_| words.fresh(rng)).collect();
                pools.insert(key, values);
            }
        }
    }
    let n = cfg.n_entities_per_type * DEFAULT_TYPES.len();
    let mut entities: Vec<Entity> = Vec::with_capacity(n);
    for ty in 0..DEFAULT_TYPES.len() {
        for _ in 0..cfg.n_entities_per_type {
            let id = entities.len();
            let name_len = rng.gen_range(1..=3);
            let name = (0..name_len).map(|_| words.fresh(rng)).collect::<Vec<_>>().join(" ");
            entities.push(Entity { id: EntityId(id), name, type_id: ty, attributes: vec![] });
        }
    }
    let sample_attributes = |ty: usize, rng: &mut ChaCha8Rng| {
        let count = rng.gen_range(MIN_ATTRIBUTES..=MAX_ATTRIBUTES);
        let mut slots: Vec<usize> = (0..KEYS_PER_TYPE).collect();
        slots.shuffle(rng);
        slots.truncate(count);
        slots.sort_unstable();
        slots
            .into_iter()
            .map(|s| {
                let key = key_for(ty, s, shared);
                (key.to_string(), pools[key].choose(rng).unwrap().clone())
            })
            .collect::<Vec<_>>()
    };
    for e in 0..n {
        let ty = entities[e].type_id;
        entities[e].attributes = sample_attributes(ty, rng);
    }
    // resample entities until every one has an identifying subset of size <= 2
    for _round in 0..200 {
        let stuck: Vec<usize> = (0..n).filter(|&e| identifying_attributes(&entities, e).is_none()).collect();
        if stuck.is_empty() {
            return KnowledgeBase::new(cfg.types.clone(), entities, vec![]).map_err(|e| DataError::InvalidConfig(e.to_string()));
        }
        for e in stuck {
            let ty = entities[e].type_id;
            entities[e].attributes = sample_attributes(ty, rng);
        }
    }
    Err(DataError::Infeasible(n))
}

const GREET_USER: [&str; 5] = ["hi there !", "hello !", "hey , how are you ?", "good evening !", "hi , i need some help ."];
const GREET_AGENT: [&str; 5] = [
    "hello ! what are you looking for today ?",
    "hi ! how can i help you ?",
    "hey ! what can i find for you ?",
    "good to see you ! what do you need ?",
    "hello there ! tell me what you want .",
];
const VAGUE_TYPED: [&str; 5] = [
    "can you recommend a {noun} ?",
    "i want a {noun} .",
    "please suggest a {noun} .",
    "do you know a good {noun} ?",
    "i am looking for a {noun} .",
];
const VAGUE_UNTYPED: [&str; 5] = [
    "can you recommend something ?",
    "i need a suggestion .",
    "what do you suggest ?",
    "please help me pick something .",
    "i want something new .",
];
const ELICIT_AGENT: [&str; 5] = [
    "sure ! what do you like ?",
    "of course . any preferences ?",
    "happy to help . tell me more .",
    "sure , what should it have ?",
    "okay ! what are you in the mood for ?",
];
const ANSWER_USER: [&str; 5] = ["something with {attrs} .", "it should have {attrs} .", "i like {attrs} .", "maybe {attrs} .", "{attrs} please ."];
const REQUEST_TYPED: [&str; 5] = [
    "can you recommend a {noun} with {attrs} ?",
    "i am looking for a {noun} with {attrs} .",
    "please suggest a {noun} with {attrs} .",
    "any {noun} with {attrs} ?",
    "i want a {noun} that has {attrs} .",
];
const REQUEST_UNTYPED: [&str; 5] = [
    "can you recommend something with {attrs} ?",
    "i am looking for something with {attrs} .",
    "anything with {attrs} ?",
    "i want something that has {attrs} .",
    "please find me something with {attrs} .",
];
const THANKS_USER: [&str; 5] = ["thanks , bye !", "great , thank you !", "perfect , thanks .", "thank you so much !", "nice , that is all ."];
const CLOSE_AGENT: [&str; 5] = [
    "you are welcome , enjoy !",
    "glad i could help . bye !",
    "have a great day !",
    "anytime . see you soon !",
    "enjoy and come back soon !",
];

fn recommend_templates(type_id: usize) -> [&'static str; 5] {
    match type_id {
        0 => [
            "you should watch {e} .",
            "how about {e} ? it is a great movie .",
            "i recommend the movie {e} .",
            "try watching {e} tonight .",
            "{e} is a movie you will enjoy .",
        ],
        1 => [
            "you should listen to {e} .",
            "how about {e} ? it is a great song .",
            "i recommend the song {e} .",
            "try listening to {e} today .",
            "{e} is a song you will enjoy .",
        ],
        2 => [
            "you should eat {e} .",
            "how about {e} ? it is a great dish .",
            "i recommend the dish {e} .",
            "try cooking {e} tonight .",
            "{e} is a dish you will enjoy .",
        ],
        _ => [
            "you should visit {e} .",
            "how about {e} ? it is a great place .",
            "i recommend the place {e} .",
            "try visiting {e} this weekend .",
            "{e} is a place you will enjoy .",
        ],
    }
}

const TEMPLATE_TEXT: [&str; 13] = [
    "hi there hello hey how are you good evening i need some help",
    "what looking for today can help find do want tell me to see",
    "recommend a suggest know am something suggestion pick new please",
    "sure like of course any preferences happy more should it have okay in the mood",
    "with maybe that has anything find thanks bye great thank perfect so much nice is all",
    "welcome enjoy glad could day anytime soon and come back",
    "watch about great movie the try watching tonight will",
    "listen song listening eat dish cooking visit place visiting this weekend",
    "movie music food poi",
    "and , . ! ? :",
    "genre director studio setting instrument artist label tempo",
    "flavor ingredient course texture landmark activity terrain access",
    "mood era style vibe region price ambience season",
];

fn attr_phrase(attrs: &[(String, String)]) -> String {
    attrs.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(" and ")
}

struct DialogBuilder<'a> {
    kb: &'a KnowledgeBase,
    turns: Vec<LabeledTurn>,
}

impl DialogBuilder<'_> {
    fn user(&mut self, text: String) {
        let entities = link_mentions(&split_words(&text), self.kb).into_iter().map(|m| m.entity).collect();
        self.turns.push(LabeledTurn { speaker: Speaker::User, text, entities, trigger: None, gold_entity: None, gold_type: None });
    }

    fn agent(&mut self, text: String, gold: Option<EntityId>) {
        let entities = link_mentions(&split_words(&text), self.kb).into_iter().map(|m| m.entity).collect();
        let gold_type = gold.map(|e| self.kb.type_name_of(e).expect("valid gold").to_string());
        self.turns.push(LabeledTurn {
            speaker: Speaker::Agent,
            text,
            entities,
            trigger: Some(gold.is_some()),
            gold_entity: gold,
            gold_type,
        });
    }
}

/// Deterministic KB and train/dev/test dialogs; dialog `i` goes to dev when
/// `i % 10 == 8`, to test when `i % 10 == 9`, else to train.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = WordMaker::new();
    let kb = build_kb(cfg, &mut rng, &mut words)?;
    let identifying: Vec<Vec<(String, String)>> =
        (0..kb.len()).map(|e| identifying_attributes(kb.entities(), e).expect("checked at build")).collect();
    let pick = |rng: &mut ChaCha8Rng, list: &[&'static str]| *list.choose(rng).unwrap();
    let (mut train, mut dev, mut test) = (vec![], vec![], vec![]);
    for i in 0..cfg.n_dialogs {
        let mut b = DialogBuilder { kb: &kb, turns: vec![] };
        if rng.gen_bool(cfg.chitchat_ratio) {
            b.user(pick(&mut rng, &GREET_USER).to_string());
            b.agent(pick(&mut rng, &GREET_AGENT).to_string(), None);
        }
        let episodes = rng.gen_range(cfg.turns_range.0..=cfg.turns_range.1);
        for _ in 0..episodes {
            let ty = rng.gen_range(0..DEFAULT_TYPES.len());
            let pool = crate::kb::entities_of_type(&kb, ty).expect("valid type");
            let gold = *pool.choose(&mut rng).unwrap();
            let attrs = attr_phrase(&identifying[gold.0]);
            let typed = rng.gen_bool(0.5);
            let noun = type_noun(ty);
            if rng.gen_bool(cfg.chitchat_ratio) {
                let vague = if typed { pick(&mut rng, &VAGUE_TYPED) } else { pick(&mut rng, &VAGUE_UNTYPED) };
                b.user(vague.replace("{noun}", noun));
                b.agent(pick(&mut rng, &ELICIT_AGENT).to_string(), None);
                b.user(pick(&mut rng, &ANSWER_USER).replace("{attrs}", &attrs));
            } else {
                let req = if typed { pick(&mut rng, &REQUEST_TYPED) } else { pick(&mut rng, &REQUEST_UNTYPED) };
                b.user(req.replace("{noun}", noun).replace("{attrs}", &attrs));
            }
            let name = &kb.entity(gold).expect("valid").name;
            b.agent(pick(&mut rng, &recommend_templates(ty)).replace("{e}", name), Some(gold));
        }
        if rng.gen_bool(cfg.chitchat_ratio) {
            b.user(pick(&mut rng, &THANKS_USER).to_string());
            b.agent(pick(&mut rng, &CLOSE_AGENT).to_string(), None);
        }
        let dialog = LabeledDialog { id: format!("d{i:05}"), turns: b.turns };
        match i % 10 {
            8 => dev.push(dialog),
            9 => test.push(dialog),
            _ => train.push(dialog),
        }
    }
    Ok(Corpus { kb, train, dev, test })
}

/// Attribute pairs stated by user turns before agent turn `upto`.
pub fn elicited_attributes(kb: &KnowledgeBase, dialog: &LabeledDialog, upto: usize) -> Vec<(String, String)> {
    let keys: HashSet<&str> = kb.entities().iter().flat_map(|e| e.attributes.iter().map(|(k, _)| k.as_str())).collect();
    let start = dialog.turns[..upto].iter().rposition(|t| t.speaker == Speaker::Agent && t.trigger == Some(true)).map_or(0, |p| p + 1);
    let mut out = Vec::new();
    for t in &dialog.turns[start..upto] {
        if t.speaker != Speaker::User {
            continue;
        }
        let w = split_words(&t.text);
        for i in 0..w.len().saturating_sub(1) {
            if keys.contains(w[i].as_str()) {
                out.push((w[i].clone(), w[i + 1].clone()));
            }
        }
    }
    out
}
