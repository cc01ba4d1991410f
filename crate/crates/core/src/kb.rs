//! Knowledge base of typed entities: loading, type index, text rendering,
//! mention linking and entity embeddings.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::ModelBundle;
use crate::text::split_words;

pub const SEPARATOR: &str = "[SEP]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub usize);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub type_id: usize,
    pub attributes: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: String,
    pub object: EntityId,
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing knowledge base at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("knowledge base declares no types")]
    NoTypes,
    #[error("type `{0}` declared twice")]
    DuplicateType(String),
    #[error("entity id {0} appears more than once")]
    DuplicateId(usize),
    #[error("entity ids must be dense in 0..{count}; id {id} is out of range")]
    NonDenseId { id: usize, count: usize },
    #[error("entity {id} (`{name}`) has unknown type `{type_name}`")]
    UnknownType { id: usize, name: String, type_name: String },
    #[error("entity {0} has an empty name")]
    EmptyName(usize),
    #[error("triple {index} references entity {id}, but the knowledge base has {count} entities")]
    DanglingTriple { index: usize, id: usize, count: usize },
    #[error("entity id {0} is out of range")]
    InvalidEntity(usize),
    #[error("type index {0} is out of range")]
    InvalidType(usize),
}

#[derive(Serialize, Deserialize)]
struct KbFile {
    types: Vec<String>,
    entities: Vec<EntityRecord>,
    #[serde(default)]
    triples: Vec<(usize, String, usize)>,
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    id: usize,
    name: String,
    #[serde(rename = "type")]
    type_name: String,
    #[serde(default)]
    attributes: IndexMap<String, String>,
}

/// Typed entities with attribute text. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    types: Vec<String>,
    entities: Vec<Entity>,
    triples: Vec<Triple>,
    type_index: Vec<Vec<EntityId>>,
    name_tokens: Vec<Vec<String>>,
    by_first_token: HashMap<String, Vec<usize>>,
}

/// A linked entity mention over the token span `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

impl KnowledgeBase {
    /// Builds a knowledge base, validating every invariant. Entities must be
    /// given with dense ids; they are stored in id order.
    pub fn new(types: Vec<String>, mut entities: Vec<Entity>, triples: Vec<Triple>) -> Result<Self, KbError> {
        if types.is_empty() {
            return Err(KbError::NoTypes);
        }
        for (i, t) in types.iter().enumerate() {
            if types[..i].contains(t) {
                return Err(KbError::DuplicateType(t.clone()));
            }
        }
        let count = entities.len();
        let mut seen = vec![false; count];
        for e in &entities {
            if e.id.0 >= count {
                return Err(KbError::NonDenseId { id: e.id.0, count });
            }
            if std::mem::replace(&mut seen[e.id.0], true) {
                return Err(KbError::DuplicateId(e.id.0));
            }
            if e.name.trim().is_empty() {
                return Err(KbError::EmptyName(e.id.0));
            }
            if e.type_id >= types.len() {
                return Err(KbError::InvalidType(e.type_id));
            }
        }
        entities.sort_by_key(|e| e.id);
        for (index, t) in triples.iter().enumerate() {
            for id in [t.subject, t.object] {
                if id.0 >= count {
                    return Err(KbError::DanglingTriple { index, id: id.0, count });
                }
            }
        }
        let mut type_index = vec![Vec::new(); types.len()];
        for e in &entities {
            type_index[e.type_id].push(e.id);
        }
        let name_tokens: Vec<Vec<String>> = entities.iter().map(|e| split_words(&e.name)).collect();
        let mut by_first_token: HashMap<String, Vec<usize>> = HashMap::new();
        for (idx, name) in name_tokens.iter().enumerate() {
            if let Some(first) = name.first() {
                by_first_token.entry(first.clone()).or_default().push(idx);
            }
        }
        Ok(Self { types, entities, triples, type_index, name_tokens, by_first_token })
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let file: KbFile = serde_json::from_str(text).map_err(|e| KbError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let type_ids: HashMap<&str, usize> = file.types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut entities = Vec::with_capacity(file.entities.len());
        for rec in &file.entities {
            let type_id = *type_ids.get(rec.type_name.as_str()).ok_or_else(|| KbError::UnknownType {
                id: rec.id,
                name: rec.name.clone(),
                type_name: rec.type_name.clone(),
            })?;
            entities.push(Entity {
                id: EntityId(rec.id),
                name: rec.name.clone(),
                type_id,
                attributes: rec.attributes.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            });
        }
        let triples = file
            .triples
            .into_iter()
            .map(|(s, r, o)| Triple { subject: EntityId(s), relation: r, object: EntityId(o) })
            .collect();
        Self::new(file.types, entities, triples)
    }

    pub fn to_json(&self) -> String {
        let file = KbFile {
            types: self.types.clone(),
            entities: self
                .entities
                .iter()
                .map(|e| EntityRecord {
                    id: e.id.0,
                    name: e.name.clone(),
                    type_name: self.types[e.type_id].clone(),
                    attributes: e.attributes.iter().cloned().collect(),
                })
                .collect(),
            triples: self.triples.iter().map(|t| (t.subject.0, t.relation.clone(), t.object.0)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("knowledge base serializes")
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity, KbError> {
        self.entities.get(id.0).ok_or(KbError::InvalidEntity(id.0))
    }

    pub fn type_name_of(&self, id: EntityId) -> Result<&str, KbError> {
        Ok(&self.types[self.entity(id)?.type_id])
    }

    /// Lowercased surface tokens of the entity name.
    pub fn name_tokens(&self, id: EntityId) -> Result<&[String], KbError> {
        self.name_tokens.get(id.0).map(Vec::as_slice).ok_or(KbError::InvalidEntity(id.0))
    }

    /// `(e, is-instance-of, type)` facts, derived from the stored type field.
    pub fn instance_of_triples(&self) -> impl Iterator<Item = (EntityId, &'static str, &str)> {
        self.entities.iter().map(move |e| (e.id, "is-instance-of", self.types[e.type_id].as_str()))
    }

    pub fn all_entity_ids(&self) -> Vec<EntityId> {
        self.entities.iter().map(|e| e.id).collect()
    }
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    KnowledgeBase::from_json(&text)
}

/// Candidate pool for a type, in id order.
pub fn entities_of_type(kb: &KnowledgeBase, type_id: usize) -> Result<&[EntityId], KbError> {
    kb.type_index.get(type_id).map(Vec::as_slice).ok_or(KbError::InvalidType(type_id))
}

/// `name [SEP] type [SEP] key: value [SEP] ...` in stored attribute order.
pub fn render_entity_text(kb: &KnowledgeBase, id: EntityId) -> Result<String, KbError> {
    let e = kb.entity(id)?;
    let mut parts = vec![e.name.clone(), kb.types[e.type_id].clone()];
    parts.extend(e.attributes.iter().map(|(k, v)| format!("{k}: {v}")));
    Ok(parts.join(&format!(" {SEPARATOR} ")))
}

/// Greedy left-to-right longest match of entity names over lowercased tokens.
pub fn link_mentions<S: AsRef<str>>(tokens: &[S], kb: &KnowledgeBase) -> Vec<Mention> {
    let lowered: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lowered.len() {
        let mut best: Option<(usize, EntityId)> = None;
        for &idx in kb.by_first_token.get(&lowered[i]).map(Vec::as_slice).unwrap_or_default() {
            let name = &kb.name_tokens[idx];
            let n = name.len();
            if i + n > lowered.len() || best.is_some_and(|(len, _)| len >= n) {
                continue;
            }
            if lowered[i..i + n] == name[..] {
                best = Some((n, EntityId(idx)));
            }
        }
        match best {
            Some((n, entity)) => {
                out.push(Mention { start: i, end: i + n, entity });
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

/// Row `e` holds the embedding of entity `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddingTable {
    pub dim: usize,
    pub vectors: Array2<f64>,
}

impl EntityEmbeddingTable {
    pub fn row(&self, id: EntityId) -> Vec<f64> {
        self.vectors.row(id.0).to_vec()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

pub fn embed_entity(kb: &KnowledgeBase, id: EntityId, model: &ModelBundle) -> Result<Vec<f64>, KbError> {
    let text = render_entity_text(kb, id)?;
    Ok(model.embed_text(&model.vocab().encode(&text)))
}

pub fn precompute_embeddings(kb: &KnowledgeBase, model: &ModelBundle) -> EntityEmbeddingTable {
    let dim = model.config().dim;
    let mut vectors = Array2::zeros((kb.len(), dim));
    for e in kb.entities() {
        let v = embed_entity(kb, e.id, model).expect("entity ids are valid");
        vectors.row_mut(e.id.0).assign(&ndarray::ArrayView1::from(&v));
    }
    EntityEmbeddingTable { dim, vectors }
}
