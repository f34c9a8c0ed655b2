//! The knowledge graph: entity canonicalization, triple materialization
//! from annotations, SPO/POS/OSP indexes, and merging.
//!
//! A graph is built single-writer (via [`build_graph`] or the `add_*`
//! methods) and then treated as immutable; every read path (query, export,
//! inference input) works on a shared reference.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::brat::{AnnotationSet, Finding};
use crate::ingest::{split_sentences, Document, Sentence};
use crate::ioc;
use crate::schema::{OntologySchema, SchemaError};
use crate::text::{percent_encode, slug, trim_punct};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("label {0:?} is empty after trimming")]
    EmptyLabel(String),
    #[error("graphs were built against different schemas")]
    SchemaMismatch,
    #[error("graphs use different namespaces")]
    NamespaceMismatch,
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("entity {entity_id} annotated as both {existing} and {incoming}")]
    ClassConflict {
        entity_id: String,
        existing: String,
        incoming: String,
    },
    #[error("{} build violation(s); first: {}", .0.len(), .0.first().map(|f| f.message.as_str()).unwrap_or(""))]
    BuildViolations(Vec<Finding>),
    #[error("annotation set for unknown document {0}")]
    MissingDocument(String),
    #[error("duplicate document {0}")]
    DuplicateDocument(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("alias table line {line}: {message}")]
    AliasTable { line: usize, message: String },
}

/// (head, relation, tail) — the identity of a triple within a graph.
pub type TripleKey = (String, String, String);

/// Where a triple's annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AnnotationSource {
    Manual,
    AutoIoc,
}

impl AnnotationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationSource::Manual => "manual",
            AnnotationSource::AutoIoc => "auto-ioc",
        }
    }
}

/// One supporting derivation of a triple: either a document annotation or
/// a rule firing over premise triples.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Document {
        doc_id: String,
        /// Sentence containing the head span. The tail span may fall in a
        /// different sentence when annotators link across sentences.
        sentence_index: usize,
        head_span: (usize, usize),
        tail_span: (usize, usize),
        source: AnnotationSource,
    },
    Inferred {
        rule_name: String,
        premises: Vec<TripleKey>,
    },
}

/// A canonical graph node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub entity_id: String,
    pub class_name: String,
    pub label: String,
    pub aliases: BTreeSet<String>,
}

impl Entity {
    pub fn uri(&self, ns: &Namespace) -> String {
        ns.entity_uri(&self.entity_id)
    }
}

/// A directed labeled edge with provenance.
///
/// Provenance is kept in derivation order (the first `Inferred` entry is
/// the one recorded when the triple was first derived), but equality
/// treats the list as a set.
#[derive(Debug, Clone, Eq)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub asserted: bool,
    pub provenance: Vec<Provenance>,
}

impl Triple {
    pub fn key(&self) -> TripleKey {
        (
            self.head.clone(),
            self.relation.clone(),
            self.tail.clone(),
        )
    }

    /// Provenance entries in canonical (sorted) order.
    pub fn provenance_sorted(&self) -> Vec<&Provenance> {
        let mut out: Vec<&Provenance> = self.provenance.iter().collect();
        out.sort();
        out
    }
}

impl PartialEq for Triple {
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head
            && self.relation == other.relation
            && self.tail == other.tail
            && self.asserted == other.asserted
            && self.provenance_sorted() == other.provenance_sorted()
    }
}

/// Base URI namespace with `entity/`, `prop/` and `class/` paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Namespace {
    base: String,
}

impl Default for Namespace {
    fn default() -> Self {
        Namespace::new("http://tinker.example/")
    }
}

impl Namespace {
    pub fn new(base: &str) -> Namespace {
        let base = if base.ends_with('/') {
            base.to_string()
        } else {
            format!("{}/", base)
        };
        Namespace { base }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn entity_uri(&self, id: &str) -> String {
        format!("{}entity/{}", self.base, percent_encode(id))
    }

    pub fn prop_uri(&self, name: &str) -> String {
        format!("{}prop/{}", self.base, percent_encode(name))
    }

    pub fn class_uri(&self, name: &str) -> String {
        format!("{}class/{}", self.base, percent_encode(name))
    }
}

/// Surface-form → canonical-label table. Keys are case-folded except for
/// Indicator/Vulnerability rows, which stay case-sensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    rows: BTreeMap<(String, String), String>,
}

fn ioc_class(class_name: &str) -> bool {
    class_name == "Indicator" || class_name == "Vulnerability"
}

impl AliasTable {
    pub fn empty() -> AliasTable {
        AliasTable::default()
    }

    /// Parses the TSV format `surface<TAB>canonical label<TAB>class`.
    ///
    /// A canonical label must not itself be remapped by another row of the
    /// same class; that keeps canonicalization idempotent.
    pub fn parse(text: &str) -> Result<AliasTable, GraphError> {
        let mut rows = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(GraphError::AliasTable {
                    line: line_no,
                    message: "expected surface<TAB>canonical label<TAB>class".to_string(),
                });
            }
            let (surface, canonical, class) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
            if surface.is_empty() || canonical.is_empty() || class.is_empty() {
                return Err(GraphError::AliasTable {
                    line: line_no,
                    message: "empty column".to_string(),
                });
            }
            let key = if ioc_class(class) {
                surface.to_string()
            } else {
                surface.to_lowercase()
            };
            rows.insert((key, class.to_string()), canonical.to_string());
        }
        let table = AliasTable { rows };
        for ((_, class), canonical) in &table.rows {
            let canon_key = if ioc_class(class) {
                canonical.clone()
            } else {
                canonical.to_lowercase()
            };
            if let Some(target) = table.rows.get(&(canon_key, class.clone())) {
                if target != canonical {
                    return Err(GraphError::AliasTable {
                        line: 0,
                        message: format!(
                            "canonical label {:?} is remapped to {:?}; aliases must not chain",
                            canonical, target
                        ),
                    });
                }
            }
        }
        Ok(table)
    }

    pub fn get(&self, key: &str, class_name: &str) -> Option<&str> {
        self.rows
            .get(&(key.to_string(), class_name.to_string()))
            .map(String::as_str)
    }

    /// Class-agnostic lookup used when resolving query constants; returns
    /// the first match in class order.
    pub fn get_any(&self, folded_key: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|((k, _), _)| k == folded_key)
            .map(|(_, v)| v.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// If the whole string is a single indicator match, its normalized form.
fn ioc_normal_form(text: &str) -> Option<String> {
    let doc = Document {
        doc_id: String::new(),
        text: text.to_string(),
        source_name: String::new(),
        year: None,
    };
    let matches = ioc::extract_iocs(&doc);
    match matches.as_slice() {
        [m] if m.start == 0 && m.end == text.chars().count() => Some(m.normalized.clone()),
        _ => None,
    }
}

/// Id rule for Indicator/Vulnerability labels: the case-sensitive
/// normalized form with whitespace runs collapsed to `-`, so
/// `dustman.exe` keeps its dot instead of degrading to `dustman-exe`.
fn ioc_entity_id(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join("-")
}

/// Canonicalizes one surface form to `(entityId, canonical label)`.
///
/// Non-indicator surfaces are case-folded for the alias lookup; on a hit
/// the table's canonical label wins, otherwise the trimmed surface is the
/// label. Indicator and Vulnerability surfaces instead keep their
/// case-sensitive normalized IoC form.
pub fn canonicalize_label(
    surface: &str,
    class_name: &str,
    aliases: &AliasTable,
) -> Result<(String, String), GraphError> {
    let trimmed = trim_punct(surface);
    if trimmed.is_empty() {
        return Err(GraphError::EmptyLabel(surface.to_string()));
    }
    let (key, fallback) = if ioc_class(class_name) {
        let norm = ioc_normal_form(trimmed).unwrap_or_else(|| trimmed.to_string());
        (norm.clone(), norm)
    } else {
        (trimmed.to_lowercase(), trimmed.to_string())
    };
    let label = aliases
        .get(&key, class_name)
        .map(str::to_string)
        .unwrap_or(fallback);
    let entity_id = if ioc_class(class_name) {
        ioc_entity_id(&label)
    } else {
        slug(&label)
    };
    if entity_id.is_empty() {
        return Err(GraphError::EmptyLabel(surface.to_string()));
    }
    Ok((entity_id, label))
}

/// The graph: an entity registry plus triple indexes in SPO, POS and OSP
/// order.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub schema: Arc<OntologySchema>,
    pub namespace: Namespace,
    entities: BTreeMap<String, Entity>,
    triples: BTreeMap<TripleKey, Triple>,
    pos: BTreeSet<(String, String, String)>,
    osp: BTreeSet<(String, String, String)>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.namespace == other.namespace
            && self.entities == other.entities
            && self.triples == other.triples
    }
}

impl Eq for KnowledgeGraph {}

impl KnowledgeGraph {
    pub fn new(schema: Arc<OntologySchema>, namespace: Namespace) -> KnowledgeGraph {
        KnowledgeGraph {
            schema,
            namespace,
            entities: BTreeMap::new(),
            triples: BTreeMap::new(),
            pos: BTreeSet::new(),
            osp: BTreeSet::new(),
        }
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triple(&self, key: &TripleKey) -> Option<&Triple> {
        self.triples.get(key)
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.values()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// All three indexes enumerate the same triple set.
    pub fn indexes_consistent(&self) -> bool {
        if self.pos.len() != self.triples.len() || self.osp.len() != self.triples.len() {
            return false;
        }
        self.pos
            .iter()
            .all(|(p, o, s)| self.triples.contains_key(&(s.clone(), p.clone(), o.clone())))
            && self
                .osp
                .iter()
                .all(|(o, s, p)| self.triples.contains_key(&(s.clone(), p.clone(), o.clone())))
    }

    /// Registers (or re-labels into) an entity for `label`, returning its
    /// id. The label becomes one of the aliases.
    pub fn add_entity(&mut self, class_name: &str, label: &str) -> Result<String, GraphError> {
        let (entity_id, label) = canonicalize_label(label, class_name, &AliasTable::empty())?;
        self.add_entity_with_id(entity_id.clone(), class_name, &label)?;
        Ok(entity_id)
    }

    pub(crate) fn add_entity_with_id(
        &mut self,
        entity_id: String,
        class_name: &str,
        label: &str,
    ) -> Result<(), GraphError> {
        self.schema.class(class_name)?;
        match self.entities.get_mut(&entity_id) {
            Some(existing) => {
                if existing.class_name != class_name {
                    return Err(GraphError::ClassConflict {
                        entity_id,
                        existing: existing.class_name.clone(),
                        incoming: class_name.to_string(),
                    });
                }
                existing.aliases.insert(label.to_string());
            }
            None => {
                let mut aliases = BTreeSet::new();
                aliases.insert(label.to_string());
                self.entities.insert(
                    entity_id.clone(),
                    Entity {
                        entity_id,
                        class_name: class_name.to_string(),
                        label: label.to_string(),
                        aliases,
                    },
                );
            }
        }
        Ok(())
    }

    /// Adds one provenance entry to an asserted triple, creating the triple
    /// when new. Endpoints must exist; the relation must pass domain/range;
    /// self-loops are rejected.
    pub fn add_triple(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        provenance: Provenance,
    ) -> Result<(), GraphError> {
        self.insert_triple(head, relation, tail, true, provenance)
    }

    /// Adds an inferred (asserted = false) triple with rule provenance,
    /// under the same checks as [`KnowledgeGraph::add_triple`].
    pub fn add_inferred(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        rule_name: &str,
        premises: Vec<TripleKey>,
    ) -> Result<(), GraphError> {
        self.insert_triple(
            head,
            relation,
            tail,
            false,
            Provenance::Inferred {
                rule_name: rule_name.to_string(),
                premises,
            },
        )
    }

    pub(crate) fn insert_triple(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        asserted: bool,
        provenance: Provenance,
    ) -> Result<(), GraphError> {
        let head_class = self
            .entities
            .get(head)
            .ok_or_else(|| GraphError::UnknownEntity(head.to_string()))?
            .class_name
            .clone();
        let tail_class = self
            .entities
            .get(tail)
            .ok_or_else(|| GraphError::UnknownEntity(tail.to_string()))?
            .class_name
            .clone();
        if head == tail {
            return Err(GraphError::BuildViolations(vec![Finding {
                doc_id: String::new(),
                ann_id: None,
                kind: "SelfLoop".to_string(),
                message: format!("{} {} {} is reflexive", head, relation, tail),
            }]));
        }
        if !self.schema.check_domain_range(relation, &head_class, &tail_class)? {
            return Err(GraphError::BuildViolations(vec![Finding {
                doc_id: String::new(),
                ann_id: None,
                kind: "DomainRangeViolation".to_string(),
                message: format!(
                    "{} between {} and {} violates domain/range",
                    relation, head_class, tail_class
                ),
            }]));
        }
        self.insert_unchecked(head, relation, tail, asserted, provenance);
        Ok(())
    }

    /// Creates a triple with no provenance yet (N-Triples carry none; the
    /// sidecar adds it separately).
    pub(crate) fn insert_bare(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        asserted: bool,
    ) {
        let key = (head.to_string(), relation.to_string(), tail.to_string());
        if self.triples.contains_key(&key) {
            return;
        }
        self.pos
            .insert((relation.to_string(), tail.to_string(), head.to_string()));
        self.osp
            .insert((tail.to_string(), head.to_string(), relation.to_string()));
        self.triples.insert(
            key,
            Triple {
                head: head.to_string(),
                relation: relation.to_string(),
                tail: tail.to_string(),
                asserted,
                provenance: Vec::new(),
            },
        );
    }

    pub(crate) fn triple_mut(&mut self, key: &TripleKey) -> Option<&mut Triple> {
        self.triples.get_mut(key)
    }

    /// Copies a triple verbatim when absent; otherwise unions provenance
    /// and keeps the triple asserted if either side asserts it. Handles
    /// triples whose provenance list is empty (plain `.nt` parses).
    pub(crate) fn merge_triple(&mut self, t: &Triple) {
        let key = t.key();
        match self.triples.get_mut(&key) {
            Some(existing) => {
                for p in &t.provenance {
                    if !existing.provenance.contains(p) {
                        existing.provenance.push(p.clone());
                    }
                }
                existing.asserted = existing.asserted || t.asserted;
            }
            None => {
                self.pos
                    .insert((key.1.clone(), key.2.clone(), key.0.clone()));
                self.osp
                    .insert((key.2.clone(), key.0.clone(), key.1.clone()));
                self.triples.insert(key, t.clone());
            }
        }
    }

    /// Insertion after checks (or for already-validated clones during
    /// merge/subgraph building). Duplicate derivations append provenance.
    pub(crate) fn insert_unchecked(
        &mut self,
        head: &str,
        relation: &str,
        tail: &str,
        asserted: bool,
        provenance: Provenance,
    ) {
        let key = (head.to_string(), relation.to_string(), tail.to_string());
        match self.triples.get_mut(&key) {
            Some(t) => {
                if !t.provenance.contains(&provenance) {
                    t.provenance.push(provenance);
                }
                t.asserted = t.asserted || asserted;
            }
            None => {
                self.pos
                    .insert((relation.to_string(), tail.to_string(), head.to_string()));
                self.osp
                    .insert((tail.to_string(), head.to_string(), relation.to_string()));
                self.triples.insert(
                    key,
                    Triple {
                        head: head.to_string(),
                        relation: relation.to_string(),
                        tail: tail.to_string(),
                        asserted,
                        provenance: vec![provenance],
                    },
                );
            }
        }
    }

    /// Triples matching an optionally-bound pattern, using whichever index
    /// has the longest bound prefix. Deterministic order per index.
    pub fn triples_matching(
        &self,
        head: Option<&str>,
        relation: Option<&str>,
        tail: Option<&str>,
        include_inferred: bool,
    ) -> Vec<&Triple> {
        let want = |t: &&Triple| {
            (include_inferred || t.asserted)
                && head.is_none_or(|h| t.head == h)
                && relation.is_none_or(|r| t.relation == r)
                && tail.is_none_or(|o| t.tail == o)
        };
        let keys: Vec<TripleKey> = match (head, relation, tail) {
            (Some(h), _, _) => self
                .triples
                .range(spo_range(h))
                .map(|(k, _)| k.clone())
                .collect(),
            (None, Some(p), _) => self
                .pos
                .range(spo_range(p))
                .map(|(p, o, s)| (s.clone(), p.clone(), o.clone()))
                .collect(),
            (None, None, Some(o)) => self
                .osp
                .range(spo_range(o))
                .map(|(o, s, p)| (s.clone(), p.clone(), o.clone()))
                .collect(),
            (None, None, None) => self.triples.keys().cloned().collect(),
        };
        keys.iter()
            .filter_map(|k| self.triples.get(k))
            .filter(want)
            .collect()
    }

    /// Resolves a label, alias, or entity id to an entity id: exact id
    /// first, then the build alias table, then slug/alias lookups.
    pub fn resolve_label(&self, text: &str, aliases: &AliasTable) -> Option<String> {
        let trimmed = trim_punct(text);
        if trimmed.is_empty() {
            return None;
        }
        if self.entities.contains_key(trimmed) {
            return Some(trimmed.to_string());
        }
        let folded = trimmed.to_lowercase();
        let mapped = aliases
            .get_any(&folded)
            .or_else(|| aliases.get_any(trimmed))
            .unwrap_or(trimmed);
        for candidate in [slug(mapped), ioc_entity_id(mapped)] {
            if self.entities.contains_key(&candidate) {
                return Some(candidate);
            }
        }
        // Fall back to the accumulated alias sets.
        let mut hits: BTreeSet<&str> = BTreeSet::new();
        for e in self.entities.values() {
            if e.aliases
                .iter()
                .any(|a| a == trimmed || a.to_lowercase() == folded)
            {
                hits.insert(&e.entity_id);
            }
        }
        hits.first().map(|s| s.to_string())
    }

    /// Induced subgraph of all entities within `depth` undirected hops of
    /// `entity_id`, with every triple among them.
    pub fn neighborhood(&self, entity_id: &str, depth: usize) -> Result<KnowledgeGraph, GraphError> {
        if !self.entities.contains_key(entity_id) {
            return Err(GraphError::UnknownEntity(entity_id.to_string()));
        }
        let mut keep: BTreeSet<String> = BTreeSet::new();
        let mut frontier: BTreeSet<String> = BTreeSet::new();
        frontier.insert(entity_id.to_string());
        keep.insert(entity_id.to_string());
        for _ in 0..depth {
            let mut next = BTreeSet::new();
            for node in &frontier {
                for t in self.triples_matching(Some(node), None, None, true) {
                    next.insert(t.tail.clone());
                }
                for t in self.triples_matching(None, None, Some(node), true) {
                    next.insert(t.head.clone());
                }
            }
            frontier = next.difference(&keep).cloned().collect();
            keep.extend(frontier.iter().cloned());
            if frontier.is_empty() {
                break;
            }
        }
        let mut sub = KnowledgeGraph::new(self.schema.clone(), self.namespace.clone());
        for id in &keep {
            sub.entities.insert(id.clone(), self.entities[id].clone());
        }
        for (key, triple) in &self.triples {
            if keep.contains(&key.0) && keep.contains(&key.2) {
                sub.merge_triple(triple);
            }
        }
        Ok(sub)
    }

    /// Clones one entity out of `source` into this graph (subgraph
    /// construction). No-op when the id is absent from `source`.
    pub(crate) fn copy_entity_from(&mut self, source: &KnowledgeGraph, id: &str) {
        if let Some(e) = source.entities.get(id) {
            self.entities.insert(id.to_string(), e.clone());
        }
    }

    /// Copies an entity from another graph, unioning aliases. Labels are
    /// reconciled to the lexicographically smaller one so merging is
    /// commutative.
    fn absorb_entity(&mut self, entity: &Entity) -> Result<(), GraphError> {
        match self.entities.get_mut(&entity.entity_id) {
            Some(existing) => {
                if existing.class_name != entity.class_name {
                    return Err(GraphError::ClassConflict {
                        entity_id: entity.entity_id.clone(),
                        existing: existing.class_name.clone(),
                        incoming: entity.class_name.clone(),
                    });
                }
                existing.aliases.extend(entity.aliases.iter().cloned());
                if entity.label < existing.label {
                    existing.label = entity.label.clone();
                }
            }
            None => {
                self.entities.insert(entity.entity_id.clone(), entity.clone());
            }
        }
        Ok(())
    }
}

fn spo_range(prefix: &str) -> std::ops::Range<(String, String, String)> {
    // `prefix\0` is the immediate successor of `prefix`, so the range holds
    // exactly the tuples whose first component equals `prefix`.
    (prefix.to_string(), String::new(), String::new())
        ..(format!("{}\0", prefix), String::new(), String::new())
}

/// Builds a graph from validated annotation sets. Documents are processed
/// in docId order regardless of input order, so the result is independent
/// of input permutation.
pub fn build_graph(
    docs: &[Document],
    sets: &[AnnotationSet],
    schema: Arc<OntologySchema>,
    aliases: &AliasTable,
    namespace: Namespace,
) -> Result<KnowledgeGraph, GraphError> {
    let mut by_doc: BTreeMap<&str, &Document> = BTreeMap::new();
    for doc in docs {
        if by_doc.insert(&doc.doc_id, doc).is_some() {
            return Err(GraphError::DuplicateDocument(doc.doc_id.clone()));
        }
    }
    let mut sets_by_doc: BTreeMap<&str, Vec<&AnnotationSet>> = BTreeMap::new();
    for set in sets {
        if !by_doc.contains_key(set.doc_id.as_str()) {
            return Err(GraphError::MissingDocument(set.doc_id.clone()));
        }
        sets_by_doc.entry(&set.doc_id).or_default().push(set);
    }

    let mut kg = KnowledgeGraph::new(schema, namespace);
    let mut violations: Vec<Finding> = Vec::new();

    for (doc_id, doc_sets) in &sets_by_doc {
        let doc = by_doc[*doc_id];
        let sentences = split_sentences(doc);
        for set in doc_sets {
            // annId → (entityId, envelope, sentence index)
            let mut span_info: BTreeMap<&str, (String, (usize, usize), usize)> = BTreeMap::new();
            for span in &set.entities {
                let (entity_id, label) =
                    match canonicalize_label(&span.surface, &span.class_name, aliases) {
                        Ok(v) => v,
                        Err(e) => {
                            violations.push(Finding {
                                doc_id: set.doc_id.clone(),
                                ann_id: Some(span.ann_id.clone()),
                                kind: "EmptyLabel".to_string(),
                                message: e.to_string(),
                            });
                            continue;
                        }
                    };
                if let Err(e) =
                    kg.add_entity_with_id(entity_id.clone(), &span.class_name, &label)
                {
                    violations.push(Finding {
                        doc_id: set.doc_id.clone(),
                        ann_id: Some(span.ann_id.clone()),
                        kind: "ClassConflict".to_string(),
                        message: e.to_string(),
                    });
                    continue;
                }
                // Record the trimmed surface as an alias alongside the label.
                let surface = trim_punct(&span.surface);
                if !surface.is_empty() {
                    kg.entities
                        .get_mut(&entity_id)
                        .unwrap()
                        .aliases
                        .insert(surface.to_string());
                }
                let envelope = span.envelope();
                let sentence = sentence_of(&sentences, envelope.0);
                span_info.insert(&span.ann_id, (entity_id, envelope, sentence));
            }
            for rel in &set.relations {
                let (head, tail) = match (span_info.get(rel.arg1.as_str()), span_info.get(rel.arg2.as_str())) {
                    (Some(h), Some(t)) => (h, t),
                    _ => {
                        violations.push(Finding {
                            doc_id: set.doc_id.clone(),
                            ann_id: Some(rel.ann_id.clone()),
                            kind: "DanglingArg".to_string(),
                            message: "relation references a span that failed canonicalization"
                                .to_string(),
                        });
                        continue;
                    }
                };
                let source = if set.entity(&rel.arg1).is_some_and(|e| e.is_auto())
                    || set.entity(&rel.arg2).is_some_and(|e| e.is_auto())
                {
                    AnnotationSource::AutoIoc
                } else {
                    AnnotationSource::Manual
                };
                let provenance = Provenance::Document {
                    doc_id: set.doc_id.clone(),
                    sentence_index: head.2,
                    head_span: head.1,
                    tail_span: tail.1,
                    source,
                };
                if let Err(e) =
                    kg.insert_triple(&head.0, &rel.property_name, &tail.0, true, provenance)
                {
                    let (kind, message) = match &e {
                        GraphError::BuildViolations(fs) => (
                            fs[0].kind.clone(),
                            fs[0].message.clone(),
                        ),
                        other => ("RelationError".to_string(), other.to_string()),
                    };
                    violations.push(Finding {
                        doc_id: set.doc_id.clone(),
                        ann_id: Some(rel.ann_id.clone()),
                        kind,
                        message,
                    });
                }
            }
        }
    }

    if !violations.is_empty() {
        return Err(GraphError::BuildViolations(violations));
    }
    debug_assert!(kg.indexes_consistent());
    Ok(kg)
}

fn sentence_of(sentences: &[Sentence], offset: usize) -> usize {
    match sentences.binary_search_by(|s| {
        if offset < s.start {
            std::cmp::Ordering::Greater
        } else if offset >= s.end {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Equal
        }
    }) {
        Ok(idx) => idx,
        // Offset in an inter-sentence gap: attribute to the preceding
        // sentence.
        Err(idx) => idx.saturating_sub(1),
    }
}

/// Union of two graphs built against the same schema and namespace.
/// Commutative and associative up to provenance list order.
pub fn merge_graphs(a: &KnowledgeGraph, b: &KnowledgeGraph) -> Result<KnowledgeGraph, GraphError> {
    if a.schema != b.schema {
        return Err(GraphError::SchemaMismatch);
    }
    if a.namespace != b.namespace {
        return Err(GraphError::NamespaceMismatch);
    }
    let mut out = KnowledgeGraph::new(a.schema.clone(), a.namespace.clone());
    for e in a.entities.values().chain(b.entities.values()) {
        out.absorb_entity(e)?;
    }
    for t in a.triples.values().chain(b.triples.values()) {
        out.merge_triple(t);
    }
    debug_assert!(out.indexes_consistent());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brat::parse_standoff;
    use crate::ingest::load_document;
    use crate::schema::default_schema;

    fn schema() -> Arc<OntologySchema> {
        Arc::new(default_schema())
    }

    fn alias_aurora() -> AliasTable {
        AliasTable::parse("aurora\tOperation Aurora\tMalware\n").unwrap()
    }

    #[test]
    fn alias_hit_wins() {
        let (id, label) = canonicalize_label("Aurora", "Malware", &alias_aurora()).unwrap();
        assert_eq!(id, "operation-aurora");
        assert_eq!(label, "Operation Aurora");
    }

    #[test]
    fn no_alias_keeps_surface_case_in_label() {
        let (id, label) = canonicalize_label("DUSTMAN", "Malware", &AliasTable::empty()).unwrap();
        assert_eq!(id, "dustman");
        assert_eq!(label, "DUSTMAN");
    }

    #[test]
    fn slug_rule_applies_to_labels() {
        let (id, _) =
            canonicalize_label("Turla Driver Loader (TDL)", "Software", &AliasTable::empty())
                .unwrap();
        assert_eq!(id, "turla-driver-loader-tdl");
    }

    #[test]
    fn indicator_keeps_ioc_form() {
        let (id, label) =
            canonicalize_label("\u{201c}dustman.exe\u{201d}", "Indicator", &AliasTable::empty())
                .unwrap();
        assert_eq!(id, "dustman.exe");
        assert_eq!(label, "dustman.exe");
        let (id, label) =
            canonicalize_label("10.0.0[.]1", "Indicator", &AliasTable::empty()).unwrap();
        assert_eq!(id, "10.0.0.1");
        assert_eq!(label, "10.0.0.1");
    }

    #[test]
    fn vulnerability_keeps_case() {
        let (id, _) =
            canonicalize_label("CVE-2010-2568", "Vulnerability", &AliasTable::empty()).unwrap();
        assert_eq!(id, "CVE-2010-2568");
    }

    #[test]
    fn empty_label_is_rejected() {
        assert!(matches!(
            canonicalize_label("\u{201c}\u{201d}", "Malware", &AliasTable::empty()),
            Err(GraphError::EmptyLabel(_))
        ));
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let aliases = alias_aurora();
        for (surface, class) in [
            ("Aurora", "Malware"),
            ("DUSTMAN", "Malware"),
            ("Turla Driver Loader (TDL)", "Software"),
            ("10.0.0[.]1", "Indicator"),
            ("CVE-2010-2568", "Vulnerability"),
        ] {
            let (id, label) = canonicalize_label(surface, class, &aliases).unwrap();
            let (id2, label2) = canonicalize_label(&label, class, &aliases).unwrap();
            assert_eq!((id.clone(), label.clone()), (id2, label2), "not idempotent for {:?}", surface);
        }
    }

    #[test]
    fn chained_alias_tables_are_rejected() {
        let text = "aurora\tOperation Aurora\tMalware\noperation aurora\tSomething Else\tMalware\n";
        assert!(AliasTable::parse(text).is_err());
    }

    fn tiny_graph() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new(schema(), Namespace::default());
        let d = kg.add_entity("Malware", "DUSTMAN").unwrap();
        let z = kg.add_entity("Malware", "ZeroCleare").unwrap();
        let t = kg.add_entity("Software", "Turla Driver Loader (TDL)").unwrap();
        let x = kg.add_entity("Indicator", "dustman.exe").unwrap();
        let prov = |s: usize| Provenance::Document {
            doc_id: "dustman-2020".to_string(),
            sentence_index: s,
            head_span: (0, 1),
            tail_span: (2, 3),
            source: AnnotationSource::Manual,
        };
        kg.add_triple(&d, "similarTo", &z, prov(0)).unwrap();
        kg.add_triple(&d, "involves", &t, prov(1)).unwrap();
        kg.add_triple(&z, "involves", &t, prov(1)).unwrap();
        kg.add_triple(&d, "involves", &x, prov(2)).unwrap();
        kg
    }

    #[test]
    fn build_graph_from_annotations_yields_table_triples() {
        let text = "DUSTMAN can be considered as a new variant of ZeroCleare malware.";
        let doc = load_document(text, "d1").unwrap();
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tMalware 46 56\tZeroCleare\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let set = parse_standoff(ann, &doc).unwrap();
        let kg = build_graph(
            &[doc],
            &[set],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        )
        .unwrap();
        assert_eq!(kg.entity_count(), 2);
        assert_eq!(kg.triple_count(), 1);
        let t = kg
            .triple(&("dustman".into(), "similarTo".into(), "zerocleare".into()))
            .unwrap();
        assert!(t.asserted);
        assert_eq!(t.provenance.len(), 1);
    }

    #[test]
    fn entities_without_relations_build_empty_triple_set() {
        let doc = load_document("DUSTMAN appeared.", "d1").unwrap();
        let set = parse_standoff("T1\tMalware 0 7\tDUSTMAN", &doc).unwrap();
        let kg = build_graph(
            &[doc],
            &[set],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        )
        .unwrap();
        assert_eq!(kg.entity_count(), 1);
        assert_eq!(kg.triple_count(), 0);
    }

    #[test]
    fn same_relation_in_two_documents_dedups_with_two_provenances() {
        let text = "DUSTMAN is similar to ZeroCleare.";
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tMalware 22 32\tZeroCleare\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let d1 = load_document(text, "a").unwrap();
        let d2 = load_document(text, "b").unwrap();
        let s1 = parse_standoff(ann, &d1).unwrap();
        let s2 = parse_standoff(ann, &d2).unwrap();
        let kg = build_graph(
            &[d1, d2],
            &[s1, s2],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        )
        .unwrap();
        assert_eq!(kg.triple_count(), 1);
        let t = kg
            .triple(&("dustman".into(), "similarTo".into(), "zerocleare".into()))
            .unwrap();
        assert_eq!(t.provenance.len(), 2);
    }

    #[test]
    fn build_is_order_independent() {
        let text = "DUSTMAN is similar to ZeroCleare.";
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tMalware 22 32\tZeroCleare\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let d1 = load_document(text, "a").unwrap();
        let d2 = load_document("ZeroCleare hit first.", "b").unwrap();
        let s1 = parse_standoff(ann, &d1).unwrap();
        let s2 = parse_standoff("T1\tMalware 0 10\tZeroCleare", &d2).unwrap();
        let fwd = build_graph(
            &[d1.clone(), d2.clone()],
            &[s1.clone(), s2.clone()],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        )
        .unwrap();
        let rev = build_graph(
            &[d2, d1],
            &[s2, s1],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        )
        .unwrap();
        assert_eq!(
            fwd.entities().collect::<Vec<_>>(),
            rev.entities().collect::<Vec<_>>()
        );
        assert_eq!(
            fwd.triples().collect::<Vec<_>>(),
            rev.triples().collect::<Vec<_>>()
        );
    }

    #[test]
    fn domain_range_violations_abort_build_with_full_list() {
        let text = "DUSTMAN hit Riyadh and Paris.";
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tLocation 12 18\tRiyadh\nT3\tLocation 23 28\tParis\nR1\tsimilarTo Arg1:T1 Arg2:T2\nR2\tsimilarTo Arg1:T1 Arg2:T3";
        let doc = load_document(text, "d").unwrap();
        let set = parse_standoff(ann, &doc).unwrap();
        match build_graph(
            &[doc],
            &[set],
            schema(),
            &AliasTable::empty(),
            Namespace::default(),
        ) {
            Err(GraphError::BuildViolations(v)) => assert_eq!(v.len(), 2),
            other => panic!("expected violations, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let g = tiny_graph();
        let empty = KnowledgeGraph::new(schema(), Namespace::default());
        let merged = merge_graphs(&g, &empty).unwrap();
        assert_eq!(merged.entities().collect::<Vec<_>>(), g.entities().collect::<Vec<_>>());
        assert_eq!(merged.triples().collect::<Vec<_>>(), g.triples().collect::<Vec<_>>());
    }

    #[test]
    fn merge_is_idempotent_and_commutative() {
        let g = tiny_graph();
        let gg = merge_graphs(&g, &g).unwrap();
        assert_eq!(gg.triple_count(), g.triple_count());
        for t in gg.triples() {
            assert_eq!(t.provenance.len(), g.triple(&t.key()).unwrap().provenance.len());
        }
        let mut other = KnowledgeGraph::new(schema(), Namespace::default());
        let s = other.add_entity("Malware", "Stuxnet").unwrap();
        let d = other.add_entity("Malware", "DUSTMAN").unwrap();
        other
            .add_triple(
                &s,
                "similarTo",
                &d,
                Provenance::Document {
                    doc_id: "x".into(),
                    sentence_index: 0,
                    head_span: (0, 1),
                    tail_span: (2, 3),
                    source: AnnotationSource::Manual,
                },
            )
            .unwrap();
        let ab = merge_graphs(&g, &other).unwrap();
        let ba = merge_graphs(&other, &g).unwrap();
        assert_eq!(ab.entities().collect::<Vec<_>>(), ba.entities().collect::<Vec<_>>());
        assert_eq!(
            ab.triples().map(|t| t.key()).collect::<Vec<_>>(),
            ba.triples().map(|t| t.key()).collect::<Vec<_>>()
        );
        assert_eq!(ab.triple_count(), 5);
        assert_eq!(ab.entity_count(), 5);
    }

    #[test]
    fn two_one_triple_graphs_sharing_an_entity() {
        let mut a = KnowledgeGraph::new(schema(), Namespace::default());
        let d = a.add_entity("Malware", "DUSTMAN").unwrap();
        let z = a.add_entity("Malware", "ZeroCleare").unwrap();
        let prov = Provenance::Document {
            doc_id: "x".into(),
            sentence_index: 0,
            head_span: (0, 1),
            tail_span: (2, 3),
            source: AnnotationSource::Manual,
        };
        a.add_triple(&d, "similarTo", &z, prov.clone()).unwrap();
        let mut b = KnowledgeGraph::new(schema(), Namespace::default());
        let d2 = b.add_entity("Malware", "DUSTMAN").unwrap();
        let s = b.add_entity("Malware", "Shamoon").unwrap();
        b.add_triple(&d2, "similarTo", &s, prov).unwrap();
        let merged = merge_graphs(&a, &b).unwrap();
        assert_eq!(merged.triple_count(), 2);
        assert_eq!(merged.entity_count(), 3);
    }

    #[test]
    fn merge_rejects_schema_mismatch() {
        let g = tiny_graph();
        let other_schema =
            Arc::new(crate::schema::load_schema("class Malware").unwrap());
        let other = KnowledgeGraph::new(other_schema, Namespace::default());
        assert!(matches!(
            merge_graphs(&g, &other),
            Err(GraphError::SchemaMismatch)
        ));
    }

    #[test]
    fn neighborhood_depth_one_covers_table_graph() {
        let g = tiny_graph();
        let sub = g.neighborhood("dustman", 1).unwrap();
        assert_eq!(sub.entity_count(), 4);
        assert_eq!(sub.triple_count(), 4);
    }

    #[test]
    fn neighborhood_depth_zero_is_single_node() {
        let g = tiny_graph();
        let sub = g.neighborhood("dustman", 0).unwrap();
        assert_eq!(sub.entity_count(), 1);
        assert_eq!(sub.triple_count(), 0);
    }

    #[test]
    fn neighborhood_unknown_entity_errors() {
        let g = tiny_graph();
        assert!(matches!(
            g.neighborhood("ghost", 1),
            Err(GraphError::UnknownEntity(_))
        ));
    }

    #[test]
    fn self_loops_are_rejected() {
        let mut kg = KnowledgeGraph::new(schema(), Namespace::default());
        let d = kg.add_entity("Malware", "DUSTMAN").unwrap();
        let err = kg
            .add_triple(
                &d,
                "similarTo",
                &d,
                Provenance::Inferred {
                    rule_name: "x".into(),
                    premises: vec![],
                },
            )
            .unwrap_err();
        assert!(matches!(err, GraphError::BuildViolations(_)));
    }

    #[test]
    fn indexes_stay_consistent() {
        let g = tiny_graph();
        assert!(g.indexes_consistent());
        let sub = g.neighborhood("dustman", 1).unwrap();
        assert!(sub.indexes_consistent());
    }

    #[test]
    fn triples_matching_uses_all_access_paths() {
        let g = tiny_graph();
        assert_eq!(g.triples_matching(Some("dustman"), None, None, true).len(), 3);
        assert_eq!(g.triples_matching(None, Some("involves"), None, true).len(), 3);
        assert_eq!(
            g.triples_matching(None, None, Some("turla-driver-loader-tdl"), true)
                .len(),
            2
        );
        assert_eq!(g.triples_matching(None, None, None, true).len(), 4);
        assert_eq!(
            g.triples_matching(Some("dustman"), Some("involves"), Some("dustman.exe"), true)
                .len(),
            1
        );
    }

    #[test]
    fn resolve_label_hits_aliases_and_ids() {
        let mut kg = KnowledgeGraph::new(schema(), Namespace::default());
        kg.add_entity("Software", "Turla Driver Loader (TDL)").unwrap();
        let aliases = alias_aurora();
        kg.add_entity("Malware", "Operation Aurora").unwrap();
        assert_eq!(
            kg.resolve_label("Turla Driver Loader (TDL)", &aliases),
            Some("turla-driver-loader-tdl".to_string())
        );
        assert_eq!(
            kg.resolve_label("turla-driver-loader-tdl", &aliases),
            Some("turla-driver-loader-tdl".to_string())
        );
        assert_eq!(
            kg.resolve_label("Aurora", &aliases),
            Some("operation-aurora".to_string())
        );
        assert_eq!(kg.resolve_label("Nonexistent", &aliases), None);
    }
}
