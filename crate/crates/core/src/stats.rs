//! Corpus and graph statistics, including the annotation-coverage cutoff.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::brat::AnnotationSet;
use crate::graph::{KnowledgeGraph, Provenance};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("threshold {0} is outside (0, 1]")]
    InvalidThreshold(f64),
}

/// Counts entity spans per class across annotation sets. Auto-extracted
/// IoC spans (`TA` ids) are counted separately so callers can report both.
pub fn class_distribution(sets: &[AnnotationSet]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for set in sets {
        for span in &set.entities {
            *out.entry(span.class_name.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Same tally restricted to hand annotations or to auto-IoC spans.
pub fn class_distribution_by_origin(
    sets: &[AnnotationSet],
    auto: bool,
) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for set in sets {
        for span in set.entities.iter().filter(|s| s.is_auto() == auto) {
            *out.entry(span.class_name.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Smallest set of classes whose counts sum to at least
/// `threshold × total`, chosen greedily by descending count with
/// alphabetical tie-break. The greedy choice is minimal for this covering
/// form: the top-k counts maximize the covered sum for every k.
pub fn coverage_cutoff(
    dist: &BTreeMap<String, usize>,
    threshold: f64,
) -> Result<BTreeSet<String>, StatsError> {
    if dist.is_empty() {
        return Err(StatsError::EmptyDistribution);
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(StatsError::InvalidThreshold(threshold));
    }
    let total: usize = dist.values().sum();
    let mut order: Vec<(&String, &usize)> = dist.iter().collect();
    order.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let mut covered = 0usize;
    let mut chosen = BTreeSet::new();
    for (class, count) in order {
        if covered as f64 >= threshold * total as f64 {
            break;
        }
        covered += count;
        chosen.insert(class.clone());
    }
    Ok(chosen)
}

/// Per-graph summary counts.
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct GraphSummary {
    #[serde(rename = "entitiesPerClass")]
    pub entities_per_class: BTreeMap<String, usize>,
    #[serde(rename = "triplesPerRelation")]
    pub triples_per_relation: BTreeMap<String, usize>,
    #[serde(rename = "assertedTriples")]
    pub asserted_triples: usize,
    #[serde(rename = "inferredTriples")]
    pub inferred_triples: usize,
    #[serde(rename = "entityCount")]
    pub entity_count: usize,
    #[serde(rename = "documentCount")]
    pub document_count: usize,
}

/// Entity count per class, triple count per relation, asserted vs
/// inferred, and the number of distinct documents in provenance.
pub fn graph_summary(kg: &KnowledgeGraph) -> GraphSummary {
    let mut entities_per_class = BTreeMap::new();
    for e in kg.entities() {
        *entities_per_class.entry(e.class_name.clone()).or_insert(0) += 1;
    }
    let mut triples_per_relation = BTreeMap::new();
    let mut asserted = 0;
    let mut inferred = 0;
    let mut docs = BTreeSet::new();
    for t in kg.triples() {
        *triples_per_relation.entry(t.relation.clone()).or_insert(0) += 1;
        if t.asserted {
            asserted += 1;
        } else {
            inferred += 1;
        }
        for p in &t.provenance {
            if let Provenance::Document { doc_id, .. } = p {
                docs.insert(doc_id.clone());
            }
        }
    }
    GraphSummary {
        entities_per_class,
        triples_per_relation,
        asserted_triples: asserted,
        inferred_triples: inferred,
        entity_count: kg.entity_count(),
        document_count: docs.len(),
    }
}

impl GraphSummary {
    /// Aligned-text rendering for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "entities: {}", self.entity_count).unwrap();
        for (class, count) in &self.entities_per_class {
            writeln!(out, "  {:<20} {:>6}", class, count).unwrap();
        }
        writeln!(
            out,
            "triples: {} asserted, {} inferred",
            self.asserted_triples, self.inferred_triples
        )
        .unwrap();
        for (relation, count) in &self.triples_per_relation {
            writeln!(out, "  {:<20} {:>6}", relation, count).unwrap();
        }
        writeln!(out, "documents: {}", self.document_count).unwrap();
        out
    }
}
