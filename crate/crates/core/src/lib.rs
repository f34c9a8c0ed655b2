//! Turns annotated threat reports into an ontology-conformant,
//! provenance-carrying knowledge graph, with rule-based inference,
//! pattern-based indicator extraction, and a basic-graph-pattern query
//! engine.
//!
//! Pipeline: load documents ([`ingest`]) → parse standoff annotations
//! ([`brat`]) and optionally auto-extract indicators ([`ioc`]) → validate
//! against the ontology ([`schema`]) → build the graph ([`graph`]) →
//! infer ([`infer`]), query ([`query`]), export ([`rdf`]) and summarize
//! ([`stats`]).

pub mod brat;
pub mod graph;
pub mod infer;
pub mod ingest;
pub mod ioc;
pub mod query;
pub mod rdf;
pub mod schema;
pub mod stats;
pub mod text;

pub use brat::{parse_standoff, validate_annotations, AnnotationSet, EntitySpan, RelationAnn};
pub use graph::{
    build_graph, canonicalize_label, merge_graphs, AliasTable, Entity, KnowledgeGraph, Namespace,
    Provenance, Triple, TripleKey,
};
pub use infer::{apply_rules_fixpoint, default_rules, explain, parse_rules, Rule};
pub use ingest::{load_corpus, load_document, split_sentences, Document, Sentence};
pub use ioc::{extract_iocs, to_entity_spans, IocMatch, IocPattern, PatternSet};
pub use query::{evaluate, parse_query, BindingSet, Query, QueryPattern};
pub use rdf::{parse_ntriples, serialize_ntriples, serialize_turtle};
pub use schema::{default_schema, load_schema, OntologySchema};
pub use stats::{class_distribution, coverage_cutoff, graph_summary};
