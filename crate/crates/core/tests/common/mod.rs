//! Shared helpers for the integration and acceptance suites.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tinker_core::brat::{parse_standoff, AnnotationSet};
use tinker_core::graph::{
    build_graph, AliasTable, AnnotationSource, KnowledgeGraph, Namespace, Provenance, TripleKey,
};
use tinker_core::ingest::{corpus_files, load_corpus, Document};
use tinker_core::schema::{default_schema, OntologySchema};
use tinker_core::text::slug;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Documents plus strictly parsed annotation sets from a fixture corpus
/// directory.
pub fn load_fixture_corpus(dir: &Path) -> (Vec<Document>, Vec<AnnotationSet>) {
    let docs = load_corpus(dir).expect("corpus loads");
    let mut ann_paths = std::collections::BTreeMap::new();
    for path in corpus_files(dir).expect("dir listing") {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap();
        ann_paths.insert(slug(stem), path.with_extension("ann"));
    }
    let sets = docs
        .iter()
        .map(|doc| {
            let ann = std::fs::read_to_string(&ann_paths[&doc.doc_id]).expect("ann file");
            parse_standoff(&ann, doc).expect("fixture annotations parse cleanly")
        })
        .collect();
    (docs, sets)
}

/// Builds the graph of a fixture corpus, optionally with its alias table.
pub fn build_fixture_graph(dir: &Path) -> KnowledgeGraph {
    let (docs, sets) = load_fixture_corpus(dir);
    let aliases_path = dir.join("aliases.tsv");
    let aliases = if aliases_path.is_file() {
        AliasTable::parse(&std::fs::read_to_string(aliases_path).unwrap()).unwrap()
    } else {
        AliasTable::empty()
    };
    build_graph(
        &docs,
        &sets,
        Arc::new(default_schema()),
        &aliases,
        Namespace::default(),
    )
    .expect("fixture builds")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Schema-valid random graph with roughly `target_triples` triples.
/// Entity labels equal their ids and every triple carries at least one
/// provenance entry, so graphs survive the N-Triples + sidecar round trip
/// bit-for-bit.
pub fn random_graph(rng: &mut ChaCha8Rng, target_triples: usize) -> KnowledgeGraph {
    let schema = Arc::new(default_schema());
    random_graph_with(rng, target_triples, schema)
}

pub fn random_graph_with(
    rng: &mut ChaCha8Rng,
    target_triples: usize,
    schema: Arc<OntologySchema>,
) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new(schema.clone(), Namespace::default());
    let classes: Vec<String> = schema.classes.keys().cloned().collect();
    let properties: Vec<String> = schema.properties.keys().cloned().collect();
    let n_entities = (target_triples / 2).clamp(2, 400) + rng.gen_range(0..3);
    // class → entity ids. The class of `e{i}` is a function of i alone, so
    // independently generated graphs stay merge-compatible.
    let mut by_class: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for i in 0..n_entities {
        let class = classes[(i * 7 + 3) % classes.len()].clone();
        let label = format!("e{}", i);
        let id = kg.add_entity(&class, &label).unwrap();
        by_class.entry(class).or_default().push(id);
    }
    let mut added: Vec<TripleKey> = Vec::new();
    let mut attempts = 0;
    while added.len() < target_triples && attempts < target_triples * 20 {
        attempts += 1;
        let prop_name = &properties[rng.gen_range(0..properties.len())];
        let prop = &schema.properties[prop_name];
        let head_pool: Vec<&String> = prop
            .domain
            .iter()
            .filter_map(|c| by_class.get(c))
            .flatten()
            .collect();
        let tail_pool: Vec<&String> = prop
            .range
            .iter()
            .filter_map(|c| by_class.get(c))
            .flatten()
            .collect();
        if head_pool.is_empty() || tail_pool.is_empty() {
            continue;
        }
        let head = head_pool[rng.gen_range(0..head_pool.len())].clone();
        let tail = tail_pool[rng.gen_range(0..tail_pool.len())].clone();
        if head == tail {
            continue;
        }
        let key = (head.clone(), prop_name.clone(), tail.clone());
        match rng.gen_range(0..4) {
            // Mostly document-asserted triples, occasionally with an extra
            // provenance entry or an inferred-only triple.
            0..=2 => {
                let prov = random_doc_provenance(rng);
                if kg.add_triple(&head, prop_name, &tail, prov).is_ok() {
                    if rng.gen_bool(0.2) {
                        let extra = random_doc_provenance(rng);
                        let _ = kg.add_triple(&head, prop_name, &tail, extra);
                    }
                    added.push(key);
                }
            }
            _ => {
                let premises = if added.is_empty() {
                    vec![]
                } else {
                    vec![added[rng.gen_range(0..added.len())].clone()]
                };
                if kg
                    .add_inferred(&head, prop_name, &tail, "test-rule", premises)
                    .is_ok()
                {
                    added.push(key);
                }
            }
        }
    }
    kg
}

pub fn random_doc_provenance(rng: &mut ChaCha8Rng) -> Provenance {
    let s = rng.gen_range(0..5usize);
    let h = rng.gen_range(0..40usize);
    let t = rng.gen_range(0..40usize);
    Provenance::Document {
        doc_id: format!("doc-{}", rng.gen_range(0..6)),
        sentence_index: s,
        head_span: (h, h + 1 + rng.gen_range(0..9)),
        tail_span: (t, t + 1 + rng.gen_range(0..9)),
        source: if rng.gen_bool(0.85) {
            AnnotationSource::Manual
        } else {
            AnnotationSource::AutoIoc
        },
    }
}
