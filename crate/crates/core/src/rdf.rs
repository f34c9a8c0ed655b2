//! Graph serialization: N-Triples (canonical, parsed back), Turtle
//! (write-only), GraphML and DOT (visualization), plus the provenance
//! sidecar.
//!
//! Provenance lives in a `.prov.jsonl` sidecar rather than in reified RDF,
//! so the `.nt` export stays standard and diff-friendly. All writers sort
//! their output: two equal graphs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    AnnotationSource, KnowledgeGraph, Namespace, Provenance, TripleKey,
};
use crate::schema::OntologySchema;
use crate::text::percent_decode;

/// Predicate linking an entity to its class.
pub const RDF_TYPE: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type";

#[derive(Debug, Error)]
pub enum RdfError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: URI <{uri}> is outside the configured namespace")]
    ForeignNamespace { line: usize, uri: String },
    #[error("line {line}: unknown class {name}")]
    UnknownClass { line: usize, name: String },
    #[error("line {line}: unknown property {name}")]
    UnknownProperty { line: usize, name: String },
    #[error("line {line}: {message}")]
    DomainRangeViolation { line: usize, message: String },
    #[error("entity {0} appears in a triple but has no rdf:type line")]
    MissingType(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
}

/// One `<s> <p> <o> .` line per relation triple plus one `rdf:type` line
/// per entity, all lines sorted lexicographically.
pub fn serialize_ntriples(kg: &KnowledgeGraph) -> String {
    let ns = &kg.namespace;
    let mut lines: Vec<String> = Vec::new();
    for e in kg.entities() {
        lines.push(format!(
            "<{}> <{}> <{}> .",
            e.uri(ns),
            RDF_TYPE,
            ns.class_uri(&e.class_name)
        ));
    }
    for t in kg.triples() {
        lines.push(format!(
            "<{}> <{}> <{}> .",
            ns.entity_uri(&t.head),
            ns.prop_uri(&t.relation),
            ns.entity_uri(&t.tail)
        ));
    }
    lines.sort();
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

fn split_uri_line(line_no: usize, line: &str) -> Result<(String, String, String), RdfError> {
    let err = |message: &str| RdfError::Syntax {
        line: line_no,
        message: message.to_string(),
    };
    let mut rest = line.trim();
    let mut uris = Vec::with_capacity(3);
    for _ in 0..3 {
        rest = rest.trim_start();
        if !rest.starts_with('<') {
            return Err(err("expected `<uri>`"));
        }
        let close = rest.find('>').ok_or_else(|| err("unterminated `<uri>`"))?;
        let uri = &rest[1..close];
        if uri.is_empty() || uri.chars().any(|c| c.is_whitespace() || c == '<' || c == '"') {
            return Err(err("malformed URI"));
        }
        uris.push(uri.to_string());
        rest = &rest[close + 1..];
    }
    if rest.trim() != "." {
        return Err(err("line must end with ` .`"));
    }
    let mut it = uris.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

fn strip_ns<'u>(
    ns: &Namespace,
    uri: &'u str,
    path: &str,
    line: usize,
) -> Result<String, RdfError> {
    let local = uri
        .strip_prefix(ns.base())
        .and_then(|rest| rest.strip_prefix(path))
        .ok_or_else(|| RdfError::ForeignNamespace {
            line,
            uri: uri.to_string(),
        })?;
    percent_decode(local).ok_or(RdfError::Syntax {
        line,
        message: format!("bad percent-encoding in <{}>", uri),
    })
}

/// Parses the canonical N-Triples form back into a graph. Labels and
/// aliases collapse to the entity id; provenance loads from the sidecar
/// when present.
pub fn parse_ntriples(
    text: &str,
    schema: Arc<OntologySchema>,
    namespace: &Namespace,
) -> Result<KnowledgeGraph, RdfError> {
    let mut kg = KnowledgeGraph::new(schema.clone(), namespace.clone());
    let mut relations: Vec<(usize, String, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (s, p, o) = split_uri_line(line_no, line)?;
        let subject = strip_ns(namespace, &s, "entity/", line_no)?;
        if p == RDF_TYPE {
            let class = strip_ns(namespace, &o, "class/", line_no)?;
            if !schema.classes.contains_key(&class) {
                return Err(RdfError::UnknownClass {
                    line: line_no,
                    name: class,
                });
            }
            kg.add_entity_with_id(subject.clone(), &class, &subject)?;
        } else {
            let prop = strip_ns(namespace, &p, "prop/", line_no)?;
            if !schema.properties.contains_key(&prop) {
                return Err(RdfError::UnknownProperty {
                    line: line_no,
                    name: prop,
                });
            }
            let object = strip_ns(namespace, &o, "entity/", line_no)?;
            relations.push((line_no, subject, prop, object));
        }
    }
    for (line_no, s, p, o) in relations {
        for end in [&s, &o] {
            if kg.entity(end).is_none() {
                return Err(RdfError::MissingType(end.clone()));
            }
        }
        let head_class = kg.entity(&s).unwrap().class_name.clone();
        let tail_class = kg.entity(&o).unwrap().class_name.clone();
        let ok = kg
            .schema
            .check_domain_range(&p, &head_class, &tail_class)
            .unwrap_or(false);
        if !ok {
            return Err(RdfError::DomainRangeViolation {
                line: line_no,
                message: format!(
                    "{} between {} and {} violates domain/range",
                    p, head_class, tail_class
                ),
            });
        }
        kg.insert_bare(&s, &p, &o, true);
    }
    Ok(kg)
}

#[derive(Serialize, Deserialize)]
struct ProvRecord {
    head: String,
    relation: String,
    tail: String,
    #[serde(flatten)]
    body: ProvBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "source")]
enum ProvBody {
    #[serde(rename = "manual")]
    Manual(DocFields),
    #[serde(rename = "auto-ioc")]
    AutoIoc(DocFields),
    #[serde(rename = "inferred")]
    Inferred {
        rule: String,
        premises: Vec<[String; 3]>,
    },
}

#[derive(Serialize, Deserialize)]
struct DocFields {
    #[serde(rename = "docId")]
    doc_id: String,
    #[serde(rename = "sentenceIndex")]
    sentence_index: usize,
    #[serde(rename = "headSpan")]
    head_span: (usize, usize),
    #[serde(rename = "tailSpan")]
    tail_span: (usize, usize),
}

fn key_uris(ns: &Namespace, key: &TripleKey) -> (String, String, String) {
    (
        ns.entity_uri(&key.0),
        ns.prop_uri(&key.1),
        ns.entity_uri(&key.2),
    )
}

/// Renders the provenance sidecar: one JSON object per (triple, provenance)
/// pair, keyed by the triple's three URIs, in canonical order.
pub fn serialize_sidecar(kg: &KnowledgeGraph) -> String {
    let ns = &kg.namespace;
    let mut out = String::new();
    for t in kg.triples() {
        let (head, relation, tail) = key_uris(ns, &t.key());
        for p in t.provenance_sorted() {
            let body = match p {
                Provenance::Document {
                    doc_id,
                    sentence_index,
                    head_span,
                    tail_span,
                    source,
                } => {
                    let fields = DocFields {
                        doc_id: doc_id.clone(),
                        sentence_index: *sentence_index,
                        head_span: *head_span,
                        tail_span: *tail_span,
                    };
                    match source {
                        AnnotationSource::Manual => ProvBody::Manual(fields),
                        AnnotationSource::AutoIoc => ProvBody::AutoIoc(fields),
                    }
                }
                Provenance::Inferred { rule_name, premises } => ProvBody::Inferred {
                    rule: rule_name.clone(),
                    premises: premises
                        .iter()
                        .map(|k| {
                            let (h, r, t) = key_uris(ns, k);
                            [h, r, t]
                        })
                        .collect(),
                },
            };
            let record = ProvRecord {
                head: head.clone(),
                relation: relation.clone(),
                tail: tail.clone(),
                body,
            };
            out.push_str(&serde_json::to_string(&record).unwrap());
            out.push('\n');
        }
    }
    out
}

/// Attaches sidecar provenance to a parsed graph. A triple that receives
/// only inferred provenance is re-flagged as inferred.
pub fn apply_sidecar(kg: &mut KnowledgeGraph, text: &str) -> Result<(), RdfError> {
    let ns = kg.namespace.clone();
    let mut touched: BTreeMap<TripleKey, ()> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let record: ProvRecord = serde_json::from_str(line).map_err(|e| RdfError::Sidecar {
            line: line_no,
            message: e.to_string(),
        })?;
        let decode_key = |h: &str, r: &str, t: &str| -> Result<TripleKey, RdfError> {
            Ok((
                strip_ns(&ns, h, "entity/", line_no)?,
                strip_ns(&ns, r, "prop/", line_no)?,
                strip_ns(&ns, t, "entity/", line_no)?,
            ))
        };
        let key = decode_key(&record.head, &record.relation, &record.tail)?;
        let provenance = match record.body {
            ProvBody::Manual(f) => Provenance::Document {
                doc_id: f.doc_id,
                sentence_index: f.sentence_index,
                head_span: f.head_span,
                tail_span: f.tail_span,
                source: AnnotationSource::Manual,
            },
            ProvBody::AutoIoc(f) => Provenance::Document {
                doc_id: f.doc_id,
                sentence_index: f.sentence_index,
                head_span: f.head_span,
                tail_span: f.tail_span,
                source: AnnotationSource::AutoIoc,
            },
            ProvBody::Inferred { rule, premises } => {
                let mut keys = Vec::with_capacity(premises.len());
                for [h, r, t] in &premises {
                    keys.push(decode_key(h, r, t)?);
                }
                Provenance::Inferred {
                    rule_name: rule,
                    premises: keys,
                }
            }
        };
        let triple = kg.triple_mut(&key).ok_or_else(|| RdfError::Sidecar {
            line: line_no,
            message: format!("no triple {:?} in graph", key),
        })?;
        if !triple.provenance.contains(&provenance) {
            triple.provenance.push(provenance);
        }
        touched.insert(key, ());
    }
    for key in touched.keys() {
        let triple = kg.triple_mut(key).unwrap();
        triple.asserted = triple
            .provenance
            .iter()
            .any(|p| matches!(p, Provenance::Document { .. }));
    }
    Ok(())
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// GraphML export; nodes carry `label` and `class` attributes, edges carry
/// the relation name and an `inferred` flag.
pub fn export_graphml(kg: &KnowledgeGraph) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
    out.push_str("  <key id=\"label\" for=\"node\" attr.name=\"label\" attr.type=\"string\"/>\n");
    out.push_str("  <key id=\"class\" for=\"node\" attr.name=\"class\" attr.type=\"string\"/>\n");
    out.push_str(
        "  <key id=\"relation\" for=\"edge\" attr.name=\"relation\" attr.type=\"string\"/>\n",
    );
    out.push_str(
        "  <key id=\"inferred\" for=\"edge\" attr.name=\"inferred\" attr.type=\"boolean\"/>\n",
    );
    out.push_str("  <graph id=\"G\" edgedefault=\"directed\">\n");
    for e in kg.entities() {
        writeln!(
            out,
            "    <node id=\"{}\"><data key=\"label\">{}</data><data key=\"class\">{}</data></node>",
            xml_escape(&e.entity_id),
            xml_escape(&e.label),
            xml_escape(&e.class_name)
        )
        .unwrap();
    }
    for t in kg.triples() {
        writeln!(
            out,
            "    <edge source=\"{}\" target=\"{}\"><data key=\"relation\">{}</data><data key=\"inferred\">{}</data></edge>",
            xml_escape(&t.head),
            xml_escape(&t.tail),
            xml_escape(&t.relation),
            !t.asserted
        )
        .unwrap();
    }
    out.push_str("  </graph>\n</graphml>\n");
    out
}

fn dot_escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT export; edges are labeled with the relation name and inferred edges
/// are dashed.
pub fn export_dot(kg: &KnowledgeGraph) -> String {
    let mut out = String::from("digraph tinker {\n");
    for e in kg.entities() {
        writeln!(
            out,
            "  \"{}\" [label=\"{}\", class=\"{}\"];",
            dot_escape(&e.entity_id),
            dot_escape(&e.label),
            dot_escape(&e.class_name)
        )
        .unwrap();
    }
    for t in kg.triples() {
        let style = if t.asserted { "" } else { ", style=dashed" };
        writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"{}];",
            dot_escape(&t.head),
            dot_escape(&t.tail),
            dot_escape(&t.relation),
            style
        )
        .unwrap();
    }
    out.push_str("}\n");
    out
}

/// Valid as a Turtle prefixed local name under our conservative rules.
fn turtle_local_ok(name: &str) -> bool {
    !name.is_empty()
        && !name.ends_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Pretty-printed Turtle, grouped by subject. Write-only convenience; only
/// N-Triples is parsed back.
pub fn serialize_turtle(kg: &KnowledgeGraph) -> String {
    let ns = &kg.namespace;
    let mut out = String::new();
    writeln!(out, "@prefix rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#> .").unwrap();
    writeln!(out, "@prefix ent: <{}entity/> .", ns.base()).unwrap();
    writeln!(out, "@prefix prp: <{}prop/> .", ns.base()).unwrap();
    writeln!(out, "@prefix cls: <{}class/> .", ns.base()).unwrap();
    let ent = |id: &str| {
        if turtle_local_ok(id) {
            format!("ent:{}", id)
        } else {
            format!("<{}>", ns.entity_uri(id))
        }
    };
    // subject → (class, relation → sorted objects)
    let mut by_subject: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for t in kg.triples() {
        by_subject
            .entry(&t.head)
            .or_default()
            .entry(&t.relation)
            .or_default()
            .push(&t.tail);
    }
    for e in kg.entities() {
        out.push('\n');
        write!(out, "{} a cls:{}", ent(&e.entity_id), e.class_name).unwrap();
        if let Some(props) = by_subject.get(e.entity_id.as_str()) {
            for (relation, objects) in props {
                let mut objects = objects.clone();
                objects.sort_unstable();
                let rendered: Vec<String> = objects.iter().map(|o| ent(o)).collect();
                write!(out, " ;\n    prp:{} {}", relation, rendered.join(", ")).unwrap();
            }
        }
        out.push_str(" .\n");
    }
    out
}
