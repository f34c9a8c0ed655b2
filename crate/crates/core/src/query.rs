//! Basic-graph-pattern queries (a small SPARQL subset) and canned
//! competency-question templates.
//!
//! Evaluation joins patterns greedily, most-constrained first; the naive
//! nested-loop evaluator is retained as the test oracle. Constant labels
//! resolve through the same canonicalization path as ingest, so a query
//! for "Aurora" hits an entity built as "Operation Aurora".

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::graph::{AliasTable, KnowledgeGraph, Triple};
use crate::infer::tokenize_quoted;

static VAR_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\?[a-z][a-z0-9_]*$").unwrap());
static NAME_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z][A-Za-z0-9_]*$").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("query syntax error: {0}")]
    Syntax(String),
    #[error("unknown property {0}")]
    UnknownProperty(String),
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("no expected properties defined for class {0}")]
    NoExpectationDefined(String),
}

/// Entity position: a variable or a constant label/entity id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Var(String),
    Label(String),
}

/// Relation position: a variable or a property name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationTerm {
    Var(String),
    Prop(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryPattern {
    Triple {
        head: Term,
        relation: RelationTerm,
        tail: Term,
    },
    /// `?v a <Class>`
    Class { term: Term, class_name: String },
}

impl QueryPattern {
    fn vars(&self) -> Vec<&str> {
        let mut out = Vec::new();
        match self {
            QueryPattern::Triple {
                head,
                relation,
                tail,
            } => {
                if let Term::Var(v) = head {
                    out.push(v.as_str());
                }
                if let RelationTerm::Var(v) = relation {
                    out.push(v.as_str());
                }
                if let Term::Var(v) = tail {
                    out.push(v.as_str());
                }
            }
            QueryPattern::Class { term, .. } => {
                if let Term::Var(v) = term {
                    out.push(v.as_str());
                }
            }
        }
        out
    }
}

/// A parsed query: selected variables plus the pattern block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub selected: Vec<String>,
    pub patterns: Vec<QueryPattern>,
}

/// One solution: every query variable bound to an entity id (or property
/// name for relation variables).
pub type BindingSet = BTreeMap<String, String>;

/// Parses the query mini-language:
/// `select ?v1 ?v2 where { <pattern> . <pattern> }` or a bare
/// `<pattern> . <pattern>` list (select defaults to all variables).
pub fn parse_query(text: &str) -> Result<Query, QueryError> {
    let trimmed = text.trim();
    let (selected_text, block) = if let Some(rest) = trimmed.strip_prefix("select") {
        let (vars_part, where_part) = rest
            .split_once("where")
            .ok_or_else(|| QueryError::Syntax("missing `where`".to_string()))?;
        let block = where_part.trim();
        let block = block
            .strip_prefix('{')
            .and_then(|b| b.strip_suffix('}'))
            .ok_or_else(|| QueryError::Syntax("expected `{ ... }` after where".to_string()))?;
        (Some(vars_part.trim()), block)
    } else {
        (None, trimmed)
    };

    let mut patterns = Vec::new();
    for chunk in split_top_level(block, '.') {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        patterns.push(parse_pattern(chunk)?);
    }
    if patterns.is_empty() {
        return Err(QueryError::Syntax("empty pattern block".to_string()));
    }

    let mut all_vars: Vec<String> = Vec::new();
    for p in &patterns {
        for v in p.vars() {
            if !all_vars.iter().any(|x| x == v) {
                all_vars.push(v.to_string());
            }
        }
    }
    let selected = match selected_text {
        None | Some("") => all_vars.clone(),
        Some(vars_part) => {
            let mut out = Vec::new();
            for token in vars_part.split_whitespace() {
                if !VAR_RE.is_match(token) {
                    return Err(QueryError::Syntax(format!("bad select variable {:?}", token)));
                }
                let name = token[1..].to_string();
                if !all_vars.contains(&name) {
                    return Err(QueryError::Syntax(format!(
                        "selected variable ?{} does not occur in the patterns",
                        name
                    )));
                }
                out.push(name);
            }
            if out.is_empty() {
                return Err(QueryError::Syntax("select lists no variables".to_string()));
            }
            out
        }
    };
    Ok(Query { selected, patterns })
}

/// Splits on `sep` outside double quotes.
fn split_top_level(text: &str, sep: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    for ch in text.chars() {
        if ch == '"' {
            in_quotes = !in_quotes;
        }
        if ch == sep && !in_quotes {
            out.push(std::mem::take(&mut current));
        } else {
            current.push(ch);
        }
    }
    out.push(current);
    out
}

fn parse_term(token: &str) -> Result<Term, QueryError> {
    if let Some(label) = token.strip_prefix('"').and_then(|s| s.strip_suffix('"')) {
        if label.is_empty() {
            return Err(QueryError::Syntax("empty label constant".to_string()));
        }
        Ok(Term::Label(label.to_string()))
    } else if VAR_RE.is_match(token) {
        Ok(Term::Var(token[1..].to_string()))
    } else {
        Err(QueryError::Syntax(format!(
            "term {:?} must be a ?variable or a \"quoted label\"",
            token
        )))
    }
}

fn parse_pattern(text: &str) -> Result<QueryPattern, QueryError> {
    let tokens = tokenize_quoted(text).map_err(QueryError::Syntax)?;
    if tokens.len() != 3 {
        return Err(QueryError::Syntax(format!(
            "pattern {:?} must have three terms",
            text
        )));
    }
    if tokens[1] == "a" {
        if !NAME_RE.is_match(&tokens[2]) {
            return Err(QueryError::Syntax(format!(
                "class name {:?} must be a bare identifier",
                tokens[2]
            )));
        }
        return Ok(QueryPattern::Class {
            term: parse_term(&tokens[0])?,
            class_name: tokens[2].clone(),
        });
    }
    let relation = if VAR_RE.is_match(&tokens[1]) {
        RelationTerm::Var(tokens[1][1..].to_string())
    } else if NAME_RE.is_match(&tokens[1]) {
        RelationTerm::Prop(tokens[1].clone())
    } else {
        return Err(QueryError::Syntax(format!(
            "relation {:?} must be a property name or ?variable",
            tokens[1]
        )));
    };
    Ok(QueryPattern::Triple {
        head: parse_term(&tokens[0])?,
        relation,
        tail: parse_term(&tokens[2])?,
    })
}

/// Pattern with label constants pre-resolved to entity ids. A None id
/// means the constant resolves to nothing: the pattern can never match.
#[derive(Debug, Clone)]
enum BoundTerm {
    Var(String),
    Entity(Option<String>),
}

fn bind_term(term: &Term, kg: &KnowledgeGraph, aliases: &AliasTable) -> BoundTerm {
    match term {
        Term::Var(v) => BoundTerm::Var(v.clone()),
        Term::Label(label) => BoundTerm::Entity(kg.resolve_label(label, aliases)),
    }
}

fn check_names(kg: &KnowledgeGraph, patterns: &[QueryPattern]) -> Result<(), QueryError> {
    for p in patterns {
        match p {
            QueryPattern::Triple {
                relation: RelationTerm::Prop(name),
                ..
            } => {
                if !kg.schema.properties.contains_key(name) {
                    return Err(QueryError::UnknownProperty(name.clone()));
                }
            }
            QueryPattern::Class { class_name, .. } => {
                if !kg.schema.classes.contains_key(class_name) {
                    return Err(QueryError::UnknownClass(class_name.clone()));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Evaluates patterns by greedy join: the pattern with the fewest unbound
/// positions goes first. Returns every satisfying assignment, sorted.
pub fn evaluate(
    kg: &KnowledgeGraph,
    patterns: &[QueryPattern],
    aliases: &AliasTable,
    include_inferred: bool,
) -> Result<Vec<BindingSet>, QueryError> {
    check_names(kg, patterns)?;
    let mut remaining: Vec<&QueryPattern> = patterns.iter().collect();
    let mut results: BTreeSet<BindingSet> = BTreeSet::new();
    let mut partials: Vec<BindingSet> = vec![BindingSet::new()];
    let mut bound_vars: BTreeSet<String> = BTreeSet::new();

    while !remaining.is_empty() {
        // Most-constrained pattern first: fewest positions still free given
        // the variables bound so far.
        let (idx, _) = remaining
            .iter()
            .enumerate()
            .min_by_key(|(i, p)| {
                let free = p
                    .vars()
                    .iter()
                    .filter(|v| !bound_vars.contains(**v))
                    .count();
                (free, *i)
            })
            .unwrap();
        let pattern = remaining.remove(idx);
        let mut next: Vec<BindingSet> = Vec::new();
        for partial in &partials {
            extend(kg, pattern, partial, aliases, include_inferred, &mut next);
        }
        for v in pattern.vars() {
            bound_vars.insert(v.to_string());
        }
        partials = next;
        if partials.is_empty() {
            break;
        }
    }
    if remaining.is_empty() {
        results.extend(partials);
    }
    Ok(results.into_iter().collect())
}

fn extend(
    kg: &KnowledgeGraph,
    pattern: &QueryPattern,
    partial: &BindingSet,
    aliases: &AliasTable,
    include_inferred: bool,
    out: &mut Vec<BindingSet>,
) {
    match pattern {
        QueryPattern::Class { term, class_name } => match bind_term(term, kg, aliases) {
            BoundTerm::Entity(None) => {}
            BoundTerm::Entity(Some(id)) => {
                if kg.entity(&id).is_some_and(|e| e.class_name == *class_name) {
                    out.push(partial.clone());
                }
            }
            BoundTerm::Var(v) => match partial.get(&v) {
                Some(id) => {
                    if kg.entity(id).is_some_and(|e| e.class_name == *class_name) {
                        out.push(partial.clone());
                    }
                }
                None => {
                    for e in kg.entities().filter(|e| e.class_name == *class_name) {
                        let mut next = partial.clone();
                        next.insert(v.clone(), e.entity_id.clone());
                        out.push(next);
                    }
                }
            },
        },
        QueryPattern::Triple {
            head,
            relation,
            tail,
        } => {
            let head = bind_term(head, kg, aliases);
            let tail = bind_term(tail, kg, aliases);
            let fixed = |term: &BoundTerm, partial: &BindingSet| -> Option<Option<String>> {
                // Outer None: unresolvable constant. Inner: bound value.
                match term {
                    BoundTerm::Entity(None) => None,
                    BoundTerm::Entity(Some(id)) => Some(Some(id.clone())),
                    BoundTerm::Var(v) => Some(partial.get(v).cloned()),
                }
            };
            let (Some(head_fixed), Some(tail_fixed)) =
                (fixed(&head, partial), fixed(&tail, partial))
            else {
                return;
            };
            let rel_fixed: Option<String> = match relation {
                RelationTerm::Prop(name) => Some(name.clone()),
                RelationTerm::Var(v) => partial.get(v).cloned(),
            };
            for t in kg.triples_matching(
                head_fixed.as_deref(),
                rel_fixed.as_deref(),
                tail_fixed.as_deref(),
                include_inferred,
            ) {
                let mut next = partial.clone();
                if bind_triple(&head, relation, &tail, t, &mut next) {
                    out.push(next);
                }
            }
        }
    }
}

fn bind_triple(
    head: &BoundTerm,
    relation: &RelationTerm,
    tail: &BoundTerm,
    t: &Triple,
    bindings: &mut BindingSet,
) -> bool {
    let mut ok = true;
    let mut bind = |term: &BoundTerm, value: &str| match term {
        BoundTerm::Entity(Some(id)) => ok &= id == value,
        BoundTerm::Entity(None) => ok = false,
        BoundTerm::Var(v) => match bindings.get(v) {
            Some(bound) => ok &= bound == value,
            None => {
                bindings.insert(v.clone(), value.to_string());
            }
        },
    };
    bind(head, &t.head);
    bind(tail, &t.tail);
    match relation {
        RelationTerm::Prop(name) => ok &= name == &t.relation,
        RelationTerm::Var(v) => match bindings.get(v) {
            Some(bound) => ok &= bound == &t.relation,
            None => {
                bindings.insert(v.clone(), t.relation.clone());
            }
        },
    }
    ok
}

/// Exhaustive nested-loop evaluation in the given pattern order: the test
/// oracle the greedy evaluator is checked against.
pub fn evaluate_naive(
    kg: &KnowledgeGraph,
    patterns: &[QueryPattern],
    aliases: &AliasTable,
    include_inferred: bool,
) -> Result<Vec<BindingSet>, QueryError> {
    check_names(kg, patterns)?;
    let mut results: BTreeSet<BindingSet> = BTreeSet::new();
    let mut stack: Vec<BindingSet> = vec![BindingSet::new()];
    for pattern in patterns {
        let mut next = Vec::new();
        for partial in &stack {
            match pattern {
                QueryPattern::Class { .. } => {
                    extend(kg, pattern, partial, aliases, include_inferred, &mut next)
                }
                QueryPattern::Triple {
                    head,
                    relation,
                    tail,
                } => {
                    // Enumerate every triple, with no index shortcuts.
                    let head = bind_term(head, kg, aliases);
                    let tail = bind_term(tail, kg, aliases);
                    for t in kg.triples() {
                        if !include_inferred && !t.asserted {
                            continue;
                        }
                        let mut candidate = partial.clone();
                        if bind_triple(&head, relation, &tail, t, &mut candidate) {
                            next.push(candidate);
                        }
                    }
                }
            }
        }
        stack = next;
    }
    results.extend(stack);
    Ok(results.into_iter().collect())
}

/// CQ1: expected properties of the entity's class minus the properties the
/// entity already heads.
pub fn cq_missing_info(
    kg: &KnowledgeGraph,
    entity_id: &str,
    include_inferred: bool,
) -> Result<BTreeSet<String>, QueryError> {
    let entity = kg
        .entity(entity_id)
        .ok_or_else(|| QueryError::UnknownEntity(entity_id.to_string()))?;
    let expected = kg
        .schema
        .expected_properties
        .get(&entity.class_name)
        .ok_or_else(|| QueryError::NoExpectationDefined(entity.class_name.clone()))?;
    let present: BTreeSet<String> = kg
        .triples_matching(Some(entity_id), None, None, include_inferred)
        .iter()
        .map(|t| t.relation.clone())
        .collect();
    Ok(expected.difference(&present).cloned().collect())
}

/// One CQ2 result row: two same-class entities and the outgoing
/// (relation, neighbor) pairs they share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedFeatures {
    pub entity_a: String,
    pub entity_b: String,
    pub shared: BTreeSet<(String, String)>,
}

/// CQ2: all unordered same-class entity pairs sharing at least `k`
/// outgoing (relation, neighbor) pairs, largest overlap first.
pub fn cq_shared_features(
    kg: &KnowledgeGraph,
    k: usize,
    include_inferred: bool,
) -> Vec<SharedFeatures> {
    let mut outgoing: BTreeMap<&str, BTreeSet<(String, String)>> = BTreeMap::new();
    for e in kg.entities() {
        let set = kg
            .triples_matching(Some(&e.entity_id), None, None, include_inferred)
            .iter()
            .map(|t| (t.relation.clone(), t.tail.clone()))
            .collect();
        outgoing.insert(&e.entity_id, set);
    }
    let entities: Vec<_> = kg.entities().collect();
    let mut results = Vec::new();
    for (i, a) in entities.iter().enumerate() {
        for b in entities.iter().skip(i + 1) {
            if a.class_name != b.class_name {
                continue;
            }
            let shared: BTreeSet<(String, String)> = outgoing[a.entity_id.as_str()]
                .intersection(&outgoing[b.entity_id.as_str()])
                .cloned()
                .collect();
            if shared.len() >= k {
                results.push(SharedFeatures {
                    entity_a: a.entity_id.clone(),
                    entity_b: b.entity_id.clone(),
                    shared,
                });
            }
        }
    }
    results.sort_by(|x, y| {
        y.shared
            .len()
            .cmp(&x.shared.len())
            .then_with(|| x.entity_a.cmp(&y.entity_a))
            .then_with(|| x.entity_b.cmp(&y.entity_b))
    });
    results
}

/// Relations CQ3 follows outward from the malware.
pub const IMPACT_RELATIONS: [&str; 4] = ["targets", "impacts", "exploits", "hasVulnerability"];

/// CQ3: the impact subgraph — restricted-relation edges out of the
/// malware, plus the depth-2 Organization/Location attachments of those
/// neighbors along the same relation set.
pub fn cq_impact(
    kg: &KnowledgeGraph,
    malware_id: &str,
    include_inferred: bool,
) -> Result<KnowledgeGraph, QueryError> {
    if kg.entity(malware_id).is_none() {
        return Err(QueryError::UnknownEntity(malware_id.to_string()));
    }
    let mut keep: BTreeSet<String> = BTreeSet::new();
    let mut edges: Vec<Triple> = Vec::new();
    keep.insert(malware_id.to_string());
    let mut first_hop: BTreeSet<String> = BTreeSet::new();
    for relation in IMPACT_RELATIONS {
        for t in kg.triples_matching(Some(malware_id), Some(relation), None, include_inferred) {
            first_hop.insert(t.tail.clone());
            keep.insert(t.tail.clone());
            edges.push(t.clone());
        }
    }
    for node in &first_hop {
        for relation in IMPACT_RELATIONS {
            for t in kg.triples_matching(Some(node), Some(relation), None, include_inferred) {
                let class = &kg.entity(&t.tail).unwrap().class_name;
                if class == "Organization" || class == "Location" {
                    keep.insert(t.tail.clone());
                    edges.push(t.clone());
                }
            }
        }
    }
    let mut sub = KnowledgeGraph::new(kg.schema.clone(), kg.namespace.clone());
    for id in &keep {
        sub.copy_entity_from(kg, id);
    }
    for t in edges {
        sub.merge_triple(&t);
    }
    Ok(sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AnnotationSource, Namespace, Provenance};
    use crate::infer::{apply_rules_fixpoint, default_rules};
    use crate::schema::{default_schema, load_schema};
    use std::sync::Arc;

    fn prov() -> Provenance {
        Provenance::Document {
            doc_id: "dustman-2020".to_string(),
            sentence_index: 0,
            head_span: (0, 7),
            tail_span: (46, 56),
            source: AnnotationSource::Manual,
        }
    }

    fn table_graph() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new(Arc::new(default_schema()), Namespace::default());
        let d = kg.add_entity("Malware", "DUSTMAN").unwrap();
        let z = kg.add_entity("Malware", "ZeroCleare").unwrap();
        let t = kg.add_entity("Software", "Turla Driver Loader (TDL)").unwrap();
        let x = kg.add_entity("Indicator", "dustman.exe").unwrap();
        kg.add_triple(&d, "similarTo", &z, prov()).unwrap();
        kg.add_triple(&d, "involves", &t, prov()).unwrap();
        kg.add_triple(&z, "involves", &t, prov()).unwrap();
        kg.add_triple(&d, "involves", &x, prov()).unwrap();
        kg
    }

    fn run(kg: &KnowledgeGraph, text: &str, include_inferred: bool) -> Vec<BindingSet> {
        let q = parse_query(text).unwrap();
        evaluate(kg, &q.patterns, &AliasTable::empty(), include_inferred).unwrap()
    }

    #[test]
    fn parse_single_pattern_select() {
        let q = parse_query("select ?m where { ?m involves \"Turla Driver Loader (TDL)\" }")
            .unwrap();
        assert_eq!(q.selected, vec!["m"]);
        assert_eq!(q.patterns.len(), 1);
    }

    #[test]
    fn empty_pattern_block_is_an_error() {
        assert!(matches!(
            parse_query("select ?x where { }"),
            Err(QueryError::Syntax(_))
        ));
    }

    #[test]
    fn bare_pattern_list_parses() {
        let q = parse_query("?m a Malware . ?m similarTo ?n").unwrap();
        assert_eq!(q.patterns.len(), 2);
        assert_eq!(q.selected, vec!["m", "n"]);
    }

    #[test]
    fn involves_query_finds_both_heads() {
        let kg = table_graph();
        let rows = run(
            &kg,
            "select ?m where { ?m involves \"Turla Driver Loader (TDL)\" }",
            true,
        );
        let ms: Vec<&str> = rows.iter().map(|b| b["m"].as_str()).collect();
        assert_eq!(ms, ["dustman", "zerocleare"]);
    }

    #[test]
    fn inference_toggle_changes_similar_to_orientations() {
        let kg = table_graph();
        let asserted = run(&kg, "?x similarTo ?y", false);
        assert_eq!(asserted.len(), 1);
        assert_eq!(asserted[0]["x"], "dustman");
        assert_eq!(asserted[0]["y"], "zerocleare");
        let rules = default_rules(&kg.schema);
        let inferred = apply_rules_fixpoint(&kg, &rules).unwrap().graph;
        let both = run(&inferred, "?x similarTo ?y", true);
        assert_eq!(both.len(), 2);
        let restricted = run(&inferred, "?x similarTo ?y", false);
        assert_eq!(restricted.len(), 1);
    }

    #[test]
    fn unbindable_constant_yields_empty() {
        let kg = table_graph();
        assert!(run(&kg, "?m involves \"Nonexistent\"", true).is_empty());
    }

    #[test]
    fn unknown_property_errors_at_bind_time() {
        let kg = table_graph();
        let q = parse_query("?m frobnicates ?n").unwrap();
        assert_eq!(
            evaluate(&kg, &q.patterns, &AliasTable::empty(), true).unwrap_err(),
            QueryError::UnknownProperty("frobnicates".to_string())
        );
        let q = parse_query("?m a Wizard").unwrap();
        assert_eq!(
            evaluate(&kg, &q.patterns, &AliasTable::empty(), true).unwrap_err(),
            QueryError::UnknownClass("Wizard".to_string())
        );
    }

    #[test]
    fn relation_variables_bind_property_names() {
        let kg = table_graph();
        let rows = run(&kg, "\"DUSTMAN\" ?r \"ZeroCleare\"", true);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["r"], "similarTo");
    }

    #[test]
    fn class_atoms_filter() {
        let kg = table_graph();
        let rows = run(&kg, "?m a Malware . ?m involves ?s . ?s a Software", true);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn greedy_matches_naive_on_fixture_queries() {
        let kg = table_graph();
        let aliases = AliasTable::empty();
        for text in [
            "?m involves \"Turla Driver Loader (TDL)\"",
            "?m a Malware . ?m similarTo ?n",
            "?a involves ?b . ?c involves ?b",
            "?x ?r ?y",
            "?m a Malware . ?m involves ?s . ?s a Indicator",
        ] {
            let q = parse_query(text).unwrap();
            let fast = evaluate(&kg, &q.patterns, &aliases, true).unwrap();
            let slow = evaluate_naive(&kg, &q.patterns, &aliases, true).unwrap();
            assert_eq!(fast, slow, "mismatch for {:?}", text);
        }
    }

    #[test]
    fn pattern_order_is_irrelevant() {
        let kg = table_graph();
        let aliases = AliasTable::empty();
        let q = parse_query("?m a Malware . ?m involves ?s . ?s a Software").unwrap();
        let base = evaluate(&kg, &q.patterns, &aliases, true).unwrap();
        let mut patterns = q.patterns.clone();
        patterns.reverse();
        assert_eq!(evaluate(&kg, &patterns, &aliases, true).unwrap(), base);
        patterns.swap(0, 1);
        assert_eq!(evaluate(&kg, &patterns, &aliases, true).unwrap(), base);
    }

    #[test]
    fn repeated_variable_requires_equality() {
        let kg = table_graph();
        // No entity relates to itself, so ?x similarTo ?x is empty.
        assert!(run(&kg, "?x similarTo ?x", true).is_empty());
    }

    fn expect_schema() -> Arc<crate::schema::OntologySchema> {
        let mut text = default_schema().serialize();
        text = text
            .lines()
            .filter(|l| !l.starts_with("expect "))
            .collect::<Vec<_>>()
            .join("\n");
        text.push_str("\nexpect Malware similarTo,involves,targets\n");
        Arc::new(load_schema(&text).unwrap())
    }

    fn table_graph_with_expectations() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new(expect_schema(), Namespace::default());
        let d = kg.add_entity("Malware", "DUSTMAN").unwrap();
        let z = kg.add_entity("Malware", "ZeroCleare").unwrap();
        let t = kg.add_entity("Software", "Turla Driver Loader (TDL)").unwrap();
        let x = kg.add_entity("Indicator", "dustman.exe").unwrap();
        kg.add_triple(&d, "similarTo", &z, prov()).unwrap();
        kg.add_triple(&d, "involves", &t, prov()).unwrap();
        kg.add_triple(&z, "involves", &t, prov()).unwrap();
        kg.add_triple(&d, "involves", &x, prov()).unwrap();
        kg
    }

    #[test]
    fn missing_info_for_dustman_is_targets() {
        let kg = table_graph_with_expectations();
        let missing = cq_missing_info(&kg, "dustman", false).unwrap();
        assert_eq!(missing, BTreeSet::from(["targets".to_string()]));
    }

    #[test]
    fn missing_info_for_zerocleare_counts_head_positions_only() {
        let kg = table_graph_with_expectations();
        // zerocleare is only the tail of the similarTo row, so asserted-only
        // mode reports similarTo missing too.
        let missing = cq_missing_info(&kg, "zerocleare", false).unwrap();
        assert_eq!(
            missing,
            BTreeSet::from(["similarTo".to_string(), "targets".to_string()])
        );
        // After symmetry it heads a similarTo triple.
        let rules = default_rules(&kg.schema);
        let inferred = apply_rules_fixpoint(&kg, &rules).unwrap().graph;
        let missing = cq_missing_info(&inferred, "zerocleare", true).unwrap();
        assert_eq!(missing, BTreeSet::from(["targets".to_string()]));
    }

    #[test]
    fn missing_info_errors() {
        let kg = table_graph_with_expectations();
        assert!(matches!(
            cq_missing_info(&kg, "ghost", false),
            Err(QueryError::UnknownEntity(_))
        ));
        // Software has no expect entry in this schema.
        assert!(matches!(
            cq_missing_info(&kg, "turla-driver-loader-tdl", false),
            Err(QueryError::NoExpectationDefined(_))
        ));
    }

    #[test]
    fn missing_info_never_reports_present_heads() {
        let kg = table_graph_with_expectations();
        let missing = cq_missing_info(&kg, "dustman", false).unwrap();
        let present: BTreeSet<String> = kg
            .triples_matching(Some("dustman"), None, None, false)
            .iter()
            .map(|t| t.relation.clone())
            .collect();
        assert!(missing.is_disjoint(&present));
    }

    #[test]
    fn shared_features_finds_tdl_overlap() {
        let kg = table_graph();
        let results = cq_shared_features(&kg, 1, false);
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].entity_a, "dustman");
        assert_eq!(results[0].entity_b, "zerocleare");
        assert_eq!(
            results[0].shared,
            BTreeSet::from([(
                "involves".to_string(),
                "turla-driver-loader-tdl".to_string()
            )])
        );
        assert!(cq_shared_features(&kg, 2, false).is_empty());
    }

    #[test]
    fn shared_features_on_single_entity_graph_is_empty() {
        let mut kg = KnowledgeGraph::new(Arc::new(default_schema()), Namespace::default());
        kg.add_entity("Malware", "Solo").unwrap();
        assert!(cq_shared_features(&kg, 1, false).is_empty());
    }

    #[test]
    fn impact_of_fixture_malware_is_just_the_node() {
        let kg = table_graph();
        let sub = cq_impact(&kg, "dustman", false).unwrap();
        assert_eq!(sub.entity_count(), 1);
        assert_eq!(sub.triple_count(), 0);
    }

    #[test]
    fn impact_includes_targets_edge_and_second_hop() {
        let mut kg = KnowledgeGraph::new(Arc::new(default_schema()), Namespace::default());
        let s = kg.add_entity("Malware", "Stuxnet").unwrap();
        let o = kg.add_entity("Organization", "Org X").unwrap();
        let f = kg.add_entity("Infrastructure", "Enrichment Plant").unwrap();
        let l = kg.add_entity("Location", "Natanz").unwrap();
        let v = kg.add_entity("Vulnerability", "CVE-2010-2568").unwrap();
        kg.add_triple(&s, "targets", &o, prov()).unwrap();
        kg.add_triple(&s, "targets", &f, prov()).unwrap();
        kg.add_triple(&s, "exploits", &v, prov()).unwrap();
        kg.add_triple(&f, "impacts", &l, prov()).unwrap();
        // Present but outside the restricted relation set.
        let duqu = kg.add_entity("Malware", "Duqu").unwrap();
        kg.add_triple(&s, "similarTo", &duqu, prov()).unwrap();
        let sub = cq_impact(&kg, "stuxnet", false).unwrap();
        assert_eq!(sub.entity_count(), 5); // stuxnet, org, plant, natanz, cve
        assert_eq!(sub.triple_count(), 4);
        assert!(sub.entity("duqu").is_none());
    }

    #[test]
    fn impact_unknown_entity_errors() {
        let kg = table_graph();
        assert!(matches!(
            cq_impact(&kg, "ghost", false),
            Err(QueryError::UnknownEntity(_))
        ));
    }

    #[test]
    fn inferred_monotonicity() {
        let kg = table_graph();
        let rules = default_rules(&kg.schema);
        let inferred = apply_rules_fixpoint(&kg, &rules).unwrap().graph;
        for text in ["?x similarTo ?y", "?x involves ?y", "?x ?r ?y"] {
            let q = parse_query(text).unwrap();
            let without =
                evaluate(&inferred, &q.patterns, &AliasTable::empty(), false).unwrap();
            let with = evaluate(&inferred, &q.patterns, &AliasTable::empty(), true).unwrap();
            for row in &without {
                assert!(with.contains(row));
            }
        }
    }

    #[test]
    fn alias_resolution_applies_to_query_constants() {
        let mut kg = KnowledgeGraph::new(Arc::new(default_schema()), Namespace::default());
        let a = kg.add_entity("Malware", "Operation Aurora").unwrap();
        let g = kg.add_entity("Organization", "Google").unwrap();
        kg.add_triple(&a, "targets", &g, prov()).unwrap();
        let aliases = AliasTable::parse("aurora\tOperation Aurora\tMalware\n").unwrap();
        let q = parse_query("\"Aurora\" targets ?o").unwrap();
        let rows = evaluate(&kg, &q.patterns, &aliases, false).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["o"], "google");
    }
}
