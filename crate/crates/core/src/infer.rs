//! Forward-chaining rule inference over the knowledge graph.
//!
//! Rules are applied to a least fixpoint with semi-naive evaluation (each
//! iteration joins only against the previous iteration's delta); the naive
//! evaluator is kept as the reference implementation and test oracle.
//! Inferred triples carry `asserted = false` and provenance naming the
//! rule and its premise triples, so downstream consumers can always filter
//! them out.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::graph::{AliasTable, KnowledgeGraph, Provenance, TripleKey};
use crate::schema::OntologySchema;

static VAR_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\?[a-z][a-z0-9_]*$").unwrap());

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid rule {name}: {message}")]
    InvalidRule { name: String, message: String },
    #[error("rules file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("enable/disable references unknown rule {0}")]
    UnknownRule(String),
    #[error("unknown triple {0:?}")]
    UnknownTriple(TripleKey),
}

/// Entity position of a rule pattern: a variable or a constant label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleTerm {
    Var(String),
    Label(String),
}

/// One triple pattern; the relation position is always a constant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RulePattern {
    pub head: RuleTerm,
    pub relation: String,
    pub tail: RuleTerm,
}

/// A Horn rule: body patterns joined on shared variables imply the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub name: String,
    pub body: Vec<RulePattern>,
    pub head: RulePattern,
    pub enabled: bool,
}

impl Rule {
    fn validate(&self) -> Result<(), InferError> {
        let err = |message: String| InferError::InvalidRule {
            name: self.name.clone(),
            message,
        };
        if self.body.is_empty() {
            return Err(err("rule body is empty".to_string()));
        }
        let mut body_vars = BTreeSet::new();
        for pat in &self.body {
            for term in [&pat.head, &pat.tail] {
                if let RuleTerm::Var(v) = term {
                    body_vars.insert(v.clone());
                }
            }
        }
        for term in [&self.head.head, &self.head.tail] {
            if let RuleTerm::Var(v) = term {
                if !body_vars.contains(v) {
                    return Err(err(format!("head variable ?{} not bound in body", v)));
                }
            }
        }
        Ok(())
    }

    fn check_relations(&self, schema: &OntologySchema) -> Result<(), InferError> {
        for pat in self.body.iter().chain(std::iter::once(&self.head)) {
            if !schema.properties.contains_key(&pat.relation) {
                return Err(InferError::InvalidRule {
                    name: self.name.clone(),
                    message: format!("relation {} not declared in schema", pat.relation),
                });
            }
        }
        Ok(())
    }
}

fn var(name: &str) -> RuleTerm {
    RuleTerm::Var(name.to_string())
}

fn pattern(head: RuleTerm, relation: &str, tail: RuleTerm) -> RulePattern {
    RulePattern {
        head,
        relation: relation.to_string(),
        tail,
    }
}

/// The shipped rule set, generated from the schema:
/// `sym-<p>` for every symmetric property, `inv-pairs-<p>` for every
/// inverse pair, `variant-similar`, and `co-involve` (disabled; it
/// over-generates, so users opt in).
pub fn default_rules(schema: &OntologySchema) -> Vec<Rule> {
    let mut rules = Vec::new();
    for prop in schema.properties.values() {
        if prop.symmetric {
            rules.push(Rule {
                name: format!("sym-{}", prop.name),
                body: vec![pattern(var("a"), &prop.name, var("b"))],
                head: pattern(var("b"), &prop.name, var("a")),
                enabled: true,
            });
        }
    }
    for prop in schema.properties.values() {
        if let Some(inv) = &prop.inverse_of {
            rules.push(Rule {
                name: format!("inv-pairs-{}", prop.name),
                body: vec![pattern(var("a"), &prop.name, var("b"))],
                head: pattern(var("b"), inv, var("a")),
                enabled: true,
            });
        }
    }
    let has = |name: &str| schema.properties.contains_key(name);
    if has("variantOf") && has("similarTo") {
        rules.push(Rule {
            name: "variant-similar".to_string(),
            body: vec![pattern(var("a"), "variantOf", var("b"))],
            head: pattern(var("a"), "similarTo", var("b")),
            enabled: true,
        });
    }
    if has("similarTo") && has("involves") {
        rules.push(Rule {
            name: "co-involve".to_string(),
            body: vec![
                pattern(var("a"), "similarTo", var("b")),
                pattern(var("b"), "involves", var("c")),
            ],
            head: pattern(var("a"), "involves", var("c")),
            enabled: false,
        });
    }
    rules
}

/// Parses a rules file over a base rule set (usually [`default_rules`]).
///
/// Lines: `rule <name>: (<pat>) & (<pat>) => (<pat>)` with patterns
/// `?v <prop> ?w` (constants as double-quoted labels), plus
/// `enable <name>` / `disable <name>` toggles, which also accept the
/// group name `inv-pairs`.
pub fn parse_rules(text: &str, base: Vec<Rule>) -> Result<Vec<Rule>, InferError> {
    let mut rules = base;
    let mut toggles: Vec<(usize, String, bool)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| InferError::Syntax {
            line: line_no,
            message,
        };
        if let Some(rest) = line.strip_prefix("enable ") {
            toggles.push((line_no, rest.trim().to_string(), true));
        } else if let Some(rest) = line.strip_prefix("disable ") {
            toggles.push((line_no, rest.trim().to_string(), false));
        } else if let Some(rest) = line.strip_prefix("rule ") {
            let (name, spec) = rest
                .split_once(':')
                .ok_or_else(|| err("missing `:` after rule name".to_string()))?;
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(err("empty rule name".to_string()));
            }
            if rules.iter().any(|r| r.name == name) {
                return Err(err(format!("duplicate rule name {}", name)));
            }
            let (body_part, head_part) = spec
                .split_once("=>")
                .ok_or_else(|| err("missing `=>`".to_string()))?;
            let mut body = Vec::new();
            for chunk in body_part.split('&') {
                body.push(parse_pattern(chunk.trim(), line_no)?);
            }
            let head = parse_pattern(head_part.trim(), line_no)?;
            let rule = Rule {
                name,
                body,
                head,
                enabled: true,
            };
            rule.validate()?;
            rules.push(rule);
        } else {
            return Err(err(format!("unrecognized directive {:?}", line)));
        }
    }
    for (line, name, enabled) in toggles {
        let mut hit = false;
        for rule in rules.iter_mut() {
            if rule.name == name || (name == "inv-pairs" && rule.name.starts_with("inv-pairs-")) {
                rule.enabled = enabled;
                hit = true;
            }
        }
        if !hit {
            return Err(InferError::Syntax {
                line,
                message: InferError::UnknownRule(name).to_string(),
            });
        }
    }
    Ok(rules)
}

fn parse_pattern(text: &str, line: usize) -> Result<RulePattern, InferError> {
    let err = |message: String| InferError::Syntax { line, message };
    let inner = text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| err(format!("pattern {:?} must be parenthesized", text)))?;
    let tokens = tokenize_quoted(inner).map_err(|m| err(m))?;
    if tokens.len() != 3 {
        return Err(err(format!("pattern {:?} must have three terms", text)));
    }
    let term = |tok: &str| -> Result<RuleTerm, InferError> {
        if let Some(label) = tok.strip_prefix('"').and_then(|s| s.strip_suffix('"')) {
            Ok(RuleTerm::Label(label.to_string()))
        } else if VAR_RE.is_match(tok) {
            Ok(RuleTerm::Var(tok[1..].to_string()))
        } else {
            Err(err(format!("bad term {:?}", tok)))
        }
    };
    if tokens[1].starts_with('?') || tokens[1].starts_with('"') {
        return Err(err("relation position must be a bare property name".to_string()));
    }
    Ok(RulePattern {
        head: term(&tokens[0])?,
        relation: tokens[1].clone(),
        tail: term(&tokens[2])?,
    })
}

/// Splits on whitespace, keeping double-quoted chunks intact.
pub(crate) fn tokenize_quoted(text: &str) -> Result<Vec<String>, String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_quotes = false;
    for ch in text.chars() {
        match ch {
            '"' => {
                in_quotes = !in_quotes;
                current.push(ch);
            }
            c if c.is_whitespace() && !in_quotes => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if in_quotes {
        return Err("unterminated quote".to_string());
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Ok(tokens)
}

/// Outcome of a fixpoint run.
#[derive(Debug)]
pub struct InferenceResult {
    pub graph: KnowledgeGraph,
    /// Rule firings dropped for violating the schema, plus unresolvable
    /// rule constants. Sorted and deduplicated.
    pub warnings: Vec<String>,
    /// Iterations until the fixpoint (final empty iteration included).
    pub iterations: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Engine {
    SemiNaive,
    Naive,
}

/// Applies enabled rules to the least fixpoint with semi-naive evaluation.
pub fn apply_rules_fixpoint(
    kg: &KnowledgeGraph,
    rules: &[Rule],
) -> Result<InferenceResult, InferError> {
    run(kg, rules, Engine::SemiNaive)
}

/// Reference evaluator: rejoins every rule against the full fact set each
/// iteration. Kept as the oracle the semi-naive engine is tested against.
pub fn apply_rules_naive(
    kg: &KnowledgeGraph,
    rules: &[Rule],
) -> Result<InferenceResult, InferError> {
    run(kg, rules, Engine::Naive)
}

/// Term with constants pre-resolved to entity ids.
#[derive(Clone)]
enum BoundTerm {
    Var(String),
    Entity(String),
}

struct BoundPattern {
    head: BoundTerm,
    relation: String,
    tail: BoundTerm,
}

struct BoundRule<'r> {
    name: &'r str,
    body: Vec<BoundPattern>,
    head: BoundPattern,
}

type Bindings = BTreeMap<String, String>;
type PairSet = BTreeSet<(String, String)>;

/// Facts grouped by relation for cheap constant-relation joins.
#[derive(Default, Clone)]
struct FactSet {
    by_relation: BTreeMap<String, PairSet>,
    len: usize,
}

impl FactSet {
    fn insert(&mut self, key: &TripleKey) -> bool {
        let added = self
            .by_relation
            .entry(key.1.clone())
            .or_default()
            .insert((key.0.clone(), key.2.clone()));
        if added {
            self.len += 1;
        }
        added
    }

    fn contains(&self, key: &TripleKey) -> bool {
        self.by_relation
            .get(&key.1)
            .is_some_and(|pairs| pairs.contains(&(key.0.clone(), key.2.clone())))
    }

    fn matches(&self, pat: &BoundPattern, bindings: &Bindings) -> Vec<(String, String)> {
        let Some(pairs) = self.by_relation.get(&pat.relation) else {
            return Vec::new();
        };
        let want = |term: &BoundTerm| -> Option<String> {
            match term {
                BoundTerm::Entity(id) => Some(id.clone()),
                BoundTerm::Var(v) => bindings.get(v).cloned(),
            }
        };
        let head_want = want(&pat.head);
        let tail_want = want(&pat.tail);
        pairs
            .iter()
            .filter(|(h, t)| {
                head_want.as_ref().is_none_or(|w| w == h)
                    && tail_want.as_ref().is_none_or(|w| w == t)
            })
            .cloned()
            .collect()
    }
}

fn bind_term(term: &RuleTerm, kg: &KnowledgeGraph, warnings: &mut BTreeSet<String>, rule: &str) -> Option<BoundTerm> {
    match term {
        RuleTerm::Var(v) => Some(BoundTerm::Var(v.clone())),
        RuleTerm::Label(label) => match kg.resolve_label(label, &AliasTable::empty()) {
            Some(id) => Some(BoundTerm::Entity(id)),
            None => {
                warnings.insert(format!(
                    "rule {}: constant {:?} does not resolve to an entity; rule skipped",
                    rule, label
                ));
                None
            }
        },
    }
}

fn run(kg: &KnowledgeGraph, rules: &[Rule], engine: Engine) -> Result<InferenceResult, InferError> {
    for rule in rules {
        rule.validate()?;
        rule.check_relations(&kg.schema)?;
    }
    let mut warnings: BTreeSet<String> = BTreeSet::new();
    let mut bound: Vec<BoundRule> = Vec::new();
    'rules: for rule in rules.iter().filter(|r| r.enabled) {
        let mut body = Vec::new();
        for pat in &rule.body {
            let (Some(head), Some(tail)) = (
                bind_term(&pat.head, kg, &mut warnings, &rule.name),
                bind_term(&pat.tail, kg, &mut warnings, &rule.name),
            ) else {
                continue 'rules;
            };
            body.push(BoundPattern {
                head,
                relation: pat.relation.clone(),
                tail,
            });
        }
        let (Some(head), Some(tail)) = (
            bind_term(&rule.head.head, kg, &mut warnings, &rule.name),
            bind_term(&rule.head.tail, kg, &mut warnings, &rule.name),
        ) else {
            continue 'rules;
        };
        bound.push(BoundRule {
            name: &rule.name,
            body,
            head: BoundPattern {
                head,
                relation: rule.head.relation.clone(),
                tail,
            },
        });
    }

    let mut out = kg.clone();
    let mut total = FactSet::default();
    for t in kg.triples() {
        total.insert(&t.key());
    }
    let mut old = FactSet::default();
    let mut delta = total.clone();

    // With E entities and P properties the closed universe has at most
    // P * E^2 triples, so the loop is bounded.
    let universe = kg.schema.properties.len() * kg.entity_count() * kg.entity_count();
    let mut iterations = 0;

    loop {
        iterations += 1;
        assert!(
            iterations <= universe + 2,
            "fixpoint failed to terminate within the triple universe bound"
        );
        // (rule, head triple, premises)
        let mut firings: Vec<(String, TripleKey, Vec<TripleKey>)> = Vec::new();
        for rule in &bound {
            match engine {
                Engine::SemiNaive => {
                    for delta_pos in 0..rule.body.len() {
                        join(
                            rule,
                            0,
                            delta_pos,
                            &old,
                            &delta,
                            &total,
                            &mut Bindings::new(),
                            &mut Vec::new(),
                            &mut firings,
                        );
                    }
                }
                Engine::Naive => {
                    join_naive(
                        rule,
                        0,
                        &total,
                        &mut Bindings::new(),
                        &mut Vec::new(),
                        &mut firings,
                    );
                }
            }
        }
        firings.sort();
        firings.dedup();

        let mut next_delta = FactSet::default();
        for (rule_name, head_key, premises) in firings {
            if head_key.0 == head_key.2 {
                warnings.insert(format!(
                    "rule {}: dropped reflexive triple {} {} {}",
                    rule_name, head_key.0, head_key.1, head_key.2
                ));
                continue;
            }
            let head_class = &out.entity(&head_key.0).unwrap().class_name;
            let tail_class = &out.entity(&head_key.2).unwrap().class_name;
            let ok = out
                .schema
                .check_domain_range(&head_key.1, head_class, tail_class)
                .unwrap_or(false);
            if !ok {
                warnings.insert(format!(
                    "rule {}: dropped {} {} {} ({} between {} and {} violates domain/range)",
                    rule_name,
                    head_key.0,
                    head_key.1,
                    head_key.2,
                    head_key.1,
                    head_class,
                    tail_class
                ));
                continue;
            }
            let provenance = Provenance::Inferred {
                rule_name: rule_name.clone(),
                premises,
            };
            if total.contains(&head_key) {
                out.insert_unchecked(&head_key.0, &head_key.1, &head_key.2, false, provenance);
            } else {
                out.insert_unchecked(&head_key.0, &head_key.1, &head_key.2, false, provenance);
                next_delta.insert(&head_key);
            }
        }

        if engine == Engine::SemiNaive {
            for (rel, pairs) in delta.by_relation.iter() {
                for pair in pairs {
                    old.insert(&(pair.0.clone(), rel.clone(), pair.1.clone()));
                }
            }
        } else {
            old = total.clone();
        }
        for (rel, pairs) in next_delta.by_relation.iter() {
            for pair in pairs {
                total.insert(&(pair.0.clone(), rel.clone(), pair.1.clone()));
            }
        }
        if next_delta.len == 0 {
            break;
        }
        delta = next_delta;
    }

    debug_assert!(out.indexes_consistent());
    Ok(InferenceResult {
        graph: out,
        warnings: warnings.into_iter().collect(),
        iterations,
    })
}

/// Semi-naive join: the pattern at `delta_pos` scans the delta, earlier
/// patterns scan only pre-delta facts, later ones the full set. Every new
/// instantiation is enumerated exactly once per fixpoint run.
#[allow(clippy::too_many_arguments)]
fn join(
    rule: &BoundRule,
    pos: usize,
    delta_pos: usize,
    old: &FactSet,
    delta: &FactSet,
    total: &FactSet,
    bindings: &mut Bindings,
    premises: &mut Vec<TripleKey>,
    firings: &mut Vec<(String, TripleKey, Vec<TripleKey>)>,
) {
    if pos == rule.body.len() {
        if let Some(head_key) = instantiate(&rule.head, bindings) {
            firings.push((rule.name.to_string(), head_key, premises.clone()));
        }
        return;
    }
    let source = match pos.cmp(&delta_pos) {
        std::cmp::Ordering::Less => old,
        std::cmp::Ordering::Equal => delta,
        std::cmp::Ordering::Greater => total,
    };
    step(rule, pos, source, bindings, premises, &mut |rule, bindings, premises| {
        join(rule, pos + 1, delta_pos, old, delta, total, bindings, premises, firings)
    });
}

fn join_naive(
    rule: &BoundRule,
    pos: usize,
    total: &FactSet,
    bindings: &mut Bindings,
    premises: &mut Vec<TripleKey>,
    firings: &mut Vec<(String, TripleKey, Vec<TripleKey>)>,
) {
    if pos == rule.body.len() {
        if let Some(head_key) = instantiate(&rule.head, bindings) {
            firings.push((rule.name.to_string(), head_key, premises.clone()));
        }
        return;
    }
    step(rule, pos, total, bindings, premises, &mut |rule, bindings, premises| {
        join_naive(rule, pos + 1, total, bindings, premises, firings)
    });
}

fn step(
    rule: &BoundRule,
    pos: usize,
    source: &FactSet,
    bindings: &mut Bindings,
    premises: &mut Vec<TripleKey>,
    next: &mut dyn FnMut(&BoundRule, &mut Bindings, &mut Vec<TripleKey>),
) {
    let pat = &rule.body[pos];
    for (h, t) in source.matches(pat, bindings) {
        let mut added: Vec<String> = Vec::new();
        let mut consistent = true;
        for (term, value) in [(&pat.head, &h), (&pat.tail, &t)] {
            match term {
                BoundTerm::Entity(id) => consistent &= id == value,
                BoundTerm::Var(v) => match bindings.get(v) {
                    Some(bound) => consistent &= bound == value,
                    None => {
                        bindings.insert(v.clone(), value.clone());
                        added.push(v.clone());
                    }
                },
            }
            if !consistent {
                break;
            }
        }
        if consistent {
            premises.push((h.clone(), pat.relation.clone(), t.clone()));
            next(rule, bindings, premises);
            premises.pop();
        }
        for v in added {
            bindings.remove(&v);
        }
    }
}

fn instantiate(head: &BoundPattern, bindings: &Bindings) -> Option<TripleKey> {
    let resolve = |term: &BoundTerm| -> Option<String> {
        match term {
            BoundTerm::Entity(id) => Some(id.clone()),
            BoundTerm::Var(v) => bindings.get(v).cloned(),
        }
    };
    Some((
        resolve(&head.head)?,
        head.relation.clone(),
        resolve(&head.tail)?,
    ))
}

/// How a triple came to be in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DerivationTree {
    /// Asserted triple: a leaf carrying its document provenance.
    Asserted {
        key: TripleKey,
        provenance: Vec<Provenance>,
    },
    /// Inferred triple: the rule and its recursively explained premises.
    Inferred {
        key: TripleKey,
        rule_name: String,
        premises: Vec<DerivationTree>,
    },
    /// Premise not materialized in this graph (filtered export).
    Unavailable { key: TripleKey },
}

/// Explains a triple: asserted triples return their document provenance;
/// inferred ones return the rule and recursively explained premises (the
/// ones recorded at first derivation, so the tree is finite and acyclic).
pub fn explain(kg: &KnowledgeGraph, key: &TripleKey) -> Result<DerivationTree, InferError> {
    if kg.triple(key).is_none() {
        return Err(InferError::UnknownTriple(key.clone()));
    }
    let mut path = BTreeSet::new();
    Ok(explain_rec(kg, key, &mut path))
}

fn explain_rec(kg: &KnowledgeGraph, key: &TripleKey, path: &mut BTreeSet<TripleKey>) -> DerivationTree {
    let Some(triple) = kg.triple(key) else {
        return DerivationTree::Unavailable { key: key.clone() };
    };
    if triple.asserted {
        return DerivationTree::Asserted {
            key: key.clone(),
            provenance: triple
                .provenance
                .iter()
                .filter(|p| matches!(p, Provenance::Document { .. }))
                .cloned()
                .collect(),
        };
    }
    path.insert(key.clone());
    let mut result = None;
    for p in &triple.provenance {
        let Provenance::Inferred { rule_name, premises } = p else {
            continue;
        };
        if premises.iter().any(|prem| path.contains(prem)) {
            continue;
        }
        let children = premises
            .iter()
            .map(|prem| explain_rec(kg, prem, path))
            .collect();
        result = Some(DerivationTree::Inferred {
            key: key.clone(),
            rule_name: rule_name.clone(),
            premises: children,
        });
        break;
    }
    path.remove(key);
    result.unwrap_or(DerivationTree::Unavailable { key: key.clone() })
}
