//! Brat standoff annotation parsing and validation.
//!
//! `.ann` files carry the hand-annotated entities (`T` lines) and binary
//! relations (`R` lines) that triples are generated from. Offsets count
//! Unicode scalar values into the paired `.txt` document; any drift between
//! the recorded surface text and the document slice is an error, not a
//! warning, because it would silently corrupt provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::Document;
use crate::schema::OntologySchema;
use crate::text::CharIndex;

static T_ID_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^T[0-9]+$").unwrap());
static R_ID_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^R[0-9]+$").unwrap());
static TYPE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z][A-Za-z0-9_]*$").unwrap());

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StandoffError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("offset mismatch in {ann_id}: {message}")]
    OffsetMismatch { ann_id: String, message: String },
    #[error("relation {ann_id} references missing annotation {arg}")]
    DanglingArg { ann_id: String, arg: String },
}

impl StandoffError {
    pub fn kind(&self) -> &'static str {
        match self {
            StandoffError::Syntax(_) => "SyntaxError",
            StandoffError::OffsetMismatch { .. } => "OffsetMismatch",
            StandoffError::DanglingArg { .. } => "DanglingArg",
        }
    }

    pub fn ann_id(&self) -> Option<&str> {
        match self {
            StandoffError::Syntax(_) => None,
            StandoffError::OffsetMismatch { ann_id, .. } => Some(ann_id),
            StandoffError::DanglingArg { ann_id, .. } => Some(ann_id),
        }
    }
}

/// All per-line errors from one `.ann` file.
#[derive(Debug, Error)]
pub struct StandoffErrors(pub Vec<(usize, StandoffError)>);

impl fmt::Display for StandoffErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (line, err) in &self.0 {
            writeln!(f, "line {}: {}", line, err)?;
        }
        Ok(())
    }
}

/// One annotated entity mention; `fragments` allows discontinuous spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub ann_id: String,
    pub class_name: String,
    pub fragments: Vec<(usize, usize)>,
    pub surface: String,
    pub doc_id: String,
}

impl EntitySpan {
    /// Whether this span came from automatic IoC extraction (`TA` ids)
    /// rather than a hand annotation.
    pub fn is_auto(&self) -> bool {
        self.ann_id.starts_with("TA")
    }

    /// Envelope of all fragments: first start to last end.
    pub fn envelope(&self) -> (usize, usize) {
        (
            self.fragments.first().map(|f| f.0).unwrap_or(0),
            self.fragments.last().map(|f| f.1).unwrap_or(0),
        )
    }
}

/// One annotated binary relation between two entity spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationAnn {
    pub ann_id: String,
    pub property_name: String,
    pub arg1: String,
    pub arg2: String,
    pub doc_id: String,
}

/// Parsed annotations of one document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    pub doc_id: String,
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationAnn>,
    /// Skipped lines, one `(line number, message)` entry each.
    pub warnings: Vec<(usize, String)>,
}

impl AnnotationSet {
    pub fn entity(&self, ann_id: &str) -> Option<&EntitySpan> {
        self.entities.iter().find(|e| e.ann_id == ann_id)
    }
}

/// Parse result carrying both the accepted annotations and every rejected
/// line, so callers can report all problems at once.
#[derive(Debug)]
pub struct StandoffParse {
    pub set: AnnotationSet,
    pub errors: Vec<(usize, StandoffError)>,
}

/// Strict parse: any bad T/R line fails the whole file, with every error
/// listed.
pub fn parse_standoff(ann_text: &str, doc: &Document) -> Result<AnnotationSet, StandoffErrors> {
    let parsed = parse_standoff_lenient(ann_text, doc);
    if parsed.errors.is_empty() {
        Ok(parsed.set)
    } else {
        Err(StandoffErrors(parsed.errors))
    }
}

/// Lenient parse: collects accepted annotations, warnings for skipped
/// lines, and per-line errors for rejected ones.
pub fn parse_standoff_lenient(ann_text: &str, doc: &Document) -> StandoffParse {
    let index = CharIndex::new(&doc.text);
    let mut set = AnnotationSet {
        doc_id: doc.doc_id.clone(),
        ..AnnotationSet::default()
    };
    let mut errors: Vec<(usize, StandoffError)> = Vec::new();
    let mut entity_ids: BTreeMap<String, ()> = BTreeMap::new();
    let mut pending_relations: Vec<(usize, RelationAnn)> = Vec::new();
    let mut relation_ids: BTreeMap<String, ()> = BTreeMap::new();

    for (idx, raw) in ann_text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let first = raw.chars().next().unwrap();
        match first {
            'T' => match parse_t_line(raw, doc, &index) {
                Ok(span) => {
                    if entity_ids.insert(span.ann_id.clone(), ()).is_some() {
                        errors.push((
                            line_no,
                            StandoffError::Syntax(format!("duplicate annotation id {}", span.ann_id)),
                        ));
                    } else {
                        set.entities.push(span);
                    }
                }
                Err(e) => errors.push((line_no, e)),
            },
            'R' => match parse_r_line(raw, &doc.doc_id) {
                Ok(rel) => {
                    if relation_ids.insert(rel.ann_id.clone(), ()).is_some() {
                        errors.push((
                            line_no,
                            StandoffError::Syntax(format!("duplicate annotation id {}", rel.ann_id)),
                        ));
                    } else {
                        pending_relations.push((line_no, rel));
                    }
                }
                Err(e) => errors.push((line_no, e)),
            },
            'A' | 'M' | 'E' | 'N' | '#' => {
                set.warnings
                    .push((line_no, format!("skipped {} line", first)));
            }
            _ => errors.push((
                line_no,
                StandoffError::Syntax(format!("unrecognized line start {:?}", first)),
            )),
        }
    }

    // Relation arguments may reference T lines that appear later in the
    // file, so they resolve after the full pass.
    for (line_no, rel) in pending_relations {
        let missing = [&rel.arg1, &rel.arg2]
            .into_iter()
            .find(|arg| !entity_ids.contains_key(*arg));
        match missing {
            Some(arg) => errors.push((
                line_no,
                StandoffError::DanglingArg {
                    ann_id: rel.ann_id.clone(),
                    arg: arg.clone(),
                },
            )),
            None => set.relations.push(rel),
        }
    }
    errors.sort_by_key(|(line, _)| *line);

    StandoffParse { set, errors }
}

fn parse_t_line(raw: &str, doc: &Document, index: &CharIndex) -> Result<EntitySpan, StandoffError> {
    let cols: Vec<&str> = raw.split('\t').collect();
    if cols.len() != 3 {
        return Err(StandoffError::Syntax(format!(
            "expected 3 tab-separated columns, found {}",
            cols.len()
        )));
    }
    let ann_id = cols[0].to_string();
    if !T_ID_RE.is_match(&ann_id) {
        return Err(StandoffError::Syntax(format!("invalid T id {:?}", ann_id)));
    }
    let mut head = cols[1].splitn(2, ' ');
    let class_name = head.next().unwrap_or_default().to_string();
    if !TYPE_RE.is_match(&class_name) {
        return Err(StandoffError::Syntax(format!(
            "invalid entity type {:?}",
            class_name
        )));
    }
    let span_part = head.next().ok_or_else(|| {
        StandoffError::Syntax("T line missing offsets".to_string())
    })?;
    let mut fragments = Vec::new();
    for pair in span_part.split(';') {
        let nums: Vec<&str> = pair.split_whitespace().collect();
        if nums.len() != 2 {
            return Err(StandoffError::Syntax(format!(
                "bad offset pair {:?}",
                pair.trim()
            )));
        }
        let start: usize = nums[0]
            .parse()
            .map_err(|_| StandoffError::Syntax(format!("bad offset {:?}", nums[0])))?;
        let end: usize = nums[1]
            .parse()
            .map_err(|_| StandoffError::Syntax(format!("bad offset {:?}", nums[1])))?;
        fragments.push((start, end));
    }
    let doc_len = index.char_len();
    let mut prev_end = 0;
    for &(start, end) in &fragments {
        if start >= end || end > doc_len {
            return Err(StandoffError::OffsetMismatch {
                ann_id,
                message: format!("fragment {}..{} out of range (doc length {})", start, end, doc_len),
            });
        }
        if start < prev_end {
            return Err(StandoffError::OffsetMismatch {
                ann_id,
                message: "fragments overlap or are unordered".to_string(),
            });
        }
        prev_end = end;
    }
    let expected: String = fragments
        .iter()
        .map(|&(s, e)| index.slice(&doc.text, s, e).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
        .replace('\n', " ");
    if cols[2] != expected {
        return Err(StandoffError::OffsetMismatch {
            ann_id,
            message: format!("recorded text {:?} != document slice {:?}", cols[2], expected),
        });
    }
    Ok(EntitySpan {
        ann_id,
        class_name,
        fragments,
        surface: cols[2].to_string(),
        doc_id: doc.doc_id.clone(),
    })
}

fn parse_r_line(raw: &str, doc_id: &str) -> Result<RelationAnn, StandoffError> {
    let cols: Vec<&str> = raw.split('\t').collect();
    if cols.len() < 2 || cols.len() > 3 || (cols.len() == 3 && !cols[2].trim().is_empty()) {
        return Err(StandoffError::Syntax(
            "expected R<id>\\t<Type> Arg1:T<n> Arg2:T<m>".to_string(),
        ));
    }
    let ann_id = cols[0].to_string();
    if !R_ID_RE.is_match(&ann_id) {
        return Err(StandoffError::Syntax(format!("invalid R id {:?}", ann_id)));
    }
    let fields: Vec<&str> = cols[1].split_whitespace().collect();
    if fields.len() != 3 {
        return Err(StandoffError::Syntax(format!(
            "expected `<Type> Arg1:T<n> Arg2:T<m>`, found {:?}",
            cols[1]
        )));
    }
    let property_name = fields[0].to_string();
    if !TYPE_RE.is_match(&property_name) {
        return Err(StandoffError::Syntax(format!(
            "invalid relation type {:?}",
            property_name
        )));
    }
    let arg = |field: &str, tag: &str| -> Result<String, StandoffError> {
        let value = field
            .strip_prefix(tag)
            .ok_or_else(|| StandoffError::Syntax(format!("expected {}T<n>, found {:?}", tag, field)))?;
        if !T_ID_RE.is_match(value) {
            return Err(StandoffError::Syntax(format!("bad argument {:?}", value)));
        }
        Ok(value.to_string())
    };
    let arg1 = arg(fields[1], "Arg1:")?;
    let arg2 = arg(fields[2], "Arg2:")?;
    if arg1 == arg2 {
        return Err(StandoffError::Syntax(format!(
            "relation {} has Arg1 = Arg2 = {}",
            ann_id, arg1
        )));
    }
    Ok(RelationAnn {
        ann_id,
        property_name,
        arg1,
        arg2,
        doc_id: doc_id.to_string(),
    })
}

/// Renders accepted annotations back to standoff lines (T lines, then R
/// lines, in stored order).
pub fn serialize_standoff(set: &AnnotationSet) -> String {
    let mut out = String::new();
    for e in &set.entities {
        let spans: Vec<String> = e
            .fragments
            .iter()
            .map(|(s, t)| format!("{} {}", s, t))
            .collect();
        writeln!(
            out,
            "{}\t{} {}\t{}",
            e.ann_id,
            e.class_name,
            spans.join(";"),
            e.surface
        )
        .unwrap();
    }
    for r in &set.relations {
        writeln!(
            out,
            "{}\t{} Arg1:{} Arg2:{}",
            r.ann_id, r.property_name, r.arg1, r.arg2
        )
        .unwrap();
    }
    out
}

/// One machine-checkable problem found in an annotation set.
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct Finding {
    #[serde(rename = "docId")]
    pub doc_id: String,
    #[serde(rename = "annId", skip_serializing_if = "Option::is_none")]
    pub ann_id: Option<String>,
    pub kind: String,
    pub message: String,
}

/// Outcome of validating one annotation set against a schema.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub doc_id: String,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks every annotation against the schema: unknown classes, unknown
/// properties, and relations whose endpoint classes violate the property's
/// domain/range. Violations are data, not failures.
pub fn validate_annotations(set: &AnnotationSet, schema: &OntologySchema) -> ValidationReport {
    let mut findings = Vec::new();
    for e in &set.entities {
        if !schema.classes.contains_key(&e.class_name) {
            findings.push(Finding {
                doc_id: set.doc_id.clone(),
                ann_id: Some(e.ann_id.clone()),
                kind: "UnknownClass".to_string(),
                message: format!("class {:?} is not declared in the schema", e.class_name),
            });
        }
    }
    for r in &set.relations {
        if !schema.properties.contains_key(&r.property_name) {
            findings.push(Finding {
                doc_id: set.doc_id.clone(),
                ann_id: Some(r.ann_id.clone()),
                kind: "UnknownProperty".to_string(),
                message: format!("property {:?} is not declared in the schema", r.property_name),
            });
            continue;
        }
        let (head, tail) = match (set.entity(&r.arg1), set.entity(&r.arg2)) {
            (Some(h), Some(t)) => (h, t),
            _ => continue, // dangling args are parse errors, not validation findings
        };
        if !schema.classes.contains_key(&head.class_name)
            || !schema.classes.contains_key(&tail.class_name)
        {
            continue; // already reported as UnknownClass on the span
        }
        let ok = schema
            .check_domain_range(&r.property_name, &head.class_name, &tail.class_name)
            .unwrap_or(false);
        if !ok {
            findings.push(Finding {
                doc_id: set.doc_id.clone(),
                ann_id: Some(r.ann_id.clone()),
                kind: "DomainRangeViolation".to_string(),
                message: format!(
                    "{} between {} and {} violates domain/range",
                    r.property_name, head.class_name, tail.class_name
                ),
            });
        }
    }
    ValidationReport {
        doc_id: set.doc_id.clone(),
        findings,
    }
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    #[serde(rename = "docId")]
    doc_id: &'a str,
    kind: &'static str,
    entities: usize,
    relations: usize,
    warnings: usize,
    errors: usize,
    violations: usize,
    ok: bool,
}

/// Renders the full per-document report (skipped lines, parse errors,
/// validation findings, summary) as line-delimited JSON. Output is
/// byte-stable for identical inputs.
pub fn render_report(parse: &StandoffParse, validation: Option<&ValidationReport>) -> String {
    let doc_id = &parse.set.doc_id;
    let mut out = String::new();
    let mut push = |finding: &Finding| {
        out.push_str(&serde_json::to_string(finding).unwrap());
        out.push('\n');
    };
    for (line, message) in &parse.set.warnings {
        push(&Finding {
            doc_id: doc_id.clone(),
            ann_id: None,
            kind: "SkippedLine".to_string(),
            message: format!("line {}: {}", line, message),
        });
    }
    for (line, err) in &parse.errors {
        push(&Finding {
            doc_id: doc_id.clone(),
            ann_id: err.ann_id().map(str::to_string),
            kind: err.kind().to_string(),
            message: format!("line {}: {}", line, err),
        });
    }
    let mut violations = 0;
    if let Some(report) = validation {
        violations = report.findings.len();
        for finding in &report.findings {
            push(finding);
        }
    }
    let ok = parse.errors.is_empty() && violations == 0;
    let summary = SummaryLine {
        doc_id,
        kind: "Summary",
        entities: parse.set.entities.len(),
        relations: parse.set.relations.len(),
        warnings: parse.set.warnings.len(),
        errors: parse.errors.len(),
        violations,
        ok,
    };
    out.push_str(&serde_json::to_string(&summary).unwrap());
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_document;
    use crate::schema::default_schema;

    fn doc(text: &str) -> Document {
        load_document(text, "dustman-2020").unwrap()
    }

    #[test]
    fn parses_simple_entity_line() {
        let d = doc("DUSTMAN can be considered as a new variant of ZeroCleare malware.");
        let set = parse_standoff("T1\tMalware 0 7\tDUSTMAN", &d).unwrap();
        assert_eq!(set.entities.len(), 1);
        let e = &set.entities[0];
        assert_eq!(e.ann_id, "T1");
        assert_eq!(e.class_name, "Malware");
        assert_eq!(e.fragments, vec![(0, 7)]);
        assert_eq!(e.surface, "DUSTMAN");
    }

    #[test]
    fn parses_discontinuous_span() {
        let d = doc("foo x bar");
        let set = parse_standoff("T2\tMalware 0 3;6 9\tfoo bar", &d).unwrap();
        assert_eq!(set.entities[0].fragments, vec![(0, 3), (6, 9)]);
        assert_eq!(set.entities[0].surface, "foo bar");
    }

    #[test]
    fn dangling_relation_arg_is_reported() {
        let d = doc("DUSTMAN and ZeroCleare");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nR1\tsimilarTo Arg1:T1 Arg2:T9";
        let errs = parse_standoff(ann, &d).unwrap_err();
        assert_eq!(errs.0.len(), 1);
        assert_eq!(
            errs.0[0].1,
            StandoffError::DanglingArg {
                ann_id: "R1".to_string(),
                arg: "T9".to_string()
            }
        );
    }

    #[test]
    fn forward_references_resolve() {
        let d = doc("DUSTMAN and ZeroCleare");
        let ann = "R1\tsimilarTo Arg1:T1 Arg2:T2\nT1\tMalware 0 7\tDUSTMAN\nT2\tMalware 12 22\tZeroCleare";
        let set = parse_standoff(ann, &d).unwrap();
        assert_eq!(set.relations.len(), 1);
    }

    #[test]
    fn offset_mismatch_is_an_error() {
        let d = doc("DUSTMAN and ZeroCleare");
        let err = parse_standoff("T1\tMalware 0 7\tZeroClea", &d).unwrap_err();
        assert!(matches!(err.0[0].1, StandoffError::OffsetMismatch { .. }));
    }

    #[test]
    fn newlines_in_slice_are_escaped_to_spaces() {
        let d = doc("DUSTMAN\nwiper");
        let set = parse_standoff("T1\tMalware 0 13\tDUSTMAN wiper", &d).unwrap();
        assert_eq!(set.entities[0].surface, "DUSTMAN wiper");
    }

    #[test]
    fn non_tr_lines_are_skipped_with_warnings() {
        let d = doc("DUSTMAN and ZeroCleare");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nA1\tNegated T1\n#1\tAnnotatorNotes T1\tcheck me\nE1\tAttack:T1\nN1\tReference T1 Wikipedia:Q1\nM1\tmod T1";
        let parsed = parse_standoff_lenient(ann, &d);
        assert!(parsed.errors.is_empty());
        assert_eq!(parsed.set.warnings.len(), 5);
        assert_eq!(parsed.set.entities.len(), 1);
    }

    #[test]
    fn self_relation_is_rejected() {
        let d = doc("DUSTMAN");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nR1\tsimilarTo Arg1:T1 Arg2:T1";
        let err = parse_standoff(ann, &d).unwrap_err();
        assert!(matches!(err.0[0].1, StandoffError::Syntax(_)));
    }

    #[test]
    fn parse_count_conservation_holds() {
        let d = doc("DUSTMAN and ZeroCleare");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT1\tMalware 0 7\tDUSTMAN\nTx\tbroken\nR1\tsimilarTo Arg1:T1 Arg2:T9\nA1\tfoo";
        let parsed = parse_standoff_lenient(ann, &d);
        let t_lines = ann.lines().filter(|l| l.starts_with('T')).count();
        let r_lines = ann.lines().filter(|l| l.starts_with('R')).count();
        let t_errors = parsed
            .errors
            .iter()
            .filter(|(line, _)| ann.lines().nth(line - 1).unwrap().starts_with('T'))
            .count();
        let r_errors = parsed
            .errors
            .iter()
            .filter(|(line, _)| ann.lines().nth(line - 1).unwrap().starts_with('R'))
            .count();
        assert_eq!(parsed.set.entities.len() + t_errors, t_lines);
        assert_eq!(parsed.set.relations.len() + r_errors, r_lines);
        assert_eq!(parsed.set.warnings.len(), 1);
    }

    #[test]
    fn round_trip_reproduces_accepted_lines() {
        let d = doc("foo x bar and DUSTMAN");
        let ann = "T1\tMalware 0 3;6 9\tfoo bar\nT2\tMalware 14 21\tDUSTMAN\nR1\tsimilarTo Arg1:T1 Arg2:T2\n";
        let set = parse_standoff(ann, &d).unwrap();
        assert_eq!(serialize_standoff(&set), ann);
    }

    #[test]
    fn validation_accepts_table_fixture_shape() {
        let d = doc("DUSTMAN and ZeroCleare");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tMalware 12 22\tZeroCleare\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let set = parse_standoff(ann, &d).unwrap();
        let report = validate_annotations(&set, &default_schema());
        assert!(report.ok());
    }

    #[test]
    fn unknown_class_is_flagged() {
        let d = doc("DUSTMAN");
        let set = parse_standoff("T3\tWizard 0 7\tDUSTMAN", &d).unwrap();
        let report = validate_annotations(&set, &default_schema());
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].kind, "UnknownClass");
        assert_eq!(report.findings[0].ann_id.as_deref(), Some("T3"));
    }

    #[test]
    fn domain_range_violation_is_flagged() {
        let d = doc("DUSTMAN hit Riyadh");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tLocation 12 18\tRiyadh\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let set = parse_standoff(ann, &d).unwrap();
        let report = validate_annotations(&set, &default_schema());
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].kind, "DomainRangeViolation");
    }

    #[test]
    fn removing_an_annotation_never_adds_violations() {
        let d = doc("DUSTMAN hit Riyadh");
        let ann = "T1\tMalware 0 7\tDUSTMAN\nT2\tLocation 12 18\tRiyadh\nT3\tWizard 8 11\thit\nR1\tsimilarTo Arg1:T1 Arg2:T2";
        let full = parse_standoff(ann, &d).unwrap();
        let schema = default_schema();
        let baseline = validate_annotations(&full, &schema);
        // Dropping any one relation, or an entity with its relations, can
        // only remove findings.
        for skip in 0..full.relations.len() {
            let mut reduced = full.clone();
            reduced.relations.remove(skip);
            let report = validate_annotations(&reduced, &schema);
            for f in &report.findings {
                assert!(baseline.findings.contains(f));
            }
        }
    }
}
