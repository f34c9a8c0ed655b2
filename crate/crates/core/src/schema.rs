//! Ontology schema: the class/property vocabulary that constrains every
//! entity and triple in the graph.
//!
//! A schema is loaded once from a line-oriented text format (or from the
//! built-in default) and is immutable afterwards, so it can be shared
//! freely across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static IDENT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z][A-Za-z0-9_]*$").unwrap());

/// Token that selects the built-in schema in [`load_schema`].
pub const DEFAULT_SCHEMA_TOKEN: &str = "default";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("schema validation error: {0}")]
    Validation(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("unknown property: {0}")]
    UnknownProperty(String),
}

/// One ontology class, optionally attached to a single parent class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDef {
    pub name: String,
    pub parent: Option<String>,
    pub description: String,
}

/// One ontology property with domain/range constraints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyDef {
    pub name: String,
    pub domain: BTreeSet<String>,
    pub range: BTreeSet<String>,
    pub symmetric: bool,
    pub inverse_of: Option<String>,
}

/// Validated class/property vocabulary.
///
/// `expected_properties` is the per-class checklist consulted by the
/// missing-information competency query; it is ordinary schema data and
/// fully overridable through schema files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OntologySchema {
    pub classes: BTreeMap<String, ClassDef>,
    pub properties: BTreeMap<String, PropertyDef>,
    pub expected_properties: BTreeMap<String, BTreeSet<String>>,
}

impl OntologySchema {
    pub fn class(&self, name: &str) -> Result<&ClassDef, SchemaError> {
        self.classes
            .get(name)
            .ok_or_else(|| SchemaError::UnknownClass(name.to_string()))
    }

    pub fn property(&self, name: &str) -> Result<&PropertyDef, SchemaError> {
        self.properties
            .get(name)
            .ok_or_else(|| SchemaError::UnknownProperty(name.to_string()))
    }

    /// True iff `a` equals `b` or `b` is an ancestor of `a` in the class
    /// hierarchy.
    pub fn is_subclass(&self, a: &str, b: &str) -> Result<bool, SchemaError> {
        self.class(b)?;
        let mut current = self.class(a)?;
        loop {
            if current.name == b {
                return Ok(true);
            }
            match &current.parent {
                Some(p) => current = self.class(p)?,
                None => return Ok(false),
            }
        }
    }

    /// True iff `head_class` falls under the relation's domain and
    /// `tail_class` falls under its range.
    pub fn check_domain_range(
        &self,
        relation: &str,
        head_class: &str,
        tail_class: &str,
    ) -> Result<bool, SchemaError> {
        let prop = self.property(relation)?;
        self.class(head_class)?;
        self.class(tail_class)?;
        let mut head_ok = false;
        for d in &prop.domain {
            if self.is_subclass(head_class, d)? {
                head_ok = true;
                break;
            }
        }
        if !head_ok {
            return Ok(false);
        }
        for r in &prop.range {
            if self.is_subclass(tail_class, r)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Renders the schema in the line-oriented file format. Loading the
    /// result yields an equal schema.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for class in self.classes.values() {
            match &class.parent {
                Some(p) => writeln!(out, "class {} parent={}", class.name, p).unwrap(),
                None => writeln!(out, "class {}", class.name).unwrap(),
            }
        }
        for prop in self.properties.values() {
            let domain: Vec<&str> = prop.domain.iter().map(String::as_str).collect();
            let range: Vec<&str> = prop.range.iter().map(String::as_str).collect();
            write!(
                out,
                "prop {} domain={} range={}",
                prop.name,
                domain.join(","),
                range.join(",")
            )
            .unwrap();
            if prop.symmetric {
                out.push_str(" symmetric");
            }
            if let Some(inv) = &prop.inverse_of {
                write!(out, " inverse={}", inv).unwrap();
            }
            out.push('\n');
        }
        for (class, props) in &self.expected_properties {
            let names: Vec<&str> = props.iter().map(String::as_str).collect();
            if names.is_empty() {
                writeln!(out, "expect {}", class).unwrap();
            } else {
                writeln!(out, "expect {} {}", class, names.join(",")).unwrap();
            }
        }
        out
    }

    fn validate(&self) -> Result<(), SchemaError> {
        for class in self.classes.values() {
            if let Some(parent) = &class.parent {
                if !self.classes.contains_key(parent) {
                    return Err(SchemaError::Validation(format!(
                        "class {} has dangling parent {}",
                        class.name, parent
                    )));
                }
            }
        }
        // Cycle check: walk every parent chain; in an acyclic forest the
        // chain length never exceeds the class count.
        for class in self.classes.values() {
            let mut seen = BTreeSet::new();
            let mut current = class;
            while let Some(parent) = &current.parent {
                if !seen.insert(current.name.clone()) {
                    return Err(SchemaError::Validation(format!(
                        "class hierarchy cycle through {}",
                        class.name
                    )));
                }
                current = &self.classes[parent];
            }
        }
        for prop in self.properties.values() {
            if prop.domain.is_empty() || prop.range.is_empty() {
                return Err(SchemaError::Validation(format!(
                    "property {} must declare a non-empty domain and range",
                    prop.name
                )));
            }
            for name in prop.domain.iter().chain(prop.range.iter()) {
                if !self.classes.contains_key(name) {
                    return Err(SchemaError::Validation(format!(
                        "property {} references undeclared class {}",
                        prop.name, name
                    )));
                }
            }
            if prop.symmetric && prop.domain != prop.range {
                return Err(SchemaError::Validation(format!(
                    "symmetric property {} must have domain = range",
                    prop.name
                )));
            }
            if let Some(inv) = &prop.inverse_of {
                let other = self.properties.get(inv).ok_or_else(|| {
                    SchemaError::Validation(format!(
                        "property {} references undeclared inverse {}",
                        prop.name, inv
                    ))
                })?;
                if other.inverse_of.as_deref() != Some(prop.name.as_str()) {
                    return Err(SchemaError::Validation(format!(
                        "inverse declaration of {} and {} is not mutual",
                        prop.name, inv
                    )));
                }
            }
        }
        for (class, props) in &self.expected_properties {
            if !self.classes.contains_key(class) {
                return Err(SchemaError::Validation(format!(
                    "expect line references undeclared class {}",
                    class
                )));
            }
            for p in props {
                if !self.properties.contains_key(p) {
                    return Err(SchemaError::Validation(format!(
                        "expect line for {} references undeclared property {}",
                        class, p
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses a schema from the line-oriented format, or returns the built-in
/// default when `text` is the token `default`.
pub fn load_schema(text: &str) -> Result<OntologySchema, SchemaError> {
    if text.trim() == DEFAULT_SCHEMA_TOKEN {
        return Ok(default_schema());
    }
    let mut schema = OntologySchema {
        classes: BTreeMap::new(),
        properties: BTreeMap::new(),
        expected_properties: BTreeMap::new(),
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let keyword = fields.next().unwrap();
        match keyword {
            "class" => parse_class_line(line_no, fields, &mut schema)?,
            "prop" => parse_prop_line(line_no, fields, &mut schema)?,
            "expect" => parse_expect_line(line_no, fields, &mut schema)?,
            other => {
                return Err(SchemaError::Syntax {
                    line: line_no,
                    message: format!("unknown directive {:?}", other),
                })
            }
        }
    }
    if schema.classes.is_empty() {
        return Err(SchemaError::Syntax {
            line: 0,
            message: "no classes declared".to_string(),
        });
    }
    schema.validate()?;
    Ok(schema)
}

fn check_ident(line: usize, token: &str, what: &str) -> Result<String, SchemaError> {
    if IDENT_RE.is_match(token) {
        Ok(token.to_string())
    } else {
        Err(SchemaError::Syntax {
            line,
            message: format!("invalid {} name {:?}", what, token),
        })
    }
}

fn parse_class_line<'a>(
    line: usize,
    mut fields: impl Iterator<Item = &'a str>,
    schema: &mut OntologySchema,
) -> Result<(), SchemaError> {
    let name = fields.next().ok_or_else(|| SchemaError::Syntax {
        line,
        message: "class line missing name".to_string(),
    })?;
    let name = check_ident(line, name, "class")?;
    let mut parent = None;
    for field in fields {
        match field.strip_prefix("parent=") {
            Some(p) => parent = Some(check_ident(line, p, "class")?),
            None => {
                return Err(SchemaError::Syntax {
                    line,
                    message: format!("unexpected token {:?} on class line", field),
                })
            }
        }
    }
    if schema
        .classes
        .insert(
            name.clone(),
            ClassDef {
                name: name.clone(),
                parent,
                description: String::new(),
            },
        )
        .is_some()
    {
        return Err(SchemaError::Syntax {
            line,
            message: format!("duplicate class {}", name),
        });
    }
    Ok(())
}

fn parse_name_list(line: usize, value: &str, what: &str) -> Result<BTreeSet<String>, SchemaError> {
    let mut out = BTreeSet::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.insert(check_ident(line, part, what)?);
    }
    Ok(out)
}

fn parse_prop_line<'a>(
    line: usize,
    mut fields: impl Iterator<Item = &'a str>,
    schema: &mut OntologySchema,
) -> Result<(), SchemaError> {
    let name = fields.next().ok_or_else(|| SchemaError::Syntax {
        line,
        message: "prop line missing name".to_string(),
    })?;
    let name = check_ident(line, name, "property")?;
    let mut domain = None;
    let mut range = None;
    let mut symmetric = false;
    let mut inverse_of = None;
    for field in fields {
        if let Some(v) = field.strip_prefix("domain=") {
            domain = Some(parse_name_list(line, v, "class")?);
        } else if let Some(v) = field.strip_prefix("range=") {
            range = Some(parse_name_list(line, v, "class")?);
        } else if field == "symmetric" {
            symmetric = true;
        } else if let Some(v) = field.strip_prefix("inverse=") {
            inverse_of = Some(check_ident(line, v, "property")?);
        } else {
            return Err(SchemaError::Syntax {
                line,
                message: format!("unexpected token {:?} on prop line", field),
            });
        }
    }
    let (domain, range) = match (domain, range) {
        (Some(d), Some(r)) => (d, r),
        _ => {
            return Err(SchemaError::Syntax {
                line,
                message: format!("prop {} must declare domain= and range=", name),
            })
        }
    };
    if schema
        .properties
        .insert(
            name.clone(),
            PropertyDef {
                name: name.clone(),
                domain,
                range,
                symmetric,
                inverse_of,
            },
        )
        .is_some()
    {
        return Err(SchemaError::Syntax {
            line,
            message: format!("duplicate property {}", name),
        });
    }
    Ok(())
}

fn parse_expect_line<'a>(
    line: usize,
    mut fields: impl Iterator<Item = &'a str>,
    schema: &mut OntologySchema,
) -> Result<(), SchemaError> {
    let class = fields.next().ok_or_else(|| SchemaError::Syntax {
        line,
        message: "expect line missing class name".to_string(),
    })?;
    let class = check_ident(line, class, "class")?;
    let props = match fields.next() {
        Some(list) => parse_name_list(line, list, "property")?,
        None => BTreeSet::new(),
    };
    if fields.next().is_some() {
        return Err(SchemaError::Syntax {
            line,
            message: "trailing tokens on expect line".to_string(),
        });
    }
    if schema.expected_properties.insert(class.clone(), props).is_some() {
        return Err(SchemaError::Syntax {
            line,
            message: format!("duplicate expect line for {}", class),
        });
    }
    Ok(())
}

/// The schema shipped with the tool: twelve classes and twelve properties
/// covering the common vocabulary of threat reports.
pub fn default_schema() -> OntologySchema {
    let text = "\
class AttackPattern
class Campaign
class Indicator
class Infrastructure
class Location
class Malware
class MalwareFamily
class Organization
class Software
class ThreatActor
class TimeInfo
class Vulnerability
prop similarTo domain=AttackPattern,Campaign,Malware,MalwareFamily,Software,ThreatActor range=AttackPattern,Campaign,Malware,MalwareFamily,Software,ThreatActor symmetric
prop variantOf domain=Malware,MalwareFamily,Software range=Malware,MalwareFamily,Software
prop involves domain=Campaign,Malware,MalwareFamily,ThreatActor range=AttackPattern,Indicator,Infrastructure,Malware,Software
prop uses domain=Campaign,Malware,ThreatActor range=AttackPattern,Infrastructure,Malware,Software
prop targets domain=Campaign,Malware,ThreatActor range=Infrastructure,Location,Organization,Software
prop exploits domain=AttackPattern,Campaign,Malware,ThreatActor range=Vulnerability
prop hasVulnerability domain=Infrastructure,Organization,Software range=Vulnerability
prop indicates domain=Indicator range=Campaign,Malware,MalwareFamily,ThreatActor
prop attributedTo domain=Campaign,Malware range=Location,Organization,ThreatActor
prop operatesFrom domain=Organization,ThreatActor range=Infrastructure,Location
prop hasTimeInfo domain=AttackPattern,Campaign,Malware,ThreatActor,Vulnerability range=TimeInfo
prop impacts domain=AttackPattern,Campaign,Infrastructure,Malware,ThreatActor,Vulnerability range=Infrastructure,Location,Organization,Software
expect Campaign attributedTo,hasTimeInfo,targets
expect Malware exploits,hasTimeInfo,involves,similarTo,targets
expect ThreatActor hasTimeInfo,operatesFrom,targets,uses
";
    load_schema(text).expect("built-in schema must be valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_class_schema_loads() {
        let schema = load_schema("class Malware\nclass Vulnerability\nclass Indicator").unwrap();
        let names: Vec<&str> = schema.classes.keys().map(String::as_str).collect();
        assert_eq!(names, ["Indicator", "Malware", "Vulnerability"]);
        assert!(schema.properties.is_empty());
    }

    #[test]
    fn empty_text_is_a_syntax_error() {
        match load_schema("") {
            Err(SchemaError::Syntax { message, .. }) => {
                assert!(message.contains("no classes"))
            }
            other => panic!("expected syntax error, got {:?}", other),
        }
    }

    #[test]
    fn dangling_parent_is_a_validation_error() {
        match load_schema("class A parent=B") {
            Err(SchemaError::Validation(msg)) => assert!(msg.contains("dangling parent B")),
            other => panic!("expected validation error, got {:?}", other),
        }
    }

    #[test]
    fn parent_cycle_is_rejected() {
        let err = load_schema("class A parent=B\nclass B parent=A").unwrap_err();
        assert!(matches!(err, SchemaError::Validation(_)));
    }

    #[test]
    fn subclass_is_reflexive() {
        let schema = default_schema();
        assert!(schema.is_subclass("Malware", "Malware").unwrap());
    }

    #[test]
    fn malware_family_is_not_a_malware_subclass() {
        // The shipped hierarchy is flat: the two classes are siblings.
        let schema = default_schema();
        assert!(!schema.is_subclass("MalwareFamily", "Malware").unwrap());
    }

    #[test]
    fn subclass_unknown_class_errors() {
        let schema = default_schema();
        assert_eq!(
            schema.is_subclass("Malware", "Ghost").unwrap_err(),
            SchemaError::UnknownClass("Ghost".to_string())
        );
    }

    #[test]
    fn subclass_follows_parent_chain() {
        let schema =
            load_schema("class Thing\nclass Agent parent=Thing\nclass Person parent=Agent")
                .unwrap();
        assert!(schema.is_subclass("Person", "Thing").unwrap());
        assert!(schema.is_subclass("Person", "Agent").unwrap());
        assert!(!schema.is_subclass("Thing", "Person").unwrap());
    }

    #[test]
    fn domain_range_accepts_table_fixture_relation() {
        let schema = default_schema();
        assert!(schema
            .check_domain_range("similarTo", "Malware", "Malware")
            .unwrap());
    }

    #[test]
    fn domain_range_rejects_location_tail_for_similar_to() {
        let schema = default_schema();
        assert!(!schema
            .check_domain_range("similarTo", "Malware", "Location")
            .unwrap());
    }

    #[test]
    fn domain_range_unknown_class_errors() {
        let schema = default_schema();
        assert_eq!(
            schema
                .check_domain_range("similarTo", "Malware", "Ghost")
                .unwrap_err(),
            SchemaError::UnknownClass("Ghost".to_string())
        );
    }

    #[test]
    fn domain_range_honors_subclassing() {
        let schema = load_schema(
            "class Malware\nclass Wiper parent=Malware\nprop similarTo domain=Malware range=Malware symmetric",
        )
        .unwrap();
        assert!(schema
            .check_domain_range("similarTo", "Wiper", "Malware")
            .unwrap());
    }

    #[test]
    fn serialize_round_trips_field_by_field() {
        let schema = default_schema();
        let reloaded = load_schema(&schema.serialize()).unwrap();
        assert_eq!(schema, reloaded);
    }

    #[test]
    fn inverse_must_be_mutual() {
        let text = "class A\nprop p domain=A range=A inverse=q\nprop q domain=A range=A";
        assert!(matches!(load_schema(text), Err(SchemaError::Validation(_))));
        let ok = "class A\nprop p domain=A range=A inverse=q\nprop q domain=A range=A inverse=p";
        assert!(load_schema(ok).is_ok());
    }

    #[test]
    fn symmetric_requires_equal_domain_range() {
        let text = "class A\nclass B\nprop p domain=A range=B symmetric";
        assert!(matches!(load_schema(text), Err(SchemaError::Validation(_))));
    }

    #[test]
    fn subclass_partial_order_over_default_schema() {
        let schema = default_schema();
        let names: Vec<&String> = schema.classes.keys().collect();
        for a in &names {
            for b in &names {
                let ab = schema.is_subclass(a, b).unwrap();
                let ba = schema.is_subclass(b, a).unwrap();
                if ab && ba {
                    assert_eq!(a, b, "antisymmetry violated for {} / {}", a, b);
                }
                for c in &names {
                    let bc = schema.is_subclass(b, c).unwrap();
                    let ac = schema.is_subclass(a, c).unwrap();
                    if ab && bc {
                        assert!(ac, "transitivity violated for {} {} {}", a, b, c);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_properties_check_symmetrically() {
        let schema = default_schema();
        let classes: Vec<&String> = schema.classes.keys().collect();
        for prop in schema.properties.values().filter(|p| p.symmetric) {
            for a in &classes {
                for b in &classes {
                    assert_eq!(
                        schema.check_domain_range(&prop.name, a, b).unwrap(),
                        schema.check_domain_range(&prop.name, b, a).unwrap(),
                        "asymmetric check for {} over {} / {}",
                        prop.name,
                        a,
                        b
                    );
                }
            }
        }
    }

    #[test]
    fn default_token_loads_default_schema() {
        assert_eq!(load_schema("default").unwrap(), default_schema());
    }

    #[test]
    fn expect_line_with_no_list_is_empty_set() {
        let schema = load_schema("class Malware\nexpect Malware").unwrap();
        assert_eq!(
            schema.expected_properties.get("Malware"),
            Some(&BTreeSet::new())
        );
    }
}
