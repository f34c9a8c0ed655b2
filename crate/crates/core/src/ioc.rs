//! Regular-expression extraction of indicators of compromise.
//!
//! Threat reports defang indicators to keep them non-clickable
//! (`hxxp://`, `10.0.0[.]1`, `bob[at]corp.net`); extraction matches the
//! defanged surface and reports a normalized canonical form.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::brat::EntitySpan;
use crate::ingest::Document;
use crate::text::CharIndex;

#[derive(Debug, Error)]
pub enum IocError {
    #[error("patterns file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("pattern for {kind}: {message}")]
    Pattern { kind: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IocKind {
    Ipv4,
    Domain,
    Url,
    Email,
    Md5,
    Sha1,
    Sha256,
    CveId,
    Filename,
    RegistryKey,
    Filepath,
}

impl IocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IocKind::Ipv4 => "ipv4",
            IocKind::Domain => "domain",
            IocKind::Url => "url",
            IocKind::Email => "email",
            IocKind::Md5 => "md5",
            IocKind::Sha1 => "sha1",
            IocKind::Sha256 => "sha256",
            IocKind::CveId => "cveId",
            IocKind::Filename => "filename",
            IocKind::RegistryKey => "registryKey",
            IocKind::Filepath => "filepath",
        }
    }

    pub fn parse(name: &str) -> Option<IocKind> {
        Some(match name {
            "ipv4" => IocKind::Ipv4,
            "domain" => IocKind::Domain,
            "url" => IocKind::Url,
            "email" => IocKind::Email,
            "md5" => IocKind::Md5,
            "sha1" => IocKind::Sha1,
            "sha256" => IocKind::Sha256,
            "cveId" => IocKind::CveId,
            "filename" => IocKind::Filename,
            "registryKey" => IocKind::RegistryKey,
            "filepath" => IocKind::Filepath,
            _ => return None,
        })
    }

    /// Ontology class auto-extracted entities are filed under.
    pub fn entity_class(self) -> &'static str {
        match self {
            IocKind::CveId => "Vulnerability",
            _ => "Indicator",
        }
    }
}

impl fmt::Display for IocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One extraction pattern: regex source plus an overlap priority.
#[derive(Debug, Clone)]
pub struct IocPattern {
    pub kind: IocKind,
    pub pattern: String,
    pub priority: i32,
}

/// A matched indicator. Offsets are char offsets into the document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IocMatch {
    pub kind: IocKind,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub normalized: String,
}

/// Defanged-dot alternative used by several built-in patterns.
const DOT: &str = r"(?:\.|\[\.\]|\(\.\))";

const TLDS: &str = "com|net|org|edu|gov|mil|int|io|co|uk|de|fr|ru|cn|jp|kr|in|au|ca|br|it|nl|se|no|es|ch|at|be|dk|fi|pl|cz|ir|il|sa|ae|tr|ua|biz|info|name|mobi|xyz|site|online|tech|top|club|dev|app|cloud";

fn builtin_patterns() -> Vec<IocPattern> {
    let p = |kind, priority, pattern: String| IocPattern {
        kind,
        pattern,
        priority,
    };
    vec![
        p(
            IocKind::Url,
            110,
            r#"(?i)\b(?:https?|hxxps?|ftp)://[^\s<>"']+"#.to_string(),
        ),
        p(
            IocKind::Email,
            100,
            format!(r"(?i)\b[a-z0-9._%+-]+(?:@|\[at\])(?:[a-z0-9-]+{DOT})+[a-z]{{2,}}\b"),
        ),
        p(
            IocKind::RegistryKey,
            90,
            r"\b(?:HKEY_[A-Z_]+|HKLM|HKCU|HKCR|HKCC|HKU)(?:\\[A-Za-z0-9_.{}()\-]+)+".to_string(),
        ),
        p(
            IocKind::Filepath,
            80,
            r"(?:\b[A-Za-z]:\\(?:[A-Za-z0-9_.$~\-]+\\)*[A-Za-z0-9_.$~\-]+|/(?:etc|usr|var|tmp|home|opt|bin|sbin|dev|proc|root|lib)(?:/[A-Za-z0-9_.\-]+)+)"
                .to_string(),
        ),
        p(
            IocKind::Filename,
            70,
            r"(?i)\b[a-z0-9_\-]+(?:\.[a-z0-9_\-]+)*\.(?:exe|dll|sys|bat|ps1|docx|doc|pdf|js|vbs|tmp|bin|dat)\b"
                .to_string(),
        ),
        p(IocKind::CveId, 60, r"CVE-[0-9]{4}-[0-9]{4,}".to_string()),
        p(IocKind::Sha256, 52, r"[0-9a-fA-F]{64}".to_string()),
        p(IocKind::Sha1, 51, r"[0-9a-fA-F]{40}".to_string()),
        p(IocKind::Md5, 50, r"[0-9a-fA-F]{32}".to_string()),
        p(
            IocKind::Domain,
            45,
            format!(r"(?i)\b(?:[a-z0-9](?:[a-z0-9\-]*[a-z0-9])?{DOT})+(?:{TLDS})\b"),
        ),
        p(
            IocKind::Ipv4,
            40,
            format!(r"[0-9]{{1,3}}(?:{DOT}[0-9]{{1,3}}){{3}}"),
        ),
    ]
}

/// A compiled, validated pattern set.
pub struct PatternSet {
    entries: Vec<(IocPattern, Regex)>,
}

static BUILTIN: LazyLock<PatternSet> =
    LazyLock::new(|| PatternSet::from_patterns(builtin_patterns()).unwrap());

impl PatternSet {
    pub fn builtin() -> &'static PatternSet {
        &BUILTIN
    }

    pub fn from_patterns(patterns: Vec<IocPattern>) -> Result<PatternSet, IocError> {
        let mut kinds = BTreeSet::new();
        let mut priorities = BTreeSet::new();
        let mut entries = Vec::new();
        for pat in patterns {
            if !kinds.insert(pat.kind) {
                return Err(IocError::Pattern {
                    kind: pat.kind.to_string(),
                    message: "duplicate kind".to_string(),
                });
            }
            if !priorities.insert(pat.priority) {
                return Err(IocError::Pattern {
                    kind: pat.kind.to_string(),
                    message: format!("duplicate priority {}", pat.priority),
                });
            }
            let regex = Regex::new(&pat.pattern).map_err(|e| IocError::Pattern {
                kind: pat.kind.to_string(),
                message: e.to_string(),
            })?;
            entries.push((pat, regex));
        }
        Ok(PatternSet { entries })
    }

    /// Parses a patterns file: one `kind <name> priority <n> /<regex>/` per
    /// line, `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<PatternSet, IocError> {
        let mut patterns = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| IocError::Syntax {
                line: line_no,
                message,
            };
            let rest = line
                .strip_prefix("kind ")
                .ok_or_else(|| err("expected `kind <name> priority <n> /<pattern>/`".into()))?;
            let (name, rest) = rest
                .split_once(" priority ")
                .ok_or_else(|| err("missing `priority`".into()))?;
            let kind = IocKind::parse(name.trim())
                .ok_or_else(|| err(format!("unknown kind {:?}", name.trim())))?;
            let rest = rest.trim();
            let (num, pattern) = rest
                .split_once('/')
                .ok_or_else(|| err("missing /<pattern>/".into()))?;
            let priority: i32 = num
                .trim()
                .parse()
                .map_err(|_| err(format!("invalid priority {:?}", num.trim())))?;
            let pattern = pattern
                .strip_suffix('/')
                .ok_or_else(|| err("pattern must end with /".into()))?;
            patterns.push(IocPattern {
                kind,
                pattern: pattern.to_string(),
                priority,
            });
        }
        PatternSet::from_patterns(patterns)
    }
}

/// Extracts indicators with the built-in pattern set.
pub fn extract_iocs(doc: &Document) -> Vec<IocMatch> {
    extract_iocs_with(doc, PatternSet::builtin())
}

/// Extracts indicators: all patterns run over the whole text, overlaps are
/// resolved by longer span then higher priority, results sorted by start.
pub fn extract_iocs_with(doc: &Document, set: &PatternSet) -> Vec<IocMatch> {
    let index = CharIndex::new(&doc.text);
    let mut candidates = raw_matches(&doc.text, &index, set);
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(b.priority.cmp(&a.priority))
            .then(a.start.cmp(&b.start))
    });
    let mut accepted: Vec<Candidate> = Vec::new();
    for cand in candidates {
        if !accepted
            .iter()
            .any(|a| cand.start < a.end && a.start < cand.end)
        {
            accepted.push(cand);
        }
    }
    accepted.sort_by_key(|c| c.start);
    accepted
        .into_iter()
        .map(|c| IocMatch {
            normalized: normalize(c.kind, &c.surface),
            kind: c.kind,
            start: c.start,
            end: c.end,
            surface: c.surface,
        })
        .collect()
}

/// Char ranges matched by the filename/domain/IP patterns; the sentence
/// splitter refuses to split inside them.
pub fn sentence_guard_ranges(text: &str) -> Vec<(usize, usize)> {
    let index = CharIndex::new(text);
    let set = PatternSet::builtin();
    let mut ranges: Vec<(usize, usize)> = raw_matches(text, &index, set)
        .into_iter()
        .filter(|c| matches!(c.kind, IocKind::Filename | IocKind::Domain | IocKind::Ipv4))
        .map(|c| (c.start, c.end))
        .collect();
    ranges.sort_unstable();
    ranges
}

struct Candidate {
    kind: IocKind,
    priority: i32,
    start: usize,
    end: usize,
    surface: String,
}

fn raw_matches(text: &str, index: &CharIndex, set: &PatternSet) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (pat, regex) in &set.entries {
        for m in regex.find_iter(text) {
            let (mut b0, mut b1) = (m.start(), m.end());
            if !validate(pat.kind, text, &mut b0, &mut b1) {
                continue;
            }
            out.push(Candidate {
                kind: pat.kind,
                priority: pat.priority,
                start: index.char_at_byte(b0),
                end: index.char_at_byte(b1),
                surface: text[b0..b1].to_string(),
            });
        }
    }
    out
}

/// Kind-specific acceptance checks the regexes alone cannot express
/// (the regex crate has no lookaround). May shrink the match.
fn validate(kind: IocKind, text: &str, b0: &mut usize, b1: &mut usize) -> bool {
    let prev = text[..*b0].chars().next_back();
    let next = text[*b1..].chars().next();
    let is_hex = |c: char| c.is_ascii_hexdigit();
    match kind {
        IocKind::Md5 | IocKind::Sha1 | IocKind::Sha256 => {
            !prev.is_some_and(is_hex) && !next.is_some_and(is_hex)
        }
        IocKind::Ipv4 => {
            if prev.is_some_and(|c| c.is_ascii_digit() || c == '.')
                || next.is_some_and(|c| c.is_ascii_digit() || c == '.')
            {
                return false;
            }
            normalize(IocKind::Ipv4, &text[*b0..*b1])
                .split('.')
                .all(|octet| octet.parse::<u32>().map(|v| v <= 255).unwrap_or(false))
        }
        IocKind::CveId => !prev.is_some_and(|c| c.is_alphanumeric() || c == '-'),
        IocKind::Domain => {
            !prev.is_some_and(|c| c.is_alphanumeric() || matches!(c, '.' | '-' | '@'))
                && !next.is_some_and(|c| c.is_alphanumeric())
        }
        IocKind::Url => {
            // Trailing punctuation belongs to the prose, as do unbalanced
            // closing brackets.
            loop {
                let s = &text[*b0..*b1];
                let Some(last) = s.chars().next_back() else {
                    return false;
                };
                let drop = match last {
                    '.' | ',' | ';' | ':' | '!' | '?' | '\'' | '"' => true,
                    ')' => s.matches(')').count() > s.matches('(').count(),
                    ']' => s.matches(']').count() > s.matches('[').count(),
                    '}' => s.matches('}').count() > s.matches('{').count(),
                    _ => false,
                };
                if !drop {
                    break;
                }
                *b1 -= last.len_utf8();
            }
            *b1 > *b0
        }
        _ => true,
    }
}

static HXXP_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)hxxp").unwrap());
static AT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\[at\]").unwrap());

fn defang_dots(s: &str) -> String {
    s.replace("[.]", ".").replace("(.)", ".")
}

/// Canonical form: defang markers removed, hashes lowercased.
pub fn normalize(kind: IocKind, surface: &str) -> String {
    match kind {
        IocKind::Url => defang_dots(&HXXP_RE.replace_all(surface, "http")),
        IocKind::Email => defang_dots(&AT_RE.replace_all(surface, "@")),
        IocKind::Domain | IocKind::Ipv4 => defang_dots(surface),
        IocKind::Md5 | IocKind::Sha1 | IocKind::Sha256 => surface.to_ascii_lowercase(),
        _ => surface.to_string(),
    }
}

/// Line-delimited JSON rendering of matches, one object per match with
/// fields docId, kind, start, end, surface, normalized.
pub fn render_jsonl(doc_id: &str, matches: &[IocMatch]) -> String {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        #[serde(rename = "docId")]
        doc_id: &'a str,
        kind: &'a str,
        start: usize,
        end: usize,
        surface: &'a str,
        normalized: &'a str,
    }
    let mut out = String::new();
    for m in matches {
        let line = Line {
            doc_id,
            kind: m.kind.as_str(),
            start: m.start,
            end: m.end,
            surface: &m.surface,
            normalized: &m.normalized,
        };
        out.push_str(&serde_json::to_string(&line).unwrap());
        out.push('\n');
    }
    out
}

/// Bridges matches into the annotation pipeline: each match becomes an
/// Indicator entity span (Vulnerability for CVE ids), with ids `TA1`,
/// `TA2`, ... so they never collide with hand T-numbers.
pub fn to_entity_spans(matches: &[IocMatch], doc_id: &str) -> Vec<EntitySpan> {
    matches
        .iter()
        .enumerate()
        .map(|(i, m)| EntitySpan {
            ann_id: format!("TA{}", i + 1),
            class_name: m.kind.entity_class().to_string(),
            fragments: vec![(m.start, m.end)],
            surface: m.normalized.clone(),
            doc_id: doc_id.to_string(),
        })
        .collect()
}
