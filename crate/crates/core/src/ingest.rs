//! Plain-text threat report loading and sentence splitting.
//!
//! Documents are the substrate every annotation indexes into, so offsets
//! are preserved exactly: sentence spans are char ranges into the loaded
//! text, never copies with shifted positions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::ioc;
use crate::text::{slug, CharIndex};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("meta.tsv line {line}: {message}")]
    Meta { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One loaded threat report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub source_name: String,
    pub year: Option<i32>,
}

impl Document {
    /// Slice of the text by char offsets.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        CharIndex::new(&self.text).slice(&self.text, start, end)
    }

    /// Length in chars.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// A sentence span within one document; `end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sentence {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

/// Normalizes line endings to `\n`, strips a UTF-8 BOM, and wraps the text
/// as a [`Document`]. Whitespace-only input is rejected.
pub fn load_document(text: &str, doc_id: &str) -> Result<Document, IngestError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let normalized = text.replace("\r\n", "\n").replace('\r', "\n");
    if normalized.trim().is_empty() {
        return Err(IngestError::EmptyDocument(doc_id.to_string()));
    }
    Ok(Document {
        doc_id: doc_id.to_string(),
        text: normalized,
        source_name: String::new(),
        year: None,
    })
}

const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "vs.", "Inc.", "Corp.", "Ltd.", "U.S.", "Mr.", "Dr.", "no.", "ver.",
];

/// Splits a document into sentences.
///
/// Boundary rule: split after `.`, `!` or `?` followed by whitespace and an
/// uppercase letter or digit, and at blank lines. A terminator never splits
/// inside a listed abbreviation or inside a token matched by the IoC
/// filename/domain/IP patterns, so `dustman.exe` stays whole.
pub fn split_sentences(doc: &Document) -> Vec<Sentence> {
    let chars: Vec<char> = doc.text.chars().collect();
    let guards = ioc::sentence_guard_ranges(&doc.text);
    let mut sentences = Vec::new();

    for (block_start, block_end) in blocks(&chars) {
        let mut seg_start = block_start;
        let mut i = block_start;
        while i < block_end {
            if matches!(chars[i], '.' | '!' | '?') && is_boundary(&chars, i, block_end, &guards) {
                push_trimmed(&chars, seg_start, i + 1, &mut sentences);
                seg_start = i + 1;
            }
            i += 1;
        }
        push_trimmed(&chars, seg_start, block_end, &mut sentences);
    }

    sentences
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Sentence { index, start, end })
        .collect()
}

/// Maximal char ranges not containing a blank (whitespace-only) line.
fn blocks(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut line_start = 0;
    let mut block_start: Option<usize> = None;
    for i in 0..=chars.len() {
        let at_end = i == chars.len();
        if at_end || chars[i] == '\n' {
            let blank = chars[line_start..i].iter().all(|c| c.is_whitespace());
            if blank {
                if let Some(bs) = block_start.take() {
                    out.push((bs, line_start));
                }
            } else if block_start.is_none() {
                block_start = Some(line_start);
            }
            line_start = i + 1;
        }
    }
    if let Some(bs) = block_start {
        out.push((bs, chars.len()));
    }
    out
}

fn is_boundary(chars: &[char], i: usize, block_end: usize, guards: &[(usize, usize)]) -> bool {
    // Whitespace, then an uppercase letter or digit, must follow.
    let mut k = i + 1;
    if k >= block_end || !chars[k].is_whitespace() {
        return false;
    }
    while k < block_end && chars[k].is_whitespace() {
        k += 1;
    }
    if k >= block_end || !(chars[k].is_uppercase() || chars[k].is_ascii_digit()) {
        return false;
    }
    if guards
        .iter()
        .any(|&(gs, ge)| gs <= i && i < ge)
    {
        return false;
    }
    // Token ending at the terminator, with leading quotes/brackets dropped.
    let mut t0 = i;
    while t0 > 0 && !chars[t0 - 1].is_whitespace() {
        t0 -= 1;
    }
    let token: String = chars[t0..=i].iter().collect();
    let token = token.trim_start_matches(|c: char| !c.is_alphanumeric());
    if ABBREVIATIONS
        .iter()
        .any(|a| a.eq_ignore_ascii_case(token))
    {
        return false;
    }
    true
}

fn push_trimmed(chars: &[char], start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let mut s = start;
    let mut e = end;
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    if s < e {
        out.push((s, e));
    }
}

/// Sorted paths of the `*.txt` files in a corpus directory.
pub fn corpus_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, IngestError> {
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Loads every `*.txt` file in a directory as a document. The docId is the
/// filename stem slugged; `meta.tsv`, when present, supplies sourceName and
/// year. Documents are returned sorted by docId.
pub fn load_corpus(dir: &Path) -> Result<Vec<Document>, IngestError> {
    let meta = load_meta(&dir.join("meta.tsv"))?;
    let mut docs: BTreeMap<String, Document> = BTreeMap::new();
    for path in corpus_files(dir)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let doc_id = slug(stem);
        let raw = fs::read_to_string(&path)?;
        let mut doc = load_document(&raw, &doc_id)?;
        doc.source_name = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some((source, year)) = meta.get(&doc_id) {
            if !source.is_empty() {
                doc.source_name = source.clone();
            }
            doc.year = *year;
        }
        if docs.insert(doc_id.clone(), doc).is_some() {
            return Err(IngestError::DuplicateDocId(doc_id));
        }
    }
    Ok(docs.into_values().collect())
}

type MetaMap = BTreeMap<String, (String, Option<i32>)>;

fn load_meta(path: &Path) -> Result<MetaMap, IngestError> {
    let mut out = MetaMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let text = fs::read_to_string(path)?;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if line_no == 1 && cols.first() == Some(&"docId") {
            continue;
        }
        if cols.len() < 2 {
            return Err(IngestError::Meta {
                line: line_no,
                message: "expected docId<TAB>sourceName[<TAB>year]".to_string(),
            });
        }
        let year = match cols.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(y) => Some(y.parse::<i32>().map_err(|_| IngestError::Meta {
                line: line_no,
                message: format!("invalid year {:?}", y),
            })?),
        };
        out.insert(cols[0].to_string(), (cols[1].to_string(), year));
    }
    Ok(out)
}
