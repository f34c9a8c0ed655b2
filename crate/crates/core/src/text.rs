//! Small text helpers shared across the pipeline.
//!
//! All document offsets in this crate count Unicode scalar values, matching
//! the Brat standoff convention, while Rust string APIs work in bytes;
//! [`CharIndex`] converts between the two.

/// Lowercases and replaces runs of non-alphanumerics with a single `-`,
/// trimming leading/trailing dashes.
pub fn slug(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_dash = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_dash && !out.is_empty() {
                out.push('-');
            }
            pending_dash = false;
            for low in ch.to_lowercase() {
                out.push(low);
            }
        } else {
            pending_dash = true;
        }
    }
    out
}

/// Maps between char (Unicode scalar value) offsets and byte offsets of one
/// string. Built once per document and reused for every span lookup.
pub struct CharIndex {
    /// Byte offset of each char, plus a final entry holding `text.len()`.
    byte_of_char: Vec<usize>,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        let mut byte_of_char: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        byte_of_char.push(text.len());
        CharIndex { byte_of_char }
    }

    /// Number of chars in the indexed text.
    pub fn char_len(&self) -> usize {
        self.byte_of_char.len() - 1
    }

    /// Byte offset of char offset `idx`; `idx` may equal `char_len()`.
    pub fn byte(&self, idx: usize) -> Option<usize> {
        self.byte_of_char.get(idx).copied()
    }

    /// Slices `text` by char offsets. Returns None when out of bounds.
    pub fn slice<'t>(&self, text: &'t str, start: usize, end: usize) -> Option<&'t str> {
        if start > end {
            return None;
        }
        let b0 = self.byte(start)?;
        let b1 = self.byte(end)?;
        text.get(b0..b1)
    }

    /// Char offset of byte offset `b`, which must fall on a char boundary.
    pub fn char_at_byte(&self, b: usize) -> usize {
        match self.byte_of_char.binary_search(&b) {
            Ok(idx) => idx,
            Err(idx) => idx, // between boundaries: callers pass regex match bounds
        }
    }
}

/// Percent-encodes everything outside the RFC 3986 unreserved set, so the
/// result is safe as a single URI path segment.
pub fn percent_encode(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for byte in text.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' => {
                out.push(byte as char)
            }
            _ => {
                out.push('%');
                out.push_str(&format!("{:02X}", byte));
            }
        }
    }
    out
}

/// Inverse of [`percent_encode`]. Returns None for malformed escapes or
/// invalid UTF-8.
pub fn percent_decode(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = bytes.get(i + 1..i + 3)?;
            let hex = std::str::from_utf8(hex).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// Strips one layer of surrounding quote or bracket characters, plus
/// whitespace, from both ends. Curly quotes from report text are included.
pub fn trim_punct(text: &str) -> &str {
    let junk = |c: char| {
        c.is_whitespace()
            || matches!(
                c,
                '"' | '\'' | '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}' | '(' | ')' | '['
                    | ']' | '{' | '}' | '<' | '>' | '\u{00ab}' | '\u{00bb}'
            )
    };
    text.trim_matches(junk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slug_collapses_runs_and_trims() {
        assert_eq!(slug("Turla Driver Loader (TDL)"), "turla-driver-loader-tdl");
        assert_eq!(slug("DUSTMAN"), "dustman");
        assert_eq!(slug("  --a__b--  "), "a-b");
        assert_eq!(slug("Operation Aurora"), "operation-aurora");
    }

    #[test]
    fn char_index_handles_multibyte() {
        let text = "a\u{201c}b\u{201d}c";
        let idx = CharIndex::new(text);
        assert_eq!(idx.char_len(), 5);
        assert_eq!(idx.slice(text, 1, 4), Some("\u{201c}b\u{201d}"));
        assert_eq!(idx.slice(text, 0, 5), Some(text));
        assert_eq!(idx.slice(text, 4, 6), None);
    }

    #[test]
    fn trim_punct_strips_curly_quotes() {
        assert_eq!(trim_punct("\u{201c}dustman.exe\u{201d}"), "dustman.exe");
        assert_eq!(trim_punct(" \"Aurora\" "), "Aurora");
        assert_eq!(trim_punct("plain"), "plain");
    }

    #[test]
    fn percent_round_trip() {
        for s in ["dustman.exe", "a b>c", "http://evil.com/x?y=1", "naïve"] {
            let enc = percent_encode(s);
            assert!(enc
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_' | '~' | '%')));
            assert_eq!(percent_decode(&enc).as_deref(), Some(s));
        }
        assert_eq!(percent_encode("a>b"), "a%3Eb");
        assert!(percent_decode("%zz").is_none());
    }
}
