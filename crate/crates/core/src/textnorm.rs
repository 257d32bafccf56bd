//! Text ingestion: NFKC normalization, control stripping and whitespace
//! collapsing, plus a line reader for newline-delimited corpora.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// A line of text that has been through [`normalize`].
///
/// Contains no control characters, no runs of spaces, no leading or trailing
/// whitespace, and is a fixed point of normalization.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NormalizedText {
    text: String,
    source_line: usize,
}

impl NormalizedText {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// 1-based line number in the originating corpus, 0 when not read from a file.
    pub fn source_line(&self) -> usize {
        self.source_line
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

impl fmt::Display for NormalizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl AsRef<str> for NormalizedText {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

/// Normalizes raw bytes. Invalid UTF-8 is an error, never replaced.
pub fn normalize(raw: &[u8]) -> Result<NormalizedText> {
    let s = std::str::from_utf8(raw).map_err(|_| Error::InvalidEncoding { line: 0 })?;
    Ok(normalize_str(s))
}

pub fn normalize_str(raw: &str) -> NormalizedText {
    normalize_line(raw, 0)
}

fn normalize_line(raw: &str, source_line: usize) -> NormalizedText {
    let mut text = single_pass(raw);
    // Composition across a removed control or collapsed space can expose new
    // NFKC work; iterate to the fixed point.
    for _ in 0..4 {
        let again = single_pass(&text);
        if again == text {
            break;
        }
        text = again;
    }
    NormalizedText { text, source_line }
}

fn single_pass(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else if c.is_control() {
                None
            } else {
                Some(c)
            }
        })
        .collect();

    let mut out = String::with_capacity(cleaned.len());
    let mut pending_space = false;
    for c in cleaned.nfkc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if !c.is_control() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// Streams normalized, non-empty lines of a newline-delimited UTF-8 file.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(CorpusReader {
        lines: BufReader::new(file).split(b'\n'),
        path,
        line_no: 0,
    })
}

/// Reads a whole corpus into memory.
pub fn read_corpus_lines(path: impl AsRef<Path>) -> Result<Vec<NormalizedText>> {
    read_corpus(path)?.collect()
}

/// Iterator returned by [`read_corpus`].
pub struct CorpusReader {
    lines: std::io::Split<BufReader<File>>,
    path: PathBuf,
    line_no: usize,
}

impl Iterator for CorpusReader {
    type Item = Result<NormalizedText>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut bytes = match self.lines.next()? {
                Ok(b) => b,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if bytes.last() == Some(&b'\r') {
                bytes.pop();
            }
            let s = match std::str::from_utf8(&bytes) {
                Ok(s) => s,
                Err(_) => return Some(Err(Error::InvalidEncoding { line: self.line_no })),
            };
            let norm = normalize_line(s, self.line_no);
            if !norm.is_empty() {
                return Some(Ok(norm));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn ascii_is_fixed_point() {
        assert_eq!(normalize_str("hello").as_str(), "hello");
    }

    #[test]
    fn fullwidth_and_ideographic_space() {
        assert_eq!(normalize_str("Ａ\u{3000}Ｂ").as_str(), "A B");
    }

    #[test]
    fn cjk_passes_through() {
        let s = "他是一个爱调皮捣蛋的孩子。";
        assert_eq!(normalize_str(s).as_str(), s);
    }

    #[test]
    fn controls_and_whitespace() {
        assert_eq!(normalize_str("  a\t\tb\u{7}c \r\n ").as_str(), "a bc");
        assert_eq!(normalize_str("\u{0}\u{1b}").as_str(), "");
    }

    #[test]
    fn combining_mark_across_removed_control() {
        let once = normalize_str("e\u{7}\u{301}");
        assert_eq!(once.as_str(), "\u{e9}");
        assert_eq!(normalize_str(once.as_str()), once);
    }

    #[test]
    fn invalid_utf8_is_rejected() {
        assert!(matches!(
            normalize(b"ab\xffcd"),
            Err(Error::InvalidEncoding { .. })
        ));
    }

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn corpus_skips_empty_lines() {
        let f = write_tmp(b"abc\n\n  \n");
        let lines = read_corpus_lines(f.path()).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].as_str(), "abc");
        assert_eq!(lines[0].source_line(), 1);
    }

    #[test]
    fn corpus_preserves_order_and_strips_cr() {
        let f =
            write_tmp("规范调用函数接口。\r\n公司调整了战略。\r\n婴儿的皮肤很细腻。".as_bytes());
        let lines: Vec<String> = read_corpus_lines(f.path())
            .unwrap()
            .into_iter()
            .map(NormalizedText::into_string)
            .collect();
        assert_eq!(
            lines,
            [
                "规范调用函数接口。",
                "公司调整了战略。",
                "婴儿的皮肤很细腻。"
            ]
        );
    }

    #[test]
    fn corpus_reports_bad_line() {
        let mut bytes = Vec::new();
        for i in 1..=6 {
            bytes.extend_from_slice(format!("line {i}\n").as_bytes());
        }
        bytes.extend_from_slice(b"bad \xc3\x28 byte\nline 8\n");
        let f = write_tmp(&bytes);
        let err = read_corpus_lines(f.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidEncoding { line: 7 }), "{err:?}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_corpus("/nonexistent/corpus.txt"),
            Err(Error::Io { .. })
        ));
    }

    fn is_cjk(c: char) -> bool {
        ('\u{4e00}'..='\u{9fff}').contains(&c)
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC{0,40}|[ \t\r\n\u{3000}a-zＡ-Ｚ\u{301}\u{7}一-龥]{0,40}") {
            let once = normalize_str(&s);
            let twice = normalize_str(once.as_str());
            prop_assert_eq!(&once, &twice);
            prop_assert!(!once.as_str().chars().any(|c| c.is_control()));
            prop_assert!(!once.as_str().contains("  "));
            prop_assert_eq!(once.as_str().trim(), once.as_str());
        }

        #[test]
        fn cjk_order_preserved(s in "[ \t一-龥a-z，。\u{3000}]{0,60}") {
            let out = normalize_str(&s);
            let before: Vec<char> = s.chars().filter(|&c| is_cjk(c)).collect();
            let after: Vec<char> = out.as_str().chars().filter(|&c| is_cjk(c)).collect();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn line_count_matches_nonempty(lines in proptest::collection::vec("[ \ta-c]{0,5}", 0..20)) {
            let content = lines.join("\n");
            let f = write_tmp(content.as_bytes());
            let expected = lines.iter().filter(|l| !l.trim().is_empty()).count();
            prop_assert_eq!(read_corpus_lines(f.path()).unwrap().len(), expected);
        }
    }
}
