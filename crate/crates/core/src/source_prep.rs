//! Source preparation: keep vulnerable functions out-of-line.
//!
//! Function definitions are located lexically (comments, string literals and
//! preprocessor lines are blanked first) and the `__attribute__((noinline))`
//! tag is inserted before each definition header.

use log::warn;
use serde::Serialize;
use thiserror::Error;

pub const NOINLINE_TAG: &str = "__attribute__((noinline))";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrepError {
    #[error("no definition found for function `{0}`")]
    NameNotFound(String),
    #[error("function `{0}` has multiple definitions")]
    AmbiguousDefinition(String),
    #[error("span for `{name}` points at line {line}:{column}, outside the source")]
    SpanOutOfRange {
        name: String,
        line: usize,
        column: usize,
    },
}

/// Location of one function definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunctionSpan {
    pub name: String,
    /// Line holding the function name.
    pub start_line: usize,
    /// Line where the definition header (return type) begins.
    pub signature_line: usize,
    /// Byte offset of the header's first token within `signature_line`.
    pub header_column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    text: String,
    line: usize,
    column: usize,
}

impl Token {
    fn is_ident(&self) -> bool {
        self.text
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
    }
}

/// Replace comments, string/char literals and preprocessor directives with
/// spaces so that byte offsets and line numbers are preserved.
fn blank_non_code(src: &str) -> Vec<u8> {
    let b = src.as_bytes();
    let mut out = b.to_vec();
    let mut i = 0;
    let mut line_start = true;
    let blank = |out: &mut [u8], from: usize, to: usize| {
        for c in &mut out[from..to] {
            if *c != b'\n' {
                *c = b' ';
            }
        }
    };
    while i < b.len() {
        let c = b[i];
        if line_start && c == b'#' {
            let start = i;
            while i < b.len() && b[i] != b'\n' {
                if b[i] == b'\\' && i + 1 < b.len() && b[i + 1] == b'\n' {
                    i += 1;
                }
                i += 1;
            }
            blank(&mut out, start, i);
            continue;
        }
        if c == b'/' && b.get(i + 1) == Some(&b'/') {
            let start = i;
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
            blank(&mut out, start, i);
            continue;
        }
        if c == b'/' && b.get(i + 1) == Some(&b'*') {
            let start = i;
            i += 2;
            while i < b.len() && !(b[i] == b'*' && b.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(b.len());
            blank(&mut out, start, i);
            line_start = false;
            continue;
        }
        if c == b'"' || c == b'\'' {
            let start = i;
            i += 1;
            while i < b.len() && b[i] != c && b[i] != b'\n' {
                if b[i] == b'\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(b.len());
            blank(&mut out, start, i);
            line_start = false;
            continue;
        }
        if c == b'\n' {
            line_start = true;
        } else if !c.is_ascii_whitespace() {
            line_start = false;
        }
        i += 1;
    }
    out
}

fn tokenize(src: &str) -> Vec<Token> {
    let code = blank_non_code(src);
    let mut toks = Vec::new();
    let (mut line, mut line_start) = (1usize, 0usize);
    let mut i = 0;
    while i < code.len() {
        let c = code[i];
        if c == b'\n' {
            line += 1;
            line_start = i + 1;
            i += 1;
        } else if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphanumeric() || c == b'_' {
            let start = i;
            while i < code.len() && (code[i].is_ascii_alphanumeric() || code[i] == b'_') {
                i += 1;
            }
            toks.push(Token {
                text: String::from_utf8_lossy(&code[start..i]).into_owned(),
                line,
                column: start - line_start,
            });
        } else {
            let two = code.get(i..i + 2);
            let len = if matches!(two, Some(b"::") | Some(b"->")) { 2 } else { 1 };
            toks.push(Token {
                text: String::from_utf8_lossy(&code[i..i + len]).into_owned(),
                line,
                column: i - line_start,
            });
            i += len;
        }
    }
    toks
}

fn skip_group(toks: &[Token], open_at: usize) -> Option<usize> {
    let mut depth = 0i32;
    for (k, t) in toks.iter().enumerate().skip(open_at) {
        match t.text.as_str() {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    return Some(k + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// True when the identifier at `at` starts a definition: a parameter list,
/// then only qualifiers / attribute groups, then `{`.
fn is_definition(toks: &[Token], at: usize) -> bool {
    if at > 0 && matches!(toks[at - 1].text.as_str(), "." | "->") {
        return false;
    }
    if toks.get(at + 1).map(|t| t.text.as_str()) != Some("(") {
        return false;
    }
    let Some(mut k) = skip_group(toks, at + 1) else {
        return false;
    };
    while let Some(t) = toks.get(k) {
        match t.text.as_str() {
            "{" => return true,
            "(" => match skip_group(toks, k) {
                Some(next) => k = next,
                None => return false,
            },
            _ if t.is_ident() => k += 1,
            _ => return false,
        }
    }
    false
}

/// Walk back from the name over the return type and qualifiers.
fn header_start(toks: &[Token], at: usize) -> usize {
    let mut k = at;
    while k > 0 {
        let t = &toks[k - 1];
        let part_of_type = t.is_ident()
            || matches!(t.text.as_str(), "*" | "&" | "::" | "<" | ">" | "~");
        if !part_of_type {
            break;
        }
        k -= 1;
    }
    k
}

pub fn locate_function_definitions(
    source_text: &str,
    names: &[&str],
) -> Result<Vec<FunctionSpan>, PrepError> {
    let toks = tokenize(source_text);
    let mut spans = Vec::with_capacity(names.len());
    for &name in names {
        let mut found: Option<FunctionSpan> = None;
        for (at, t) in toks.iter().enumerate() {
            if t.text != name || !is_definition(&toks, at) {
                continue;
            }
            if found.is_some() {
                return Err(PrepError::AmbiguousDefinition(name.to_owned()));
            }
            let head = &toks[header_start(&toks, at)];
            found = Some(FunctionSpan {
                name: name.to_owned(),
                start_line: t.line,
                signature_line: head.line,
                header_column: head.column,
            });
        }
        spans.push(found.ok_or_else(|| PrepError::NameNotFound(name.to_owned()))?);
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSource {
    pub text: String,
    /// Functions whose header already carried the tag.
    pub already_tagged: Vec<String>,
}

/// Insert the no-inline tag (plus one space) before each span's header.
/// Headers already preceded by the tag are left alone and reported.
pub fn insert_noinline_tags(
    source_text: &str,
    spans: &[FunctionSpan],
) -> Result<TaggedSource, PrepError> {
    let mut lines: Vec<String> = source_text.split('\n').map(str::to_owned).collect();
    let mut order: Vec<&FunctionSpan> = spans.iter().collect();
    // Right-to-left so earlier insertions never shift later columns.
    order.sort_by(|a, b| {
        (b.signature_line, b.header_column).cmp(&(a.signature_line, a.header_column))
    });
    order.dedup_by(|a, b| a.signature_line == b.signature_line && a.header_column == b.header_column);
    let mut already_tagged = Vec::new();
    for span in order {
        let out_of_range = || PrepError::SpanOutOfRange {
            name: span.name.clone(),
            line: span.signature_line,
            column: span.header_column,
        };
        if span.signature_line == 0 {
            return Err(out_of_range());
        }
        let line = lines
            .get_mut(span.signature_line - 1)
            .ok_or_else(out_of_range)?;
        if span.header_column > line.len() || !line.is_char_boundary(span.header_column) {
            return Err(out_of_range());
        }
        if line[..span.header_column].trim_end().ends_with(NOINLINE_TAG) {
            warn!("`{}` already carries {NOINLINE_TAG}; skipped", span.name);
            already_tagged.push(span.name.clone());
            continue;
        }
        line.insert_str(span.header_column, &format!("{NOINLINE_TAG} "));
    }
    already_tagged.sort();
    Ok(TaggedSource {
        text: lines.join("\n"),
        already_tagged,
    })
}

/// Locate and tag in one step.
pub fn prepare_source(source_text: &str, names: &[&str]) -> Result<TaggedSource, PrepError> {
    let spans = locate_function_definitions(source_text, names)?;
    insert_noinline_tags(source_text, &spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(name: &str, start: usize, sig: usize, col: usize) -> FunctionSpan {
        FunctionSpan {
            name: name.into(),
            start_line: start,
            signature_line: sig,
            header_column: col,
        }
    }

    #[test]
    fn single_definition() {
        let s = locate_function_definitions("int f(int x) { return x; }", &["f"]).unwrap();
        assert_eq!(s, vec![span("f", 1, 1, 0)]);
    }

    #[test]
    fn declaration_is_skipped() {
        let s = locate_function_definitions("void g();\nvoid g() {\n}\n", &["g"]).unwrap();
        assert_eq!(s, vec![span("g", 2, 2, 0)]);
    }

    #[test]
    fn missing_and_ambiguous() {
        assert_eq!(
            locate_function_definitions("int f() {return 0;}", &["h"]),
            Err(PrepError::NameNotFound("h".into()))
        );
        assert_eq!(
            locate_function_definitions("static int f() {}\nstatic int f() {}\n", &["f"]),
            Err(PrepError::AmbiguousDefinition("f".into()))
        );
    }

    #[test]
    fn calls_comments_and_strings_are_not_definitions() {
        let src = "\
// int f(void) { }
const char *s = \"f() {\";
#define F f() {
int main(void) {
    if (f(1)) { return 1; }
    f(2);
}
static
int
f(int x)
{
    return x;
}
";
        let s = locate_function_definitions(src, &["f", "main"]).unwrap();
        assert_eq!(s[0], span("f", 10, 8, 0));
        assert_eq!(s[1], span("main", 4, 4, 0));
    }

    #[test]
    fn tag_insertion() {
        let src = "int f() { return 0; }";
        let spans = locate_function_definitions(src, &["f"]).unwrap();
        let out = insert_noinline_tags(src, &spans).unwrap();
        assert_eq!(out.text, "__attribute__((noinline)) int f() { return 0; }");
        assert_eq!(insert_noinline_tags(src, &[]).unwrap().text, src);
    }

    #[test]
    fn mid_line_header() {
        let src = "struct s; int f(void) { return 1; }";
        let spans = locate_function_definitions(src, &["f"]).unwrap();
        assert_eq!(spans[0].header_column, 10);
        let out = insert_noinline_tags(src, &spans).unwrap();
        assert_eq!(out.text, "struct s; __attribute__((noinline)) int f(void) { return 1; }");
    }

    #[test]
    fn round_trip_and_idempotence() {
        let src = "int a(void)\n{\n  return b(1);\n}\n\nstatic long b(int x) { return x; }\n";
        let spans = locate_function_definitions(src, &["a", "b"]).unwrap();
        let once = insert_noinline_tags(src, &spans).unwrap();
        assert!(once.already_tagged.is_empty());
        assert_eq!(once.text.lines().count(), src.lines().count());
        assert_eq!(once.text.replace("__attribute__((noinline)) ", ""), src);

        let again = locate_function_definitions(&once.text, &["a", "b"]).unwrap();
        assert_eq!(again.len(), 2);
        let twice = insert_noinline_tags(&once.text, &again).unwrap();
        assert_eq!(twice.text, once.text);
        assert_eq!(twice.already_tagged, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn span_out_of_range() {
        let e = insert_noinline_tags("int f() {}", &[span("f", 3, 3, 0)]).unwrap_err();
        assert!(matches!(e, PrepError::SpanOutOfRange { line: 3, .. }));
    }
}
