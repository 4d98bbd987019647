//! Minimal N-Triples front-end.
//!
//! IRIs lose their angle brackets, blank nodes keep their `_:` label, and
//! triples whose object is a literal are skipped (entity-to-entity graphs only).

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::GraphBuilder;

#[derive(Debug, PartialEq, Eq)]
enum Term<'a> {
    Iri(&'a str),
    Blank(&'a str),
    Literal,
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.s[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.s[self.pos..].chars().next()
    }

    fn term(&mut self) -> std::result::Result<Term<'a>, String> {
        self.skip_ws();
        let rest = &self.s[self.pos..];
        match self.peek() {
            Some('<') => {
                let end = rest.find('>').ok_or("unterminated IRI")?;
                self.pos += end + 1;
                Ok(Term::Iri(&rest[1..end]))
            }
            Some('_') if rest.starts_with("_:") => {
                let end = rest.find(|c: char| c.is_whitespace()).unwrap_or(rest.len());
                self.pos += end;
                Ok(Term::Blank(&rest[..end]))
            }
            Some('"') => {
                let bytes = rest.as_bytes();
                let mut i = 1;
                loop {
                    match bytes.get(i) {
                        None => return Err("unterminated literal".into()),
                        Some(b'\\') => i += 2,
                        Some(b'"') => break,
                        Some(_) => i += 1,
                    }
                }
                i += 1;
                let tail = &rest[i..];
                if tail.starts_with("^^<") {
                    let end = tail.find('>').ok_or("unterminated datatype IRI")?;
                    i += end + 1;
                } else if tail.starts_with('@') {
                    let end = tail
                        .find(|c: char| c.is_whitespace() || c == '.')
                        .unwrap_or(tail.len());
                    i += end;
                }
                self.pos += i;
                Ok(Term::Literal)
            }
            Some(c) => Err(format!("unexpected character `{c}`")),
            None => Err("unexpected end of line".into()),
        }
    }
}

fn label<'a>(t: &Term<'a>) -> Option<&'a str> {
    match t {
        Term::Iri(s) | Term::Blank(s) => Some(s),
        Term::Literal => None,
    }
}

pub(crate) fn parse_into(
    text: &str,
    path: &Path,
    builder: &mut GraphBuilder,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let mut literals = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut c = Cursor { s: trimmed, pos: 0 };
        let s = c.term().map_err(err)?;
        let p = c.term().map_err(err)?;
        let o = c.term().map_err(err)?;
        c.skip_ws();
        if c.peek() != Some('.') {
            return Err(err("expected terminating `.`".into()));
        }
        let (Some(s), Some(p)) = (label(&s), label(&p)) else {
            return Err(err("literal in subject or predicate position".into()));
        };
        if p.starts_with("_:") {
            return Err(err("blank node in predicate position".into()));
        }
        match label(&o) {
            Some(o) => {
                builder.add_triple(s, p, o);
            }
            None => literals += 1,
        }
    }
    if literals > 0 {
        warnings.push(format!(
            "{}: skipped {literals} triple(s) with literal objects",
            path.display()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphFormat, KnowledgeGraph};

    fn parse(text: &str) -> Result<(KnowledgeGraph, Vec<String>)> {
        let mut b = GraphBuilder::new();
        let mut w = Vec::new();
        parse_into(text, Path::new("mem.nt"), &mut b, &mut w)?;
        Ok((b.build(), w))
    }

    #[test]
    fn iris_and_literals() {
        let text = r#"
<http://ex.org/a> <http://ex.org/knows> <http://ex.org/b> .
<http://ex.org/a> <http://ex.org/name> "Alice \"A\" Smith"@en .
<http://ex.org/b> <http://ex.org/age> "42"^^<http://www.w3.org/2001/XMLSchema#int> .
_:n1 <http://ex.org/knows> <http://ex.org/a> .
<http://ex.org/a> <http://ex.org/knows> <http://ex.org/b> .
"#;
        let (kg, w) = parse(text).unwrap();
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!(kg.num_edges(), 2);
        assert!(kg.entity_id("http://ex.org/a").is_ok());
        assert!(kg.entity_id("_:n1").is_ok());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn missing_dot_is_an_error() {
        let err = parse("<a> <b> <c>\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse("<a> <b> <c> .\n<a> <b>\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.nt");
        std::fs::write(&p, "<a> <r> <b> .\n<b> <s> <c> .\n").unwrap();
        let (kg, _) = KnowledgeGraph::load(&p, None, GraphFormat::Ntriples).unwrap();
        assert_eq!((kg.num_entities(), kg.num_edges()), (3, 2));
    }
}
