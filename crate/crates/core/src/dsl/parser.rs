//! LL(1) recursive-descent parser and canonical formatter for predictor formulas.
//!
//! ```text
//! expr   := block ('+' block)*
//! block  := group ('*' group)*
//! group  := term | '(' term ('+' term)* ')'
//! term   := ident '(' ident (',' ident)* ')'
//! ```

use std::fmt;

use thiserror::Error;

use super::ast::{BlockNode, FactorNode, ModelAst, TermNode};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", .expected.join(" or "))]
pub struct ParseError {
    /// 0-based byte offset of the offending token.
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok<'a> {
    Ident(&'a str),
    LParen,
    RParen,
    Comma,
    Plus,
    Star,
    Invalid(char),
    End,
}

impl fmt::Display for Tok<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Invalid(c) => write!(f, "character {c:?}"),
            Tok::End => f.write_str("end of input"),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    peeked: Option<(usize, Tok<'a>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src,
            pos: 0,
            peeked: None,
        }
    }

    /// Returns (start offset, token, end offset) without consuming.
    fn peek(&mut self) -> (usize, Tok<'a>) {
        if self.peeked.is_none() {
            self.peeked = Some(self.lex());
        }
        let (s, t, _) = self.peeked.clone().unwrap();
        (s, t)
    }

    fn bump(&mut self) -> (usize, Tok<'a>) {
        let (s, t, e) = match self.peeked.take() {
            Some(p) => p,
            None => self.lex(),
        };
        self.pos = e;
        (s, t)
    }

    fn lex(&self) -> (usize, Tok<'a>, usize) {
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            return (i, Tok::End, i);
        }
        let single = |t| (i, t, i + 1);
        match bytes[i] {
            b'(' => single(Tok::LParen),
            b')' => single(Tok::RParen),
            b',' => single(Tok::Comma),
            b'+' => single(Tok::Plus),
            b'*' => single(Tok::Star),
            b if b.is_ascii_alphabetic() || b == b'_' => {
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                (i, Tok::Ident(&self.src[i..j]), j)
            }
            _ => {
                let c = self.src[i..].chars().next().unwrap();
                (i, Tok::Invalid(c), i + c.len_utf8())
            }
        }
    }

    fn fail<T>(&mut self, expected: &[&'static str]) -> Result<T, ParseError> {
        let (offset, tok) = self.peek();
        Err(ParseError {
            offset,
            expected: expected.to_vec(),
            found: tok.to_string(),
        })
    }

    fn expect(&mut self, want: Tok<'static>, name: &'static str) -> Result<(), ParseError> {
        if self.peek().1 == want {
            self.bump();
            Ok(())
        } else {
            self.fail(&[name])
        }
    }

    fn ident(&mut self) -> Result<&'a str, ParseError> {
        match self.peek().1 {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.fail(&["identifier"]),
        }
    }

    fn expr(&mut self) -> Result<ModelAst, ParseError> {
        let mut blocks = vec![self.block()?];
        loop {
            match self.peek().1 {
                Tok::Plus => {
                    self.bump();
                    blocks.push(self.block()?);
                }
                Tok::End => return Ok(ModelAst { blocks }),
                _ => return self.fail(&["`+`", "`*`", "end of input"]),
            }
        }
    }

    fn block(&mut self) -> Result<BlockNode, ParseError> {
        let mut factors = vec![self.group()?];
        while self.peek().1 == Tok::Star {
            self.bump();
            factors.push(self.group()?);
        }
        Ok(BlockNode { factors })
    }

    fn group(&mut self) -> Result<FactorNode, ParseError> {
        match self.peek().1 {
            Tok::LParen => {
                self.bump();
                let mut terms = vec![self.term()?];
                loop {
                    match self.peek().1 {
                        Tok::Plus => {
                            self.bump();
                            terms.push(self.term()?);
                        }
                        Tok::RParen => {
                            self.bump();
                            return Ok(FactorNode { terms });
                        }
                        _ => return self.fail(&["`+`", "`)`"]),
                    }
                }
            }
            Tok::Ident(_) => Ok(FactorNode {
                terms: vec![self.term()?],
            }),
            _ => self.fail(&["identifier", "`(`"]),
        }
    }

    fn term(&mut self) -> Result<TermNode, ParseError> {
        let func = self.ident()?.to_string();
        self.expect(Tok::LParen, "`(`")?;
        let mut vars = vec![self.ident()?.to_string()];
        loop {
            match self.peek().1 {
                Tok::Comma => {
                    self.bump();
                    vars.push(self.ident()?.to_string());
                }
                Tok::RParen => {
                    self.bump();
                    return Ok(TermNode { func, vars });
                }
                _ => return self.fail(&["`,`", "`)`"]),
            }
        }
    }
}

/// Parses a formula into its abstract tree. Whitespace is insignificant.
pub fn parse(text: &str) -> Result<ModelAst, ParseError> {
    Parser::new(text).expr()
}

/// Canonical text for an AST; `parse(&format(a)) == a` for every valid tree.
pub fn format(ast: &ModelAst) -> String {
    let term = |t: &TermNode| format!("{}({})", t.func, t.vars.join(","));
    ast.blocks
        .iter()
        .map(|b| {
            b.factors
                .iter()
                .map(|f| {
                    if f.terms.len() == 1 {
                        term(&f.terms[0])
                    } else {
                        let inner: Vec<String> = f.terms.iter().map(term).collect();
                        format!("({})", inner.join("+"))
                    }
                })
                .collect::<Vec<_>>()
                .join("*")
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

impl fmt::Display for ModelAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(ast: &ModelAst) -> Vec<Vec<Vec<&str>>> {
        ast.blocks
            .iter()
            .map(|b| {
                b.factors
                    .iter()
                    .map(|f| f.terms.iter().map(|t| t.func.as_str()).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn parses_two_blocks() {
        let a = parse("f1(x1)*f2(x2) + f3(x3)").unwrap();
        assert_eq!(shape(&a), vec![vec![vec!["f1"], vec!["f2"]], vec![vec!["f3"]]]);
        assert_eq!(a.blocks[0].factors[1].terms[0].vars, vec!["x2"]);
    }

    #[test]
    fn parses_single_term() {
        let a = parse("f3(x3)").unwrap();
        assert_eq!(shape(&a), vec![vec![vec!["f3"]]]);
    }

    #[test]
    fn parses_nested_sum() {
        let a = parse("(f1(x1)+lin2(x2))*f3(x3) + lin4(x4)").unwrap();
        assert_eq!(
            shape(&a),
            vec![vec![vec!["f1", "lin2"], vec!["f3"]], vec![vec!["lin4"]]]
        );
    }

    #[test]
    fn formats_canonically() {
        for s in [
            "f1(x1)*f2(x2) + f3(x3)",
            "f3(x3)",
            "(f1(x1)+lin2(x2))*f3(x3)",
            "g(a,b)",
        ] {
            assert_eq!(format(&parse(s).unwrap()), s);
        }
        assert_eq!(
            format(&parse("  ( f(x) ) *g( y ,z)+h(w)").unwrap()),
            "f(x)*g(y,z) + h(w)"
        );
    }

    #[test]
    fn errors_carry_offsets() {
        let cases: [(&str, usize); 9] = [
            ("", 0),
            ("f(x", 3),
            ("f(x) +", 6),
            ("f()", 2),
            ("f(x) - g(y)", 5),
            ("(f(x)*g(y))", 5),
            ("f(x) g(y)", 5),
            ("f x", 2),
            ("f(x) + é(y)", 7),
        ];
        for (src, offset) in cases {
            let err = parse(src).unwrap_err();
            assert_eq!(err.offset, offset, "{src:?}: {err}");
            assert!(!err.expected.is_empty());
        }
    }

    #[test]
    fn error_message_mentions_expected_set() {
        let err = parse("f(x) +").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 6"), "{msg}");
        assert!(msg.contains("identifier"), "{msg}");
    }
}
