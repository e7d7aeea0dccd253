//! Recursive-descent parser for polynomial expressions.
//!
//! Grammar: real literals (with optional exponent), variable names, `+ - * ^`
//! with non-negative integer exponents, and parentheses.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::poly::{var, Poly, Var};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Token::Plus));
                i += 1;
            }
            '-' => {
                out.push((i, Token::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Token::Star));
                i += 1;
            }
            '^' => {
                out.push((i, Token::Caret));
                i += 1;
            }
            '(' => {
                out.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Token::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // optional exponent part
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit.parse().map_err(|_| Error::Parse {
                    pos: start,
                    msg: format!("invalid number literal `{lit}`"),
                })?;
                out.push((start, Token::Num(v)));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push((start, Token::Ident(text[start..i].to_string())));
            }
            _ => {
                return Err(Error::Parse {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    allowed: &'a BTreeSet<Var>,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Poly<f64>> {
        let mut acc = if self.peek() == Some(&Token::Minus) {
            self.bump();
            self.term()?.neg()
        } else {
            self.term()?
        };
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.bump();
                    acc = acc.add(&self.term()?);
                }
                Some(Token::Minus) => {
                    self.bump();
                    acc = acc.sub(&self.term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Poly<f64>> {
        let mut acc = self.factor()?;
        while self.peek() == Some(&Token::Star) {
            self.bump();
            acc = acc.mul(&self.factor()?);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Poly<f64>> {
        let mut neg = false;
        while self.peek() == Some(&Token::Minus) {
            self.bump();
            neg = !neg;
        }
        let base = self.atom()?;
        let p = if self.peek() == Some(&Token::Caret) {
            self.bump();
            let pos = self.here();
            match self.bump() {
                Some(Token::Num(n)) => {
                    if n.fract() != 0.0 || n < 0.0 {
                        return Err(Error::Parse {
                            pos,
                            msg: format!("exponent must be a non-negative integer, got {n}"),
                        });
                    }
                    base.pow(n as u32)
                }
                _ => {
                    return Err(Error::Parse {
                        pos,
                        msg: "expected integer exponent after `^`".into(),
                    })
                }
            }
        } else {
            base
        };
        Ok(if neg { p.neg() } else { p })
    }

    fn atom(&mut self) -> Result<Poly<f64>> {
        let pos = self.here();
        match self.bump() {
            Some(Token::Num(v)) => Ok(Poly::constant(v)),
            Some(Token::Ident(name)) => {
                let v = var(&name);
                if !self.allowed.contains(&v) {
                    return Err(Error::UnknownVariable(name));
                }
                Ok(Poly::var(&v))
            }
            Some(Token::LParen) => {
                let inner = self.expr()?;
                if self.peek() == Some(&Token::RParen) {
                    self.bump();
                    Ok(inner)
                } else {
                    Err(Error::Parse {
                        pos: self.here(),
                        msg: "unbalanced parenthesis".into(),
                    })
                }
            }
            Some(t) => Err(Error::Parse {
                pos,
                msg: format!("unexpected token {t:?}"),
            }),
            None => Err(Error::Parse {
                pos,
                msg: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Parse `text` into a polynomial over `allowed_vars`.
pub fn parse_polynomial(text: &str, allowed_vars: &BTreeSet<Var>) -> Result<Poly<f64>> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        allowed: allowed_vars,
        end: text.len(),
    };
    let p = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(Error::Parse {
            pos: parser.here(),
            msg: "trailing input after expression".into(),
        });
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::point;

    fn vars(names: &[&str]) -> BTreeSet<Var> {
        names.iter().map(|s| var(s)).collect()
    }

    #[test]
    fn parses_example_dynamics() {
        let p = parse_polynomial("x + 0.01*(-x - x^2 + u)", &vars(&["x", "u"])).unwrap();
        // equals 0.99x - 0.01x^2 + 0.01u
        let q = parse_polynomial("0.99*x - 0.01*x^2 + 0.01*u", &vars(&["x", "u"])).unwrap();
        assert!(p.sub(&q).max_abs_coeff() < 1e-15);
    }

    #[test]
    fn parses_simple_quadratic() {
        let p = parse_polynomial("x^2 - 1", &vars(&["x"])).unwrap();
        assert_eq!(p.eval(&point(&[("x", 3.0)])).unwrap(), 8.0);
    }

    #[test]
    fn rejects_unbalanced_paren() {
        let err = parse_polynomial("x + (y", &vars(&["x", "y"])).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn rejects_unknown_variable() {
        let err = parse_polynomial("x + w", &vars(&["x"])).unwrap_err();
        assert!(matches!(err, Error::UnknownVariable(_)));
    }

    #[test]
    fn rejects_negative_exponent() {
        let err = parse_polynomial("x^-2", &vars(&["x"])).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn scientific_notation() {
        let p = parse_polynomial("1e-3*x + 2.5E2", &vars(&["x"])).unwrap();
        assert_eq!(p.eval(&point(&[("x", 1.0)])).unwrap(), 0.001 + 250.0);
    }
}
