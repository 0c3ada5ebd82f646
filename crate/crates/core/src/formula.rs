//! Model-formula grammar.
//!
//! ```text
//! formula := IDENT "~" term ("+" term)*
//! term    := IDENT | "1" | "(" slopes ("|" | "||") IDENT ")"
//! slopes  := ["0" "+"] slope ("+" slope)*
//! slope   := IDENT | "1"
//! ```
//!
//! A random term carries an implicit intercept unless its slopes start with
//! `0 +`. Random effects are always uncorrelated, so `|` is accepted as a
//! synonym of `||` and reported through [`FormulaWarning`]. Identifiers may be
//! backtick-quoted to admit arbitrary column names.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Covariate of a single random-effect block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Slope {
    /// Random intercept: one indicator column per group level.
    Intercept,
    /// Random slope on a numeric column, one column per group level.
    Column(String),
}

/// One independent random-effect block `(slope || group)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RandomTerm {
    pub slope: Slope,
    pub group: String,
}

impl RandomTerm {
    pub fn label(&self) -> String {
        match &self.slope {
            Slope::Intercept => format!("(Intercept) | {}", self.group),
            Slope::Column(c) => format!("{} | {}", c, self.group),
        }
    }
}

/// Dataset-independent structure of a model.
///
/// The fixed intercept is implicit and never listed in `fixed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaAst {
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<RandomTerm>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormulaWarning {
    /// `(... | g)` at this byte offset was fitted as `(... || g)`.
    BarTreatedAsUncorrelated { offset: usize },
}

impl fmt::Display for FormulaWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormulaWarning::BarTreatedAsUncorrelated { offset } => write!(
                f,
                "`|` at byte {offset} fitted as `||`: random effects are uncorrelated in this model"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFormula {
    pub ast: FormulaAst,
    pub warnings: Vec<FormulaWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Num(String),
    Tilde,
    Plus,
    Minus,
    LParen,
    RParen,
    Bar,
    DoubleBar,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Num(s) => format!("number `{s}`"),
            Tok::Tilde => "`~`".to_owned(),
            Tok::Plus => "`+`".to_owned(),
            Tok::Minus => "`-`".to_owned(),
            Tok::LParen => "`(`".to_owned(),
            Tok::RParen => "`)`".to_owned(),
            Tok::Bar => "`|`".to_owned(),
            Tok::DoubleBar => "`||`".to_owned(),
            Tok::Eof => "end of input".to_owned(),
        }
    }
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        offset,
        message: message.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '.'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let tok = match c {
            '~' => {
                chars.next();
                Tok::Tilde
            }
            '+' => {
                chars.next();
                Tok::Plus
            }
            '-' => {
                chars.next();
                Tok::Minus
            }
            '(' => {
                chars.next();
                Tok::LParen
            }
            ')' => {
                chars.next();
                Tok::RParen
            }
            '|' => {
                chars.next();
                if matches!(chars.peek(), Some(&(_, '|'))) {
                    chars.next();
                    Tok::DoubleBar
                } else {
                    Tok::Bar
                }
            }
            '`' => {
                chars.next();
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some((_, '`')) => break,
                        Some((_, ch)) => name.push(ch),
                        None => return Err(syntax(pos, "unterminated backtick-quoted name")),
                    }
                }
                if name.is_empty() {
                    return Err(syntax(pos, "empty quoted name"));
                }
                Tok::Ident(name)
            }
            ':' | '*' => {
                return Err(syntax(
                    pos,
                    format!("interaction operator `{c}` is not supported; precompute the column"),
                ))
            }
            '/' => return Err(syntax(pos, "nested `/` random effects are not supported")),
            c if c.is_ascii_digit() => {
                let mut digits = String::new();
                while let Some(&(_, d)) = chars.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        digits.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                Tok::Num(digits)
            }
            c if is_ident_start(c) => {
                let mut name = String::new();
                while let Some(&(_, d)) = chars.peek() {
                    if is_ident_continue(d) {
                        name.push(d);
                        chars.next();
                    } else {
                        break;
                    }
                }
                Tok::Ident(name)
            }
            other => return Err(syntax(pos, format!("unexpected character `{other}`"))),
        };
        out.push((tok, pos));
    }
    out.push((Tok::Eof, text.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

/// Random-term slope as written, before intercept expansion.
enum RawSlope {
    One,
    Name(String, usize),
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<usize> {
        let (tok, off) = self.bump();
        if tok == want {
            Ok(off)
        } else {
            Err(syntax(
                off,
                format!("expected {}, found {}", want.describe(), tok.describe()),
            ))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize)> {
        match self.bump() {
            (Tok::Ident(s), off) => Ok((s, off)),
            (tok, off) => Err(syntax(
                off,
                format!("expected {what}, found {}", tok.describe()),
            )),
        }
    }

    fn slope(&mut self) -> Result<RawSlope> {
        match self.bump() {
            (Tok::Num(n), _) if n == "1" => Ok(RawSlope::One),
            (Tok::Ident(s), off) => Ok(RawSlope::Name(s, off)),
            (Tok::Num(n), off) => Err(syntax(
                off,
                format!("`{n}` is not a valid random slope (only `1` or a column name)"),
            )),
            (tok, off) => Err(syntax(
                off,
                format!("expected a random slope, found {}", tok.describe()),
            )),
        }
    }
}

/// Parse `text` into a [`FormulaAst`].
pub fn parse_formula(text: &str) -> Result<ParsedFormula> {
    if text.trim().is_empty() {
        return Err(syntax(0, "empty formula"));
    }
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let mut warnings = Vec::new();

    let (response, _) = p.ident("response name")?;
    p.expect(Tok::Tilde)?;

    let mut fixed: Vec<String> = Vec::new();
    let mut random: Vec<RandomTerm> = Vec::new();

    loop {
        let off = p.offset();
        match p.peek().clone() {
            Tok::Ident(name) => {
                p.bump();
                if name == response {
                    return Err(Error::ResponseAsPredictor { name, offset: off });
                }
                if fixed.contains(&name) {
                    return Err(Error::DuplicateTerm {
                        term: name,
                        offset: off,
                    });
                }
                fixed.push(name);
            }
            Tok::Num(n) if n == "1" => {
                p.bump();
            }
            Tok::Num(n) if n == "0" => {
                return Err(syntax(off, "removing the fixed intercept is not supported"));
            }
            Tok::Minus => {
                return Err(syntax(off, "term removal with `-` is not supported"));
            }
            Tok::LParen => {
                p.bump();
                let mut implicit_intercept = true;
                let mut raw = Vec::new();
                if matches!(p.peek(), Tok::Num(n) if n == "0") {
                    p.bump();
                    implicit_intercept = false;
                    if matches!(p.peek(), Tok::Bar | Tok::DoubleBar) {
                        return Err(syntax(p.offset(), "random term has no slopes"));
                    }
                    p.expect(Tok::Plus)?;
                }
                raw.push(p.slope()?);
                while matches!(p.peek(), Tok::Plus) {
                    p.bump();
                    raw.push(p.slope()?);
                }
                let bar_off = p.offset();
                match p.bump().0 {
                    Tok::DoubleBar => {}
                    Tok::Bar => {
                        warnings.push(FormulaWarning::BarTreatedAsUncorrelated { offset: bar_off })
                    }
                    tok => {
                        return Err(syntax(
                            bar_off,
                            format!("expected `|` or `||`, found {}", tok.describe()),
                        ))
                    }
                }
                let (group, group_off) = p.ident("grouping column")?;
                if group == response {
                    return Err(Error::ResponseAsPredictor {
                        name: group,
                        offset: group_off,
                    });
                }
                p.expect(Tok::RParen)?;

                let mut slopes: Vec<(Slope, usize)> = Vec::new();
                if implicit_intercept {
                    slopes.push((Slope::Intercept, off));
                }
                for s in raw {
                    let (slope, s_off) = match s {
                        RawSlope::One => (Slope::Intercept, off),
                        RawSlope::Name(name, s_off) => {
                            if name == response {
                                return Err(Error::ResponseAsPredictor {
                                    name,
                                    offset: s_off,
                                });
                            }
                            (Slope::Column(name), s_off)
                        }
                    };
                    // `(1 + x | g)` repeats the implicit intercept harmlessly.
                    if implicit_intercept && slope == Slope::Intercept {
                        continue;
                    }
                    if slopes.iter().any(|(s, _)| *s == slope) {
                        return Err(dup(&slope, &group, s_off));
                    }
                    slopes.push((slope, s_off));
                }
                for (slope, s_off) in slopes {
                    let term = RandomTerm {
                        slope,
                        group: group.clone(),
                    };
                    if random.contains(&term) {
                        return Err(dup(&term.slope, &term.group, s_off));
                    }
                    random.push(term);
                }
            }
            tok => {
                return Err(syntax(
                    off,
                    format!("expected a term, found {}", tok.describe()),
                ))
            }
        }

        match p.bump() {
            (Tok::Plus, _) => continue,
            (Tok::Eof, _) => break,
            (tok, off) => {
                return Err(syntax(
                    off,
                    format!("expected `+` or end of input, found {}", tok.describe()),
                ))
            }
        }
    }

    Ok(ParsedFormula {
        ast: FormulaAst {
            response,
            fixed,
            random,
        },
        warnings,
    })
}

fn dup(slope: &Slope, group: &str, offset: usize) -> Error {
    let term = match slope {
        Slope::Intercept => format!("(1 || {group})"),
        Slope::Column(c) => format!("({c} || {group})"),
    };
    Error::DuplicateTerm { term, offset }
}

fn write_name(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    let mut chars = name.chars();
    let plain = chars.next().is_some_and(is_ident_start) && chars.all(is_ident_continue);
    if plain {
        f.write_str(name)
    } else {
        write!(f, "`{name}`")
    }
}

/// Canonical rendering; `parse_formula(&ast.to_string())` reproduces `ast`.
impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_name(f, &self.response)?;
        f.write_str(" ~ ")?;
        let mut first = true;
        for name in &self.fixed {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            write_name(f, name)?;
        }
        for term in &self.random {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            match &term.slope {
                Slope::Intercept => f.write_str("(1 || ")?,
                Slope::Column(c) => {
                    f.write_str("(0 + ")?;
                    write_name(f, c)?;
                    f.write_str(" || ")?;
                }
            }
            write_name(f, &term.group)?;
            f.write_str(")")?;
        }
        if first {
            f.write_str("1")?;
        }
        Ok(())
    }
}

impl FormulaAst {
    /// Every column name the formula refers to, response first.
    pub fn columns(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.push(self.response.clone());
        for c in &self.fixed {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        for t in &self.random {
            if let Slope::Column(c) = &t.slope {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
            if !out.contains(&t.group) {
                out.push(t.group.to_string());
            }
        }
        out
    }
}
