//! Python literal values: parsing, canonical `repr` text, and value
//! equality.
//!
//! The grammar covers the literals execution-prediction answers use
//! (integers, strings, booleans, `None`, floats, lists, tuples, dicts), plus
//! integer arithmetic with `+`, `-` and parentheses. Models sometimes answer
//! `81 - 43` instead of `38`; such expressions are evaluated and the parse
//! is marked as *resolved*.

use std::fmt;

use num_bigint::BigInt;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone)]
pub enum LiteralValue {
    Int(BigInt),
    Float(f64),
    Str(String),
    Bool(bool),
    None,
    List(Vec<LiteralValue>),
    Tuple(Vec<LiteralValue>),
    Dict(Vec<(LiteralValue, LiteralValue)>),
}

impl PartialEq for LiteralValue {
    fn eq(&self, other: &Self) -> bool {
        use LiteralValue::*;
        match (self, other) {
            (Int(a), Int(b)) => a == b,
            (Float(a), Float(b)) => a == b || (a.is_nan() && b.is_nan()),
            (Str(a), Str(b)) => a == b,
            (Bool(a), Bool(b)) => a == b,
            (None, None) => true,
            (List(a), List(b)) | (Tuple(a), Tuple(b)) => a == b,
            (Dict(a), Dict(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .all(|(k, v)| b.iter().any(|(k2, v2)| k == k2 && v == v2))
            }
            _ => false,
        }
    }
}

impl LiteralValue {
    pub fn int(v: impl Into<BigInt>) -> Self {
        LiteralValue::Int(v.into())
    }

    pub fn int_list<I: IntoIterator<Item = i64>>(items: I) -> Self {
        LiteralValue::List(items.into_iter().map(LiteralValue::int).collect())
    }

    pub fn as_list(&self) -> Option<&[LiteralValue]> {
        match self {
            LiteralValue::List(items) => Some(items),
            _ => None,
        }
    }

    /// Python `repr` of the value.
    pub fn repr(&self) -> String {
        self.to_string()
    }
}

fn write_seq(f: &mut fmt::Formatter<'_>, items: &[LiteralValue]) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{item}")?;
    }
    Ok(())
}

fn write_float(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v.is_nan() {
        f.write_str("nan")
    } else if v.is_infinite() {
        f.write_str(if v > 0.0 { "inf" } else { "-inf" })
    } else if v.fract() == 0.0 && v.abs() < 1e16 {
        write!(f, "{v:.1}")
    } else if v.abs() >= 1e16 || v.abs() < 1e-4 {
        let s = format!("{v:e}");
        // Python writes `1e+20` / `1e-05`.
        let (mant, exp) = s.split_once('e').expect("exponent form");
        let (sign, digits) = match exp.strip_prefix('-') {
            Some(d) => ('-', d),
            None => ('+', exp),
        };
        write!(f, "{mant}e{sign}{digits:0>2}")
    } else {
        write!(f, "{v}")
    }
}

fn write_str_repr(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                out.push_str(&format!("\\x{:02x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    f.write_str(&out)
}

impl fmt::Display for LiteralValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LiteralValue::Int(v) => write!(f, "{v}"),
            LiteralValue::Float(v) => write_float(f, *v),
            LiteralValue::Str(s) => write_str_repr(f, s),
            LiteralValue::Bool(true) => f.write_str("True"),
            LiteralValue::Bool(false) => f.write_str("False"),
            LiteralValue::None => f.write_str("None"),
            LiteralValue::List(items) => {
                f.write_str("[")?;
                write_seq(f, items)?;
                f.write_str("]")
            }
            LiteralValue::Tuple(items) => {
                f.write_str("(")?;
                write_seq(f, items)?;
                if items.len() == 1 {
                    f.write_str(",")?;
                }
                f.write_str(")")
            }
            LiteralValue::Dict(pairs) => {
                f.write_str("{")?;
                for (i, (k, v)) in pairs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl Serialize for LiteralValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.repr())
    }
}

impl<'de> Deserialize<'de> for LiteralValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_literal(&text)
            .map(|p| p.value)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

/// A parsed literal together with whether arithmetic had to be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub value: LiteralValue,
    /// At least one compound `+`/`-` expression was evaluated.
    pub resolved: bool,
}

/// Parse the whole of `text` (surrounding whitespace allowed).
pub fn parse_literal(text: &str) -> Result<Parsed, ParseError> {
    let mut p = Parser::new(text);
    let value = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(Parsed {
        value,
        resolved: p.resolved,
    })
}

/// Parse the longest literal at the start of `text`; returns the parse and
/// the byte offset where it ended.
pub fn parse_literal_prefix(text: &str) -> Result<(Parsed, usize), ParseError> {
    let mut p = Parser::new(text);
    let value = p.expr()?;
    Ok((
        Parsed {
            value,
            resolved: p.resolved,
        },
        text[..p.pos].trim_end().len(),
    ))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    resolved: bool,
    depth: usize,
}

const MAX_DEPTH: usize = 256;

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            resolved: false,
            depth: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            pos: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected {c:?}")))
        }
    }

    fn expr(&mut self) -> Result<LiteralValue, ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err("nesting too deep"));
        }
        let start = self.pos;
        let mut acc = self.unary()?;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(c @ ('+' | '-')) => c,
                _ => break,
            };
            let op_pos = self.pos;
            self.bump();
            let rhs = self.unary()?;
            match (acc, rhs) {
                (LiteralValue::Int(a), LiteralValue::Int(b)) => {
                    acc = LiteralValue::Int(if op == '+' { a + b } else { a - b });
                    self.resolved = true;
                }
                _ => {
                    return Err(ParseError {
                        pos: op_pos,
                        message: format!(
                            "operator {op:?} on non-integer operands (expression at {start})"
                        ),
                    })
                }
            }
        }
        self.depth -= 1;
        Ok(acc)
    }

    fn unary(&mut self) -> Result<LiteralValue, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(c @ ('+' | '-')) => {
                let at = self.pos;
                self.bump();
                self.depth += 1;
                if self.depth > MAX_DEPTH {
                    return Err(self.err("nesting too deep"));
                }
                let v = self.unary()?;
                self.depth -= 1;
                match v {
                    LiteralValue::Int(n) => Ok(LiteralValue::Int(if c == '-' { -n } else { n })),
                    LiteralValue::Float(x) => Ok(LiteralValue::Float(if c == '-' { -x } else { x })),
                    _ => Err(ParseError {
                        pos: at,
                        message: format!("unary {c:?} on non-number"),
                    }),
                }
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<LiteralValue, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some('\'' | '"') => self.string(),
            Some('[') => {
                self.bump();
                let items = self.items(']')?;
                Ok(LiteralValue::List(items.0))
            }
            Some('(') => {
                self.bump();
                let (items, trailing_comma) = self.items(')')?;
                if items.len() == 1 && !trailing_comma {
                    Ok(items.into_iter().next().expect("one item"))
                } else {
                    Ok(LiteralValue::Tuple(items))
                }
            }
            Some('{') => {
                self.bump();
                self.dict()
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '_') {
                    self.bump();
                }
                match &self.src[start..self.pos] {
                    "True" => Ok(LiteralValue::Bool(true)),
                    "False" => Ok(LiteralValue::Bool(false)),
                    "None" => Ok(LiteralValue::None),
                    word => Err(ParseError {
                        pos: start,
                        message: format!("unexpected name {word:?}"),
                    }),
                }
            }
            Some(c) => Err(self.err(format!("unexpected character {c:?}"))),
        }
    }

    /// Comma-separated expressions up to `close`; reports a trailing comma.
    fn items(&mut self, close: char) -> Result<(Vec<LiteralValue>, bool), ParseError> {
        let mut items = Vec::new();
        let mut trailing = false;
        loop {
            if self.eat(close) {
                return Ok((items, trailing));
            }
            items.push(self.expr()?);
            trailing = false;
            if self.eat(',') {
                trailing = true;
                continue;
            }
            self.expect(close)?;
            return Ok((items, trailing));
        }
    }

    fn dict(&mut self) -> Result<LiteralValue, ParseError> {
        let mut pairs: Vec<(LiteralValue, LiteralValue)> = Vec::new();
        loop {
            if self.eat('}') {
                return Ok(LiteralValue::Dict(pairs));
            }
            let key = self.expr()?;
            self.expect(':')?;
            let value = self.expr()?;
            match pairs.iter_mut().find(|(k, _)| *k == key) {
                Some(slot) => slot.1 = value,
                None => pairs.push((key, value)),
            }
            if !self.eat(',') {
                self.expect('}')?;
                return Ok(LiteralValue::Dict(pairs));
            }
        }
    }

    fn number(&mut self) -> Result<LiteralValue, ParseError> {
        let start = self.pos;
        let mut is_float = false;
        let mut digits = String::new();
        let take_digits = |p: &mut Self, out: &mut String| {
            while let Some(c) = p.peek() {
                if c.is_ascii_digit() {
                    out.push(c);
                } else if c != '_' {
                    break;
                }
                p.bump();
            }
        };
        take_digits(self, &mut digits);
        if self.peek() == Some('.') {
            is_float = true;
            digits.push('.');
            self.bump();
            take_digits(self, &mut digits);
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            is_float = true;
            digits.push('e');
            self.bump();
            if let Some(s @ ('+' | '-')) = self.peek() {
                digits.push(s);
                self.bump();
            }
            take_digits(self, &mut digits);
        }
        let bad = || ParseError {
            pos: start,
            message: "malformed number".into(),
        };
        if is_float {
            digits.parse::<f64>().map(LiteralValue::Float).map_err(|_| bad())
        } else {
            if digits.len() > 1 && digits.starts_with('0') && digits.bytes().any(|b| b != b'0') {
                return Err(ParseError {
                    pos: start,
                    message: "leading zeros in integer literal".into(),
                });
            }
            digits.parse::<BigInt>().map(LiteralValue::Int).map_err(|_| bad())
        }
    }

    fn hex_escape(&mut self, len: usize) -> Result<char, ParseError> {
        let start = self.pos;
        let end = start + len;
        let hex = self
            .src
            .get(start..end)
            .filter(|h| h.chars().all(|c| c.is_ascii_hexdigit()))
            .ok_or_else(|| self.err("truncated escape"))?;
        let code = u32::from_str_radix(hex, 16).map_err(|_| self.err("bad escape"))?;
        self.pos = end;
        char::from_u32(code).ok_or_else(|| self.err("invalid code point"))
    }

    fn string(&mut self) -> Result<LiteralValue, ParseError> {
        let start = self.pos;
        let quote = self.bump().expect("caller saw a quote");
        let mut out = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => {
                    return Err(ParseError {
                        pos: start,
                        message: "unterminated string".into(),
                    })
                }
                Some(c) if c == quote => return Ok(LiteralValue::Str(out)),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('0') => out.push('\0'),
                    Some('a') => out.push('\x07'),
                    Some('b') => out.push('\x08'),
                    Some('f') => out.push('\x0c'),
                    Some('v') => out.push('\x0b'),
                    Some('\\') => out.push('\\'),
                    Some('\'') => out.push('\''),
                    Some('"') => out.push('"'),
                    Some('\n') => {}
                    Some('x') => out.push(self.hex_escape(2)?),
                    Some('u') => out.push(self.hex_escape(4)?),
                    Some('U') => out.push(self.hex_escape(8)?),
                    Some(other) => {
                        out.push('\\');
                        out.push(other);
                    }
                    None => return Err(self.err("unterminated escape")),
                },
                Some(c) => out.push(c),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Parsed {
        parse_literal(s).unwrap_or_else(|e| panic!("{s:?}: {e}"))
    }

    #[test]
    fn unresolved_expression_is_evaluated() {
        let p = parse("81 - 43");
        assert_eq!(p.value, LiteralValue::int(38));
        assert!(p.resolved);
        assert_eq!(p.value, parse("38").value);
    }

    #[test]
    fn bare_negative_is_not_compound() {
        let p = parse("-43");
        assert_eq!(p.value, LiteralValue::int(-43));
        assert!(!p.resolved);
        assert!(!parse("[-1, -(2)]").resolved);
    }

    #[test]
    fn listing_output() {
        let p = parse("[38, 169, 16, 7]");
        assert_eq!(p.value, LiteralValue::int_list([38, 169, 16, 7]));
        assert!(!p.resolved);
    }

    #[test]
    fn nesting_and_strings() {
        let p = parse("[1, (2, 'a')]");
        assert_eq!(
            p.value,
            LiteralValue::List(vec![
                LiteralValue::int(1),
                LiteralValue::Tuple(vec![LiteralValue::int(2), LiteralValue::Str("a".into())]),
            ])
        );
        assert_eq!(parse(r#""it's\n""#).value, LiteralValue::Str("it's\n".into()));
        assert_eq!(parse("'\\x41\\u00e9'").value, LiteralValue::Str("Aé".into()));
    }

    #[test]
    fn tuples_and_grouping() {
        assert_eq!(parse("()").value, LiteralValue::Tuple(vec![]));
        assert_eq!(parse("(5)").value, LiteralValue::int(5));
        assert_eq!(parse("(5,)").value, LiteralValue::Tuple(vec![LiteralValue::int(5)]));
        assert_eq!(parse("(1 + (2 - 10))").value, LiteralValue::int(-7));
    }

    #[test]
    fn constants_dicts_floats() {
        assert_eq!(parse("True").value, LiteralValue::Bool(true));
        assert_eq!(parse("None").value, LiteralValue::None);
        assert_eq!(parse("{'a': 1, 'b': [2]}").value, parse("{'b': [2], 'a': 1}").value);
        assert_eq!(parse("2.50").value, LiteralValue::Float(2.5));
        assert_eq!(parse("-1e3").value, LiteralValue::Float(-1000.0));
    }

    #[test]
    fn errors_carry_position() {
        let e = parse_literal("[1, 2").unwrap_err();
        assert_eq!(e.pos, 5);
        assert!(parse_literal("f(3)").is_err());
        assert!(parse_literal("'a' + 1").is_err());
        assert!(parse_literal("1 2").is_err());
        assert!(parse_literal("").is_err());
        assert!(parse_literal("007").is_err());
    }

    #[test]
    fn repr_matches_python() {
        let cases = [
            ("[38, 169, 16, 7]", "[38, 169, 16, 7]"),
            ("(1,)", "(1,)"),
            ("\"it's\"", "\"it's\""),
            ("'say \"hi\"'", "'say \"hi\"'"),
            ("'a\\tb'", "'a\\tb'"),
            ("1.0", "1.0"),
            ("0.1", "0.1"),
            ("1e20", "1e+20"),
            ("0.00001", "1e-05"),
            ("{1: 'x', 2: None}", "{1: 'x', 2: None}"),
            ("[True, False]", "[True, False]"),
        ];
        for (input, repr) in cases {
            assert_eq!(parse(input).value.repr(), repr, "{input}");
        }
    }

    #[test]
    fn prefix_parse_stops_after_literal() {
        let (p, end) = parse_literal_prefix("[38, 169] # trailing").unwrap();
        assert_eq!(p.value, LiteralValue::int_list([38, 169]));
        assert_eq!(end, 9);
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let s = "[".repeat(10_000);
        assert!(parse_literal(&s).is_err());
    }
}
