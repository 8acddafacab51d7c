//! Tokeniser shared by the page-table DSL and the state-expression language.

use crate::error::{syntax, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Num(u64),
    /// `|->`
    MapsTo,
    /// `?->`
    MayMapTo,
    Punct(char),
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub fn parse_number(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(b) = s.strip_prefix("0b").or_else(|| s.strip_prefix("0B")) {
        u64::from_str_radix(b, 2).ok()
    } else {
        s.parse().ok()
    }
}

/// Tokenise `text`; reported line numbers start at `first_line`.
pub fn tokenize(text: &str, first_line: usize) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (li, raw_line) in text.lines().enumerate() {
        let line = first_line + li;
        let code = match raw_line.find("//") {
            Some(i) => &raw_line[..i],
            None => raw_line,
        };
        let chars: Vec<char> = code.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '|' && chars.get(i + 1) == Some(&'-') && chars.get(i + 2) == Some(&'>') {
                out.push(Token { tok: Tok::MapsTo, line, col });
                i += 3;
                continue;
            }
            if c == '?' && chars.get(i + 1) == Some(&'-') && chars.get(i + 2) == Some(&'>') {
                out.push(Token { tok: Tok::MayMapTo, line, col });
                i += 3;
                continue;
            }
            if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let n = parse_number(&s).ok_or_else(|| syntax(line, col, format!("bad number `{s}`")))?;
                out.push(Token { tok: Tok::Num(n), line, col });
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line, col });
                continue;
            }
            if "{};=(),[]*:&|!".contains(c) {
                out.push(Token { tok: Tok::Punct(c), line, col });
                i += 1;
                continue;
            }
            return Err(syntax(line, col, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

/// Cursor over a token list with position-aware errors.
pub struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    end_line: usize,
}

impl<'a> Iterator for Cursor<'a> {
    type Item = &'a Tok;

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos).map(|t| &t.tok);
        self.pos += 1;
        t
    }
}

impl<'a> Cursor<'a> {
    pub fn new(toks: &'a [Token], end_line: usize) -> Self {
        Cursor { toks, pos: 0, end_line }
    }

    pub fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    pub fn peek_at(&self, k: usize) -> Option<&'a Tok> {
        self.toks.get(self.pos + k).map(|t| &t.tok)
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        match self.toks.get(self.pos) {
            Some(t) => syntax(t.line, t.col, msg),
            None => syntax(self.end_line, 1, format!("{} (at end of input)", msg.into())),
        }
    }

    /// Step back over the token just consumed.
    pub fn back(&mut self) {
        self.pos = self.pos.saturating_sub(1);
    }

    pub fn eat_punct(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn expect_punct(&mut self, c: char) -> Result<()> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    pub fn eat_keyword(&mut self, kw: &str) -> bool {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    pub fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{kw}`")))
        }
    }

    pub fn expect_ident(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s.clone())
            }
            _ => Err(self.err("expected identifier")),
        }
    }

    pub fn expect_num(&mut self) -> Result<u64> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(*n)
            }
            _ => Err(self.err("expected number")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_in_all_radices() {
        assert_eq!(parse_number("0x1_000"), Some(0x1000));
        assert_eq!(parse_number("0b101"), Some(5));
        assert_eq!(parse_number("42"), Some(42));
        assert_eq!(parse_number("0xzz"), None);
    }

    #[test]
    fn arrows_and_comments() {
        let t = tokenize("x |-> pa1; // note\ny ?-> invalid;", 1).unwrap();
        assert_eq!(t[1].tok, Tok::MapsTo);
        assert_eq!(t[5].tok, Tok::MayMapTo);
        assert_eq!(t[5].line, 2);
    }
}
