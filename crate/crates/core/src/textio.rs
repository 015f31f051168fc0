//! Whitespace token reader shared by the line-based file formats.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub(crate) struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    current: Vec<&'a str>,
    pos: usize,
    line: usize,
}

impl<'a> Tokens<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            current: Vec::new(),
            pos: 0,
            line: 0,
        }
    }

    /// Line number (1-based) of the most recently returned token.
    pub fn line(&self) -> usize {
        self.line
    }

    pub fn next_token(&mut self) -> Option<&'a str> {
        while self.pos >= self.current.len() {
            let (no, l) = self.lines.next()?;
            self.line = no + 1;
            self.current = l.split_whitespace().collect();
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.current[self.pos - 1])
    }

    /// Consumes the next whole line, split on whitespace. Skips blank lines.
    pub fn next_line(&mut self) -> Option<Vec<&'a str>> {
        loop {
            let (no, l) = self.lines.next()?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                self.line = no + 1;
                self.current.clear();
                self.pos = 0;
                return Some(toks);
            }
        }
    }
}

pub(crate) fn parse_real(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a real number, found {tok:?}"),
    })
}

/// Parses a header dimension: a strictly positive integer.
pub(crate) fn parse_dim(tok: &str, name: &str) -> Result<usize> {
    match tok.parse::<i64>() {
        Ok(v) if v > 0 => Ok(v as usize),
        Ok(v) => Err(Error::MalformedHeader(format!("{name} must be positive, got {v}"))),
        Err(_) => Err(Error::MalformedHeader(format!("{name} is not an integer: {tok:?}"))),
    }
}

/// Appends values separated by single spaces. `f64`'s `Display` is the shortest
/// representation that parses back to the same bits.
pub(crate) fn push_reals(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, " {v}").unwrap();
    }
}
