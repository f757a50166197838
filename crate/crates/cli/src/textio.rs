//! Line cursor shared by the text formats.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{parse_err, CliResult};

/// Formats a float so that parsing it gives back the same bits.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn nums(vs: &[f64]) -> String {
    vs.iter().map(|&v| num(v)).collect::<Vec<_>>().join(" ")
}

pub struct Lines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Line number of the most recently consumed line.
    pub fn line(&self) -> usize {
        self.last
    }

    pub fn next_line(&mut self) -> CliResult<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(parse_err(self.last + 1, "unexpected end of file")),
        }
    }

    /// Consumes `key rest` and returns `rest`.
    pub fn field(&mut self, key: &str) -> CliResult<&'a str> {
        let l = self.next_line()?;
        if l == key {
            return Ok("");
        }
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| parse_err(self.last, format!("expected `{key}`, found `{l}`")))
    }

    pub fn value<T: FromStr>(&mut self, key: &str) -> CliResult<T> {
        let v = self.field(key)?;
        v.parse()
            .map_err(|_| parse_err(self.last, format!("bad value `{v}` for `{key}`")))
    }

    pub fn values<T: FromStr>(&mut self, key: &str) -> CliResult<Vec<T>> {
        let v = self.field(key)?;
        self.parse_list(v)
    }

    pub fn parse_list<T: FromStr>(&self, s: &str) -> CliResult<Vec<T>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(' ')
            .map(|t| t.parse().map_err(|_| parse_err(self.last, format!("bad number `{t}`"))))
            .collect()
    }

    /// Next line parsed as exactly `n` space-separated values.
    pub fn row<T: FromStr>(&mut self, n: usize) -> CliResult<Vec<T>> {
        let l = self.next_line()?;
        let v: Vec<T> = self.parse_list(l)?;
        if v.len() != n {
            return Err(parse_err(self.last, format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn expect_header(&mut self, header: &str) -> CliResult<()> {
        let l = self.next_line()?;
        if l != header {
            return Err(parse_err(self.last, format!("expected header `{header}`, found `{l}`")));
        }
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        match self.lines.next() {
            Some((i, _)) => Err(parse_err(i + 1, "unexpected trailing content")),
            None => Ok(()),
        }
    }

    pub fn error(&self, message: impl Display) -> crate::error::CliError {
        parse_err(self.last, message.to_string())
    }
}
