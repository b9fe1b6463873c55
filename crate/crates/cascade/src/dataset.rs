//! Text formats for labelled sequences and labelled grids.
//!
//! Sequence files start with `#K=<int>`; every other non-empty line is one
//! example, tokens separated by tabs, each token `label:key,key,...`. Grid
//! files start with `#GRID rows=<r> cols=<c> K=<k>` and use the same token
//! syntax for the nodes of one grid in row-major order. Later lines starting
//! with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use structcascade_core::ensemble::{GridExample, GridInput, GridShape};
use structcascade_core::model::State;
use structcascade_core::training::Example;
use structcascade_core::{Output, SequenceInput};

use crate::{Error, Result};

/// One labelled position: its label and raw feature keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub label: State,
    pub keys: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceDataset {
    pub num_states: usize,
    pub examples: Vec<Vec<Token>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridDataset {
    pub shape: GridShape,
    pub num_states: usize,
    pub examples: Vec<Vec<Token>>,
}

fn parse_token(text: &str, num_states: usize, line: usize) -> Result<Token> {
    let (label, keys) = text
        .split_once(':')
        .ok_or_else(|| Error::parse(line, format!("token {text:?} has no ':'")))?;
    let label: State = label
        .parse()
        .map_err(|_| Error::parse(line, format!("label {label:?} is not a state id")))?;
    if label as usize >= num_states {
        return Err(Error::parse(
            line,
            format!("label {label} outside 0..{num_states}"),
        ));
    }
    let keys = if keys.is_empty() {
        Vec::new()
    } else {
        keys.split(',').map(str::to_owned).collect()
    };
    Ok(Token { label, keys })
}

fn parse_body<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    num_states: usize,
) -> Result<Vec<Vec<Token>>> {
    let mut examples = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens = line
            .split('\t')
            .map(|t| parse_token(t, num_states, i + 1))
            .collect::<Result<_>>()?;
        examples.push(tokens);
    }
    Ok(examples)
}

fn header_value<'a>(header: &'a str, key: &str, line: usize) -> Result<&'a str> {
    header
        .split_whitespace()
        .find_map(|part| part.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::parse(line, format!("header lacks {key}=")))
}

fn parse_usize(text: &str, line: usize) -> Result<usize> {
    text.parse()
        .map_err(|_| Error::parse(line, format!("{text:?} is not a non-negative integer")))
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains(['\t', ',', '\n', '\r']) {
        return Err(Error::Invalid(format!(
            "feature key {key:?} cannot be written"
        )));
    }
    Ok(())
}

fn write_tokens(out: &mut String, tokens: &[Token]) -> Result<()> {
    for (j, t) in tokens.iter().enumerate() {
        if j > 0 {
            out.push('\t');
        }
        write!(out, "{}:", t.label).expect("writing to a String");
        for (i, k) in t.keys.iter().enumerate() {
            check_key(k)?;
            if i > 0 {
                out.push(',');
            }
            out.push_str(k);
        }
    }
    out.push('\n');
    Ok(())
}

impl SequenceDataset {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing #K= header"))?;
        let k = header
            .trim_end_matches('\r')
            .strip_prefix("#K=")
            .ok_or_else(|| Error::parse(1, "first line must be #K=<int>"))?;
        let num_states = parse_usize(k.trim(), 1)?;
        if num_states == 0 {
            return Err(Error::parse(1, "K must be positive"));
        }
        Ok(Self {
            num_states,
            examples: parse_body(lines, num_states)?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("#K={}\n", self.num_states);
        for ex in &self.examples {
            if ex.is_empty() {
                return Err(Error::Invalid("empty sequences cannot be written".into()));
            }
            write_tokens(&mut out, ex)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_examples(&self) -> Vec<Example> {
        self.examples
            .iter()
            .map(|ex| Example {
                input: SequenceInput::from_keys(
                    &ex.iter().map(|t| t.keys.clone()).collect::<Vec<_>>(),
                ),
                truth: Output::new(ex.iter().map(|t| t.label).collect()),
            })
            .collect()
    }
}

impl GridDataset {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing #GRID header"))?;
        let header = header.trim_end_matches('\r');
        if !header.starts_with("#GRID ") {
            return Err(Error::parse(
                1,
                "first line must be #GRID rows=<r> cols=<c> K=<k>",
            ));
        }
        let rows = parse_usize(header_value(header, "rows", 1)?, 1)?;
        let cols = parse_usize(header_value(header, "cols", 1)?, 1)?;
        let num_states = parse_usize(header_value(header, "K", 1)?, 1)?;
        if num_states == 0 {
            return Err(Error::parse(1, "K must be positive"));
        }
        let shape = GridShape::new(rows, cols)?;
        let examples = parse_body(lines.clone(), num_states)?;
        let data_lines =
            lines.filter(|(_, l)| !l.trim_end_matches('\r').is_empty() && !l.starts_with('#'));
        for (ex, (i, _)) in examples.iter().zip(data_lines) {
            if ex.len() != shape.num_nodes() {
                return Err(Error::parse(
                    i + 1,
                    format!("{} tokens for a {rows}x{cols} grid", ex.len()),
                ));
            }
        }
        Ok(Self {
            shape,
            num_states,
            examples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!(
            "#GRID rows={} cols={} K={}\n",
            self.shape.rows, self.shape.cols, self.num_states
        );
        for ex in &self.examples {
            if ex.len() != self.shape.num_nodes() {
                return Err(Error::Invalid(
                    "grid example size differs from the shape".into(),
                ));
            }
            write_tokens(&mut out, ex)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_examples(&self) -> Vec<GridExample> {
        self.examples
            .iter()
            .map(|ex| GridExample {
                shape: self.shape,
                input: GridInput::from_keys(&ex.iter().map(|t| t.keys.clone()).collect::<Vec<_>>()),
                truth: ex.iter().map(|t| t.label).collect(),
            })
            .collect()
    }
}
