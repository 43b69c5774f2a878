//! Matrix files and reproducible JSON output.
//!
//! Two CSV layouts are read:
//!
//! * ternary: comma-separated `0`, `1`, `NA` or empty cells, with an optional
//!   header line of column names;
//! * votes: a header line of column identifiers, then one line per row whose
//!   first field is the row identifier and whose other fields are `for`,
//!   `against`, `abstained` or `absent`. Abstentions and absences both
//!   become missing cells.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{LbmError, Result};
use crate::model::{Cell, ObservedMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum MatrixFormat {
    #[serde(rename = "ternary-csv")]
    Ternary,
    #[serde(rename = "votes-csv")]
    Votes,
}

impl FromStr for MatrixFormat {
    type Err = LbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ternary" | "ternary-csv" => Ok(Self::Ternary),
            "votes" | "votes-csv" => Ok(Self::Votes),
            other => Err(LbmError::Domain(format!("unknown matrix format '{other}'"))),
        }
    }
}

/// Matrix with optional row and column identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub matrix: ObservedMatrix,
    pub row_ids: Option<Vec<String>>,
    pub col_ids: Option<Vec<String>>,
}

fn ternary_token(s: &str) -> Option<Cell> {
    match s {
        "0" => Some(Cell::Zero),
        "1" => Some(Cell::One),
        "" => Some(Cell::Missing),
        _ if s.eq_ignore_ascii_case("na") => Some(Cell::Missing),
        _ => None,
    }
}

fn vote_token(s: &str) -> Option<Cell> {
    match s.to_ascii_lowercase().as_str() {
        "for" => Some(Cell::One),
        "against" => Some(Cell::Zero),
        "abstained" | "absent" => Some(Cell::Missing),
        _ => None,
    }
}

fn records(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| LbmError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(out.len() + 1, |p| p.line() as usize);
        // skip blank lines
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn check_width(line: usize, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(LbmError::Parse {
            line,
            column: got.min(expected) + 1,
            message: format!("row has {got} fields, expected {expected}"),
        });
    }
    Ok(())
}

pub fn parse_ternary(text: &str) -> Result<LabeledMatrix> {
    let mut recs = records(text)?;
    if recs.is_empty() {
        return Err(LbmError::Parse {
            line: 1,
            column: 1,
            message: "empty input".into(),
        });
    }
    let col_ids = if recs[0].1.iter().all(|t| ternary_token(t).is_none()) {
        Some(recs.remove(0).1)
    } else {
        None
    };
    let width = col_ids.as_ref().map_or_else(|| recs.first().map_or(0, |r| r.1.len()), Vec::len);
    let mut cells = Vec::new();
    for (line, fields) in &recs {
        check_width(*line, fields.len(), width)?;
        for (c, tok) in fields.iter().enumerate() {
            cells.push(ternary_token(tok).ok_or_else(|| LbmError::Parse {
                line: *line,
                column: c + 1,
                message: format!("unknown token '{tok}'"),
            })?);
        }
    }
    if recs.is_empty() {
        return Err(LbmError::Parse {
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    Ok(LabeledMatrix {
        matrix: ObservedMatrix::new(recs.len(), width, cells)?,
        row_ids: None,
        col_ids,
    })
}

pub fn parse_votes(text: &str) -> Result<LabeledMatrix> {
    let recs = records(text)?;
    let Some((_, header)) = recs.first() else {
        return Err(LbmError::Parse {
            line: 1,
            column: 1,
            message: "empty input".into(),
        });
    };
    if header.len() < 2 {
        return Err(LbmError::Parse {
            line: 1,
            column: 1,
            message: "header needs a row-id column and at least one column id".into(),
        });
    }
    let width = header.len();
    let mut row_ids = Vec::new();
    let mut cells = Vec::new();
    for (line, fields) in &recs[1..] {
        check_width(*line, fields.len(), width)?;
        row_ids.push(fields[0].clone());
        for (c, tok) in fields[1..].iter().enumerate() {
            cells.push(vote_token(tok).ok_or_else(|| LbmError::Parse {
                line: *line,
                column: c + 2,
                message: format!("unknown vote '{tok}'"),
            })?);
        }
    }
    if row_ids.is_empty() {
        return Err(LbmError::Parse {
            line: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    Ok(LabeledMatrix {
        matrix: ObservedMatrix::new(row_ids.len(), width - 1, cells)?,
        row_ids: Some(row_ids),
        col_ids: Some(header[1..].to_vec()),
    })
}

pub fn load_labeled(path: impl AsRef<Path>, format: MatrixFormat) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path)?;
    match format {
        MatrixFormat::Ternary => parse_ternary(&text),
        MatrixFormat::Votes => parse_votes(&text),
    }
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<ObservedMatrix> {
    Ok(load_labeled(path, format)?.matrix)
}

/// Ternary CSV without header.
pub fn write_ternary(x: &ObservedMatrix, mut out: impl Write) -> io::Result<()> {
    for row in x.rows() {
        let line: Vec<&str> = row
            .iter()
            .map(|c| match c {
                Cell::Zero => "0",
                Cell::One => "1",
                Cell::Missing => "NA",
            })
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn save_matrix(path: impl AsRef<Path>, x: &ObservedMatrix) -> Result<()> {
    let mut buf = Vec::new();
    write_ternary(x, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Formats a float with 17 significant digits; non-finite values become `NA`.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "NA".to_owned()
    }
}

/// JSON formatter writing every float with 17 significant digits.
#[derive(Default)]
struct Digits17(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with 17-significant-digit floats and `null` for NaN.
pub fn to_json17<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}
