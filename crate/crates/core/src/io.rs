//! Record formats for panel streams.
//!
//! NDJSON: one object per line with keys `t`, `i`, `y`, `x` (array) and `z`.
//! CSV: header `t,i,y,x1,...,xd,z` is required.
//!
//! Readers group consecutive rows sharing `t` into a [`TimeBatch`], so a
//! stream can be consumed one period at a time from standard input.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Observation, StreamError, TimeBatch};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Stream(#[from] StreamError),

    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Ndjson,
    Csv,
}

impl std::str::FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ndjson" | "jsonl" => Ok(Self::Ndjson),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown record format `{other}`")),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    t: u64,
    i: u64,
    y: f64,
    x: Vec<f64>,
    z: f64,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    t: u64,
    i: u64,
    y: f64,
    x: &'a [f64],
    z: u8,
}

fn binary_z(t: u64, subject: u64, z: f64) -> Result<u8, StreamError> {
    if z == 0.0 {
        Ok(0)
    } else if z == 1.0 {
        Ok(1)
    } else {
        Err(StreamError::NonBinaryTreatment { t, subject, z })
    }
}

/// Parses a single NDJSON line into an [`Observation`].
pub fn parse_ndjson_line(line: &str, line_no: usize) -> Result<Observation, IoError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|source| IoError::Json {
        line: line_no,
        source,
    })?;
    let z = binary_z(raw.t, raw.i, raw.z)?;
    Ok(Observation::new(raw.t, raw.i, raw.y, raw.x, z))
}

/// Groups a row iterator into per-period batches.
pub struct Batcher<I> {
    rows: I,
    pending: Option<Observation>,
    done: bool,
}

impl<I> Batcher<I>
where
    I: Iterator<Item = Result<Observation, IoError>>,
{
    pub fn new(rows: I) -> Self {
        Self {
            rows,
            pending: None,
            done: false,
        }
    }
}

impl<I> Iterator for Batcher<I>
where
    I: Iterator<Item = Result<Observation, IoError>>,
{
    type Item = Result<TimeBatch, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let first = match self.pending.take() {
            Some(row) => row,
            None => match self.rows.next() {
                Some(Ok(row)) => row,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    return None;
                }
            },
        };
        let t = first.t;
        let mut rows = vec![first];
        loop {
            match self.rows.next() {
                Some(Ok(row)) if row.t == t => rows.push(row),
                Some(Ok(row)) => {
                    self.pending = Some(row);
                    break;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    break;
                }
            }
        }
        Some(Ok(TimeBatch::new(t, rows)))
    }
}

/// Lazily reads NDJSON observations. Blank lines are skipped.
pub fn ndjson_rows<R: BufRead>(reader: R) -> impl Iterator<Item = Result<Observation, IoError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(idx, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(parse_ndjson_line(&l, idx + 1)),
            Err(e) => Some(Err(IoError::Io(e))),
        })
}

/// Lazily reads CSV observations. The header must name `t`, `i`, `y`, `z`
/// and covariate columns `x1..xd`.
pub fn csv_rows<R: std::io::Read>(
    reader: R,
) -> Result<impl Iterator<Item = Result<Observation, IoError>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::Format(format!("missing CSV column `{name}`")))
    };
    let (ct, ci, cy, cz) = (col("t")?, col("i")?, col("y")?, col("z")?);
    let mut xcols = Vec::new();
    while let Some(pos) = headers
        .iter()
        .position(|h| h == format!("x{}", xcols.len() + 1))
    {
        xcols.push(pos);
    }
    if xcols.is_empty() {
        return Err(IoError::Format(
            "CSV header has no covariate column x1".into(),
        ));
    }
    Ok(rdr.into_records().map(move |rec| {
        let rec = rec?;
        let field = |c: usize| -> Result<f64, IoError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| IoError::Format(format!("cannot parse `{raw}` as a number")))
        };
        let int = |c: usize| -> Result<u64, IoError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<u64>()
                .map_err(|_| IoError::Format(format!("cannot parse `{raw}` as an index")))
        };
        let (t, i) = (int(ct)?, int(ci)?);
        let x = xcols
            .iter()
            .map(|&c| field(c))
            .collect::<Result<Vec<_>, _>>()?;
        let z = binary_z(t, i, field(cz)?)?;
        Ok(Observation::new(t, i, field(cy)?, x, z))
    }))
}

/// Reads a whole stream into memory.
pub fn read_stream<R: BufRead>(reader: R, format: RecordFormat) -> Result<Vec<TimeBatch>, IoError> {
    match format {
        RecordFormat::Ndjson => Batcher::new(ndjson_rows(reader)).collect(),
        RecordFormat::Csv => Batcher::new(csv_rows(reader)?).collect(),
    }
}

pub fn write_ndjson<W: Write>(batches: &[TimeBatch], mut out: W) -> Result<(), IoError> {
    for row in batches.iter().flat_map(|b| &b.rows) {
        let rec = RecordRef {
            t: row.t,
            i: row.subject,
            y: row.y,
            x: &row.x,
            z: row.z,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| IoError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(batches: &[TimeBatch], out: W) -> Result<(), IoError> {
    let d = batches.iter().find_map(TimeBatch::dim).unwrap_or(1);
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "i".to_string(), "y".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    header.push("z".to_string());
    wtr.write_record(&header)?;
    for row in batches.iter().flat_map(|b| &b.rows) {
        let mut rec = vec![
            row.t.to_string(),
            row.subject.to_string(),
            row.y.to_string(),
        ];
        rec.extend(row.x.iter().map(f64::to_string));
        rec.push(row.z.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_stream<W: Write>(
    batches: &[TimeBatch],
    format: RecordFormat,
    out: W,
) -> Result<(), IoError> {
    match format {
        RecordFormat::Ndjson => write_ndjson(batches, out),
        RecordFormat::Csv => write_csv(batches, out),
    }
}
