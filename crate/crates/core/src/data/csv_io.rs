use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SeriesDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// How to interpret a CSV file: the first column is a timestamp, the rest
/// are numeric channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub split: SplitSpec,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesDataset> {
    read_csv(BufReader::new(File::open(path)?), schema)
}

/// Parses a header-first CSV. Lines starting with `#` are skipped.
///
/// Data rows are numbered from 1 in errors; `line` is the physical line in
/// the input.
pub fn read_csv(reader: impl Read, schema: &CsvSchema) -> Result<SeriesDataset> {
    // Strip comment lines first, remembering the physical line of each kept line.
    let mut kept = String::new();
    let mut line_of = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim_start().starts_with('#') || line.trim().is_empty() {
            continue;
        }
        kept.push_str(&line);
        kept.push('\n');
        line_of.push(i + 1);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(kept.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::invalid(
            "csv header",
            "need a timestamp column and at least one channel",
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = names.len();

    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let line = line_of.get(row).copied().unwrap_or(0);
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::CsvParse {
                row,
                line,
                column: format!("{} fields", rec.len()),
                value: format!("expected {}", d + 1),
            });
        }
        stamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let column = names[c].clone();
            if cell.is_empty()
                || cell.eq_ignore_ascii_case("nan")
                || cell.eq_ignore_ascii_case("na")
            {
                return Err(Error::CsvMissing { row, line, column });
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::CsvParse {
                        row,
                        line,
                        column,
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    let n = stamps.len();
    if n == 0 {
        return Err(Error::invalid("csv", "no data rows"));
    }
    warn_if_non_monotone(&stamps);
    let split = schema.split.resolve(n)?;
    SeriesDataset::new(Mat::from_vec(n, d, values)?, names, split)
}

fn warn_if_non_monotone(stamps: &[String]) {
    let numeric: Option<Vec<f64>> = stamps.iter().map(|s| s.parse().ok()).collect();
    let bad = match numeric {
        Some(v) => v.windows(2).position(|w| w[1] <= w[0]),
        // ISO-8601 style stamps order lexicographically.
        None => stamps.windows(2).position(|w| w[1] <= w[0]),
    };
    if let Some(i) = bad {
        log::warn!(
            "timestamps are not strictly increasing at data row {} ({:?} after {:?})",
            i + 2,
            stamps[i + 1],
            stamps[i]
        );
    }
}

/// Writes `values` with a `timestamp` column holding the row index.
///
/// `comment`, if given, is written first as `#`-prefixed lines.
pub fn write_csv(
    values: &Mat,
    names: &[String],
    writer: impl Write,
    comment: Option<&str>,
) -> Result<()> {
    if names.len() != values.cols() {
        return Err(Error::shape(
            "write_csv",
            format!("{} names for {} columns", names.len(), values.cols()),
        ));
    }
    let mut writer = writer;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(writer, "# {line}")?;
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..values.rows() {
        let mut rec = vec![i.to_string()];
        // `{:?}` prints the shortest representation that round-trips exactly.
        rec.extend(values.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
