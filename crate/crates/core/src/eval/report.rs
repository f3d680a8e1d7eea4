//! Long-format metric tables: one `(method, metric, value, n, seed)` row per number.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

const HEADER: [&str; 5] = ["method", "metric", "value", "n", "seed"];

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_report(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_to_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_report(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_report(input: impl Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(HEADER) {
        return Err(Error::Format(format!("unexpected report header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
