//! Raw vital-sign observations and CSV ingestion.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vital {
    MeanBP,
    HR,
}

impl Vital {
    pub const ALL: [Vital; 2] = [Vital::MeanBP, Vital::HR];

    pub fn name(self) -> &'static str {
        match self {
            Vital::MeanBP => "MeanBP",
            Vital::HR => "HR",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Vital> {
        Vital::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Vital {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Vital {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Vital::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Data(format!("unknown vital {s:?}")))
    }
}

/// One timestamped observation (epoch seconds).
#[derive(Clone, Debug, PartialEq)]
pub struct VitalsRecord {
    pub patient_id: String,
    pub vital: Vital,
    pub timestamp: i64,
    pub value: f64,
}

/// A CSV row that could not be turned into a record.
#[derive(Clone, Debug, PartialEq)]
pub struct Reject {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<VitalsRecord>,
    pub rejects: Vec<Reject>,
}

pub const CSV_HEADER: [&str; 4] = ["patient_id", "vital", "timestamp", "value"];
pub const ANCHOR_HEADER: [&str; 2] = ["patient_id", "anchor"];

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Format(e.to_string()))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got.is_empty() || got.iter().all(|h| h.is_empty()) {
        return Err(Error::Format(format!("missing header, expected `{}`", want.join(","))));
    }
    if got != want {
        return Err(Error::Format(format!(
            "unexpected header `{}`, expected `{}`",
            got.join(","),
            want.join(",")
        )));
    }
    Ok(())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input)
}

fn parse_row(row: &csv::StringRecord) -> std::result::Result<VitalsRecord, String> {
    if row.len() != 4 {
        return Err(format!("expected 4 fields, found {}", row.len()));
    }
    let patient_id = row[0].trim();
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let vital = row[1].parse::<Vital>().map_err(|_| format!("unknown vital {:?}", &row[1]))?;
    let timestamp = row[2]
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("unparseable timestamp {:?}", &row[2]))?;
    let value = row[3]
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("unparseable value {:?}", &row[3]))?;
    if !value.is_finite() {
        return Err("non-finite value".into());
    }
    Ok(VitalsRecord {
        patient_id: patient_id.to_string(),
        vital,
        timestamp,
        value,
    })
}

/// Parses `patient_id,vital,timestamp,value` rows. Bad rows are collected
/// as rejects; only a missing or wrong header fails the whole input.
pub fn ingest_reader<R: Read>(input: R) -> Result<Ingested> {
    let mut rdr = reader(input);
    check_header(&mut rdr, &CSV_HEADER)?;
    let mut out = Ingested::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        match row {
            Ok(row) => match parse_row(&row) {
                Ok(rec) => out.records.push(rec),
                Err(reason) => out.rejects.push(Reject {
                    line: row.position().map_or(line, |p| p.line()),
                    reason,
                }),
            },
            Err(e) => out.rejects.push(Reject {
                line,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn ingest_csv(path: &Path) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file))
}

/// Parses `patient_id,anchor` rows (anchor = diagnosis time, epoch seconds).
pub fn ingest_anchors_reader<R: Read>(input: R) -> Result<Vec<(String, i64)>> {
    let mut rdr = reader(input);
    check_header(&mut rdr, &ANCHOR_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let bad = || Error::Data(format!("anchor row {}: expected `patient_id,anchor`", i + 2));
        if row.len() != 2 || row[0].trim().is_empty() {
            return Err(bad());
        }
        let t = row[1].trim().parse::<i64>().map_err(|_| bad())?;
        out.push((row[0].trim().to_string(), t));
    }
    Ok(out)
}

pub fn ingest_anchors(path: &Path) -> Result<Vec<(String, i64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_anchors_reader(std::io::BufReader::new(file))
}

/// Writes records as CSV with the ingestion header.
pub fn write_records_csv(path: &Path, records: &[VitalsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.patient_id.as_str(),
            r.vital.name(),
            &r.timestamp.to_string(),
            &r.value.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_anchors_csv(path: &Path, anchors: &[(String, i64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(ANCHOR_HEADER).map_err(err)?;
    for (p, t) in anchors {
        w.write_record([p.as_str(), &t.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
