//! Append-only, tab-separated record store and the notification stream.
//!
//! One record per line:
//! `timestamp  device  source  v1..v5  call_id`, values fixed to two
//! decimals and left empty when absent.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rust_decimal::Decimal;
use thiserror::Error;

use crate::reading::{round_hundredths, Field};
use crate::time::{format_iso, parse_iso};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Poll,
    Alarm,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Poll => "poll",
            Source::Alarm => "alarm",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "poll" => Ok(Source::Poll),
            "alarm" => Ok(Source::Alarm),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub timestamp: NaiveDateTime,
    pub device: String,
    pub source: Source,
    /// Transmission order; `None` for alarms and for fields lost on the line.
    pub values: [Option<Decimal>; 5],
    pub call_id: u64,
}

pub type RecordKey = (String, NaiveDateTime, Source);

impl StoredRecord {
    pub fn key(&self) -> RecordKey {
        (self.device.clone(), self.timestamp, self.source)
    }

    pub fn get(&self, field: Field) -> Option<Decimal> {
        self.values[field.index()]
    }

    pub fn to_line(&self) -> String {
        let mut cols = vec![format_iso(self.timestamp), self.device.clone(), self.source.to_string()];
        cols.extend(
            self.values
                .iter()
                .map(|v| v.map_or(String::new(), |d| format!("{:.2}", round_hundredths(d)))),
        );
        cols.push(self.call_id.to_string());
        cols.join("\t")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(format!("expected 9 tab-separated columns, got {}", cols.len()));
        }
        let timestamp = parse_iso(cols[0]).map_err(|e| format!("timestamp `{}`: {e}", cols[0]))?;
        let source = cols[2].parse()?;
        let mut values = [None; 5];
        for (slot, text) in values.iter_mut().zip(&cols[3..8]) {
            if !text.is_empty() {
                *slot = Some(Decimal::from_str(text).map_err(|e| format!("value `{text}`: {e}"))?);
            }
        }
        let call_id = cols[8].parse().map_err(|e| format!("call id `{}`: {e}", cols[8]))?;
        Ok(Self {
            timestamp,
            device: cols[1].to_string(),
            source,
            values,
            call_id,
        })
    }
}

/// Records in memory, mirrored line by line to an optional file.
#[derive(Debug, Default)]
pub struct Store {
    records: Vec<StoredRecord>,
    keys: HashSet<RecordKey>,
    file: Option<File>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending, loading what is already there so
    /// duplicates are still refused.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut store = Self::in_memory();
        if path.exists() {
            for record in load(path)? {
                store.keys.insert(record.key());
                store.records.push(record);
            }
        }
        store.file = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(store)
    }

    /// Appends unless the `(device, timestamp, source)` key is already
    /// stored. Returns whether the record was new.
    pub fn append(&mut self, record: StoredRecord) -> Result<bool, StoreError> {
        if !self.keys.insert(record.key()) {
            return Ok(false);
        }
        if let Some(file) = &mut self.file {
            writeln!(file, "{}", record.to_line())?;
        }
        self.records.push(record);
        Ok(true)
    }

    pub fn records(&self) -> &[StoredRecord] {
        &self.records
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.keys.contains(key)
    }

    pub fn query(&self, device: &str, from: Option<NaiveDateTime>, to: Option<NaiveDateTime>) -> Vec<StoredRecord> {
        query(&self.records, device, from, to)
    }
}

pub fn load(path: &Path) -> Result<Vec<StoredRecord>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(StoredRecord::from_line(&line).map_err(|message| StoreError::Parse { line: i + 1, message })?);
    }
    Ok(records)
}

/// `device`'s records within `[from, to]`, oldest first; ties keep store
/// order.
pub fn query(
    records: &[StoredRecord],
    device: &str,
    from: Option<NaiveDateTime>,
    to: Option<NaiveDateTime>,
) -> Vec<StoredRecord> {
    let mut hits: Vec<StoredRecord> = records
        .iter()
        .filter(|r| r.device == device)
        .filter(|r| from.is_none_or(|f| r.timestamp >= f))
        .filter(|r| to.is_none_or(|t| r.timestamp <= t))
        .cloned()
        .collect();
    hits.sort_by_key(|r| r.timestamp);
    hits
}

pub const LOW_VOLTAGE: &str = "LOW_VOLTAGE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub timestamp: NaiveDateTime,
    pub device: String,
    pub kind: &'static str,
}

impl Notification {
    pub fn low_voltage(timestamp: NaiveDateTime, device: &str) -> Self {
        Self {
            timestamp,
            device: device.to_string(),
            kind: LOW_VOLTAGE,
        }
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", format_iso(self.timestamp), self.device, self.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::parse_iso;

    fn record(ts: &str, source: Source, battery: Option<&str>) -> StoredRecord {
        let mut values = [None; 5];
        values[2] = battery.map(|b| Decimal::from_str(b).unwrap());
        StoredRecord {
            timestamp: parse_iso(ts).unwrap(),
            device: "0977000001".into(),
            source,
            values,
            call_id: 3,
        }
    }

    #[test]
    fn line_format() {
        let r = StoredRecord {
            values: [Some(Decimal::new(1366, 2)), Some(Decimal::new(617, 2)), Some(Decimal::new(1376, 2)), Some(Decimal::ZERO), Some(Decimal::new(5, 1))],
            ..record("2010-11-27T10:00:15", Source::Poll, None)
        };
        assert_eq!(r.to_line(), "2010-11-27T10:00:15\t0977000001\tpoll\t13.66\t6.17\t13.76\t0.00\t0.50\t3");
        assert_eq!(StoredRecord::from_line(&r.to_line()).unwrap(), r);
        let alarm = record("2010-11-28T00:50:01", Source::Alarm, None);
        assert_eq!(alarm.to_line(), "2010-11-28T00:50:01\t0977000001\talarm\t\t\t\t\t\t3");
        assert_eq!(StoredRecord::from_line(&alarm.to_line()).unwrap(), alarm);
    }

    #[test]
    fn duplicates_are_refused() {
        let mut store = Store::in_memory();
        assert!(store.append(record("2010-11-27T10:00:15", Source::Poll, Some("12.5"))).unwrap());
        assert!(!store.append(record("2010-11-27T10:00:15", Source::Poll, Some("12.6"))).unwrap());
        assert!(store.append(record("2010-11-27T10:00:15", Source::Alarm, None)).unwrap());
        assert_eq!(store.records().len(), 2);
    }

    #[test]
    fn query_orders_and_filters() {
        let mut store = Store::in_memory();
        for ts in ["2010-11-27T12:00:15", "2010-11-27T10:00:15", "2010-11-27T11:00:15"] {
            store.append(record(ts, Source::Poll, Some("12.0"))).unwrap();
        }
        let all = store.query("0977000001", None, None);
        assert!(all.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let some = store.query(
            "0977000001",
            Some(parse_iso("2010-11-27T10:30:00").unwrap()),
            Some(parse_iso("2010-11-27T11:30:00").unwrap()),
        );
        assert_eq!(some.len(), 1);
        assert!(store.query("0977000001", Some(parse_iso("2011-01-01T00:00:00").unwrap()), None).is_empty());
        assert!(store.query("other", None, None).is_empty());
    }

    #[test]
    fn file_backed_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.tsv");
        {
            let mut store = Store::open(&path).unwrap();
            store.append(record("2010-11-27T10:00:15", Source::Poll, Some("12.5"))).unwrap();
        }
        let mut store = Store::open(&path).unwrap();
        assert!(!store.append(record("2010-11-27T10:00:15", Source::Poll, Some("12.5"))).unwrap());
        store.append(record("2010-11-27T11:00:15", Source::Poll, Some("12.4"))).unwrap();
        assert_eq!(load(&path).unwrap().len(), 2);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.tsv");
        let good = record("2010-11-27T10:00:15", Source::Poll, Some("12.5")).to_line();
        std::fs::write(&path, format!("{good}\nnot a record\n")).unwrap();
        match load(&path) {
            Err(StoreError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
