//! Plot-ready chart data from the store: one row per logged reading plus a
//! `#`-prefixed summary block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use chrono::{NaiveDate, NaiveDateTime};
use rust_decimal::Decimal;
use thiserror::Error;

use crate::reading::Field;
use crate::store::{query, Source, StoredRecord};
use crate::time::format_iso;

/// Alarms closer together than this belong to one burst.
pub const ALARM_BURST_GAP: Duration = Duration::from_secs(120);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("no records for device {device} in the selected range")]
    EmptySelection { device: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChartRow {
    pub time: NaiveDateTime,
    pub battery_v: Option<Decimal>,
    pub array_a: Option<Decimal>,
    pub kwh: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlarmBurst {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Summary {
    pub daily_kwh: Vec<(NaiveDate, Decimal)>,
    pub battery_min: Option<Decimal>,
    pub battery_max: Option<Decimal>,
    pub alarms: Vec<AlarmBurst>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub device: String,
    pub rows: Vec<ChartRow>,
    pub summary: Summary,
}

pub fn report(
    records: &[StoredRecord],
    device: &str,
    from: Option<NaiveDateTime>,
    to: Option<NaiveDateTime>,
) -> Result<Report, ReportError> {
    let selected = query(records, device, from, to);
    if selected.is_empty() {
        return Err(ReportError::EmptySelection { device: device.to_string() });
    }

    let rows: Vec<ChartRow> = selected
        .iter()
        .filter(|r| r.source == Source::Poll)
        .map(|r| ChartRow {
            time: r.timestamp,
            battery_v: r.get(Field::BatteryVoltage),
            array_a: r.get(Field::ArrayCurrent),
            kwh: r.get(Field::EnergyTotal),
        })
        .collect();

    let batteries = rows.iter().filter_map(|r| r.battery_v);
    let summary = Summary {
        daily_kwh: daily_kwh(&rows),
        battery_min: batteries.clone().min(),
        battery_max: batteries.max(),
        alarms: alarm_bursts(selected.iter().filter(|r| r.source == Source::Alarm).map(|r| r.timestamp)),
    };
    Ok(Report {
        device: device.to_string(),
        rows,
        summary,
    })
}

/// The energy counter is cumulative, so a day's yield is its last reading
/// minus the previous day's last (or its own first, for the opening day).
fn daily_kwh(rows: &[ChartRow]) -> Vec<(NaiveDate, Decimal)> {
    let mut per_day: BTreeMap<NaiveDate, (Decimal, Decimal)> = BTreeMap::new();
    for row in rows {
        if let Some(kwh) = row.kwh {
            per_day
                .entry(row.time.date())
                .and_modify(|(_, last)| *last = kwh)
                .or_insert((kwh, kwh));
        }
    }
    let mut out = Vec::new();
    let mut previous: Option<Decimal> = None;
    for (day, (first, last)) in per_day {
        let base = previous.unwrap_or(first);
        out.push((day, (last - base).max(Decimal::ZERO)));
        previous = Some(last);
    }
    out
}

fn alarm_bursts(times: impl Iterator<Item = NaiveDateTime>) -> Vec<AlarmBurst> {
    let gap = chrono::Duration::from_std(ALARM_BURST_GAP).expect("small duration");
    let mut bursts: Vec<AlarmBurst> = Vec::new();
    for t in times {
        match bursts.last_mut() {
            Some(b) if t - b.end <= gap => {
                b.end = t;
                b.calls += 1;
            }
            _ => bursts.push(AlarmBurst { start: t, end: t, calls: 1 }),
        }
    }
    bursts
}

fn cell(v: Option<Decimal>) -> String {
    v.map_or(String::new(), |d| format!("{d:.2}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# device {}", self.device);
        out.push_str("time\tbattery_v\tarray_a\tkwh\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                format_iso(row.time),
                cell(row.battery_v),
                cell(row.array_a),
                cell(row.kwh)
            );
        }
        out.push_str("# summary\n");
        for (day, kwh) in &self.summary.daily_kwh {
            let _ = writeln!(out, "# kwh\t{day}\t{kwh:.2}");
        }
        let _ = writeln!(out, "# battery_v_min\t{}", cell(self.summary.battery_min));
        let _ = writeln!(out, "# battery_v_max\t{}", cell(self.summary.battery_max));
        for b in &self.summary.alarms {
            let _ = writeln!(out, "# alarm\t{}\t{}\t{}", format_iso(b.start), format_iso(b.end), b.calls);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::parse_iso;

    fn poll(ts: &str, battery: i64, kwh: i64) -> StoredRecord {
        StoredRecord {
            timestamp: parse_iso(ts).unwrap(),
            device: "0977000001".into(),
            source: Source::Poll,
            values: [
                Some(Decimal::ZERO),
                Some(Decimal::new(150, 2)),
                Some(Decimal::new(battery, 2)),
                Some(Decimal::ZERO),
                Some(Decimal::new(kwh, 0)),
            ],
            call_id: 0,
        }
    }

    fn alarm(ts: &str) -> StoredRecord {
        StoredRecord {
            source: Source::Alarm,
            values: [None; 5],
            ..poll(ts, 0, 0)
        }
    }

    #[test]
    fn single_record_gives_one_row() {
        let r = report(&[poll("2010-11-27T10:00:15", 1253, 0)], "0977000001", None, None).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.summary.battery_min, Some(Decimal::new(1253, 2)));
        let text = r.to_text();
        assert!(text.contains("2010-11-27T10:00:15\t12.53\t1.50\t0.00\n"), "{text}");
    }

    #[test]
    fn empty_range_is_an_error() {
        let records = [poll("2010-11-27T10:00:15", 1253, 0)];
        let from = parse_iso("2011-01-01T00:00:00").ok();
        assert_eq!(
            report(&records, "0977000001", from, None),
            Err(ReportError::EmptySelection { device: "0977000001".into() })
        );
        assert!(report(&records, "0977000002", None, None).is_err());
    }

    #[test]
    fn summary_groups_days_and_alarm_bursts() {
        let records = [
            poll("2010-11-27T10:00:15", 1250, 3),
            poll("2010-11-27T20:00:15", 1270, 4),
            alarm("2010-11-28T00:45:02"),
            alarm("2010-11-28T00:45:32"),
            alarm("2010-11-28T03:00:00"),
            poll("2010-11-28T02:00:15", 1149, 4),
            poll("2010-11-28T14:00:15", 1260, 6),
        ];
        let r = report(&records, "0977000001", None, None).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(
            r.summary.daily_kwh,
            vec![
                (NaiveDate::from_ymd_opt(2010, 11, 27).unwrap(), Decimal::ONE),
                (NaiveDate::from_ymd_opt(2010, 11, 28).unwrap(), Decimal::TWO),
            ]
        );
        assert_eq!(r.summary.battery_min, Some(Decimal::new(1149, 2)));
        assert_eq!(r.summary.battery_max, Some(Decimal::new(1270, 2)));
        assert_eq!(r.summary.alarms.len(), 2);
        assert_eq!(r.summary.alarms[0].calls, 2);
        assert!(r.to_text().contains("# alarm\t2010-11-28T00:45:02\t2010-11-28T00:45:32\t2\n"));
    }
}
