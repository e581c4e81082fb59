//! The monitoring server: dials devices on a fixed cadence, decodes what
//! they send, dates each record, refuses duplicates and raises
//! notifications on alarm rings.

use std::time::Duration;

use chrono::NaiveDateTime;
use rust_decimal::Decimal;
use thiserror::Error;

use crate::dtmf::{decode_transmission, erasures_from_arrivals, salvage, Salvage, SalvagedRecord};
use crate::store::{Notification, Source, Store, StoreError, StoredRecord};
use crate::telco::{CallSession, Network, RingPlan, TelcoError};
use crate::time::{Calendar, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct CollectorConfig {
    pub number: String,
    pub device_numbers: Vec<String>,
    pub poll_cadence: Duration,
    /// Dial this long after each cadence boundary.
    pub dial_offset: Duration,
    pub tariff_per_minute: Decimal,
    /// The devices' log interval, used to date history records.
    pub log_interval: Duration,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            number: "0211000000".into(),
            device_numbers: vec!["0977000001".into()],
            poll_cadence: Duration::from_secs(3 * 3600),
            dial_offset: Duration::from_secs(15),
            tariff_per_minute: Decimal::ZERO,
            log_interval: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("invalid collector config: {0}")]
    InvalidConfig(String),
    #[error("{0} did not answer")]
    NoAnswer(String),
    #[error("{device}: {dropped} records lost to line errors")]
    DecodeError { device: String, dropped: usize },
    #[error("ring from unregistered number {0}")]
    UnknownCaller(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<(), CollectorError> {
        let bad = |m: &str| Err(CollectorError::InvalidConfig(m.into()));
        if self.poll_cadence < self.log_interval {
            return bad("poll_cadence must be at least the device log_interval");
        }
        if self.dial_offset >= self.poll_cadence {
            return bad("dial_offset must be shorter than poll_cadence");
        }
        if self.device_numbers.is_empty() {
            return bad("no devices registered");
        }
        if self.tariff_per_minute < Decimal::ZERO {
            return bad("tariff must not be negative");
        }
        Ok(())
    }

    /// Instants at which polling calls go out, up to `horizon`.
    pub fn dial_times(&self, horizon: SimTime) -> Vec<SimTime> {
        let mut times = Vec::new();
        let mut t = SimTime::ZERO + self.dial_offset;
        while t <= horizon {
            times.push(t);
            t = t + self.poll_cadence;
        }
        times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CollectorStats {
    pub calls_placed: usize,
    pub answered: usize,
    pub no_answer: usize,
    pub records_stored: usize,
    pub duplicates: usize,
    pub records_dropped: usize,
    pub damaged_fields: usize,
    pub alarms: usize,
    pub unknown_callers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PollOutcome {
    pub stored: Vec<StoredRecord>,
    pub batch_len: usize,
    pub dropped: usize,
    pub damaged_fields: usize,
    pub duplicates: usize,
}

#[derive(Debug)]
pub struct Collector {
    pub config: CollectorConfig,
    pub calendar: Calendar,
    pub store: Store,
    pub notifications: Vec<Notification>,
    pub stats: CollectorStats,
}

/// Decodes what reached the collector. A clean line decodes strictly;
/// anything else goes through erasure-aware salvage.
pub fn recover(session: &CallSession, listener: &str, spacing: Duration) -> Salvage {
    let heard = session.heard_by(listener);
    let symbols: Vec<_> = heard.iter().map(|&(_, s)| s).collect();
    let erasures = erasures_from_arrivals(&heard, spacing.as_millis() as u64);
    if erasures.len() == symbols.len() {
        let tones = crate::dtmf::ToneSequence::new(symbols);
        if let Ok(readings) = decode_transmission(&tones) {
            return Salvage {
                batch_len: readings.len(),
                records: readings
                    .iter()
                    .enumerate()
                    .map(|(position, r)| SalvagedRecord {
                        position,
                        values: r.values().map(Some),
                    })
                    .collect(),
                dropped: 0,
                damaged_fields: 0,
            };
        }
    }
    salvage(&erasures)
}

impl Collector {
    pub fn new(config: CollectorConfig, calendar: Calendar, store: Store) -> Result<Self, CollectorError> {
        config.validate()?;
        Ok(Self {
            config,
            calendar,
            store,
            notifications: Vec::new(),
            stats: CollectorStats::default(),
        })
    }

    fn stamp(&self, at: SimTime) -> NaiveDateTime {
        self.calendar.at_secs(at)
    }

    /// Dials `number`. An unreachable device is a `NoAnswer`, retried at
    /// the next cadence boundary.
    pub fn poll_device(&mut self, net: &mut Network, number: &str, at: SimTime) -> Result<RingPlan, CollectorError> {
        self.stats.calls_placed += 1;
        match net.dial(&self.config.number, number, at) {
            Ok(plan) => Ok(plan),
            Err(TelcoError::Unreachable(_) | TelcoError::UnknownNumber(_)) => {
                self.stats.no_answer += 1;
                Err(CollectorError::NoAnswer(number.to_string()))
            }
            Err(other) => {
                self.stats.no_answer += 1;
                Err(CollectorError::NoAnswer(format!("{number}: {other}")))
            }
        }
    }

    /// Files what a finished polling call delivered. The freshest record
    /// is dated at the answer time, each earlier one a log interval
    /// before the next.
    pub fn on_call_ended(&mut self, session: &CallSession, tone_period: Duration) -> Result<PollOutcome, CollectorError> {
        let Some(answered_at) = session.answered_at else {
            self.stats.no_answer += 1;
            return Err(CollectorError::NoAnswer(session.callee.clone()));
        };
        self.stats.answered += 1;
        let recovered = recover(session, &self.config.number, tone_period);
        let answered = self.stamp(answered_at);
        let step = chrono::Duration::from_std(self.config.log_interval).expect("log interval fits");
        let mut outcome = PollOutcome {
            batch_len: recovered.batch_len,
            dropped: recovered.dropped,
            damaged_fields: recovered.damaged_fields,
            ..PollOutcome::default()
        };
        for record in &recovered.records {
            let age = (recovered.batch_len - 1 - record.position) as i32;
            let stored = StoredRecord {
                timestamp: answered - step * age,
                device: session.callee.clone(),
                source: Source::Poll,
                values: record.values,
                call_id: session.id.0,
            };
            if self.store.append(stored.clone())? {
                outcome.stored.push(stored);
            } else {
                outcome.duplicates += 1;
            }
        }
        self.stats.records_stored += outcome.stored.len();
        self.stats.duplicates += outcome.duplicates;
        self.stats.records_dropped += outcome.dropped;
        self.stats.damaged_fields += outcome.damaged_fields;
        if outcome.dropped > 0 || recovered.batch_len == 0 {
            return Err(CollectorError::DecodeError {
                device: session.callee.clone(),
                dropped: outcome.dropped.max(1),
            });
        }
        Ok(outcome)
    }

    /// A device ringing in is an alarm; the caller ID is the whole message.
    pub fn on_alarm_call(&mut self, caller: &str, call_id: u64, at: SimTime) -> Result<Notification, CollectorError> {
        if !self.config.device_numbers.iter().any(|n| n == caller) {
            self.stats.unknown_callers += 1;
            return Err(CollectorError::UnknownCaller(caller.to_string()));
        }
        let timestamp = self.stamp(at);
        self.store.append(StoredRecord {
            timestamp,
            device: caller.to_string(),
            source: Source::Alarm,
            values: [None; 5],
            call_id,
        })?;
        let note = Notification::low_voltage(timestamp, caller);
        self.notifications.push(note.clone());
        self.stats.alarms += 1;
        Ok(note)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtmf::encode_transmission;
    use crate::keypad::{Key, KeyEvent};
    use crate::reading::Reading;
    use crate::telco::{Impairment, TelcoConfig};
    use crate::time::parse_iso;
    use std::str::FromStr;

    const DEVICE: &str = "0977000001";
    const SERVER: &str = "0211000000";

    fn collector() -> Collector {
        let calendar = Calendar::new(parse_iso("2010-11-27T06:00:00").unwrap());
        Collector::new(CollectorConfig::default(), calendar, Store::in_memory()).unwrap()
    }

    fn net(p: f64, seed: u64) -> Network {
        let mut net = Network::new(TelcoConfig {
            impairment: Impairment {
                tone_drop_probability: p,
                seed,
            },
            ..TelcoConfig::default()
        });
        net.add_handset(DEVICE, 1, true);
        net.add_handset(SERVER, 8, true);
        net
    }

    fn reading(v: &str) -> Reading {
        let mut r = Reading::from_csv("13.66,6.17,13.76,0,0.50").unwrap();
        r.battery_voltage = Decimal::from_str(v).unwrap();
        r
    }

    /// Answers, keys `records` in and hangs up once drained.
    fn call(net: &mut Network, c: &mut Collector, at: SimTime, records: &[Reading]) -> Result<PollOutcome, CollectorError> {
        let plan = c.poll_device(net, DEVICE, at)?;
        let start = at + Duration::from_millis(200);
        net.press_key(DEVICE, KeyEvent::new(Key::Start, Duration::from_millis(500)), start).unwrap();
        let mut t = start + Duration::from_millis(600);
        let tones = encode_transmission(records).unwrap();
        for &sym in &tones.symbols {
            net.press_key(DEVICE, KeyEvent::new(Key::Tone(sym), Duration::from_millis(100)), t).unwrap();
            t = t + Duration::from_millis(200);
        }
        let drained = start + Duration::from_millis(500) + Duration::from_millis(500) * (tones.len() as u32 + 1);
        net.press_key(DEVICE, KeyEvent::new(Key::Power, Duration::from_millis(200)), drained).unwrap();
        c.on_call_ended(net.session(plan.call), net.tone_period())
    }

    #[test]
    fn three_records_spaced_one_log_interval() {
        let mut n = net(0.0, 1);
        let mut c = collector();
        let out = call(&mut n, &mut c, SimTime::from_secs(3 * 3600 + 15), &[reading("12.10"), reading("12.20"), reading("12.30")]).unwrap();
        assert_eq!(out.stored.len(), 3);
        let stamps: Vec<String> = out.stored.iter().map(|r| crate::time::format_iso(r.timestamp)).collect();
        assert_eq!(stamps, ["2010-11-27T07:00:15", "2010-11-27T08:00:15", "2010-11-27T09:00:15"]);
        assert_eq!(out.stored[0].values[2], Some(Decimal::new(1210, 2)));
    }

    #[test]
    fn single_record_from_a_fresh_device() {
        let mut n = net(0.0, 1);
        let mut c = collector();
        let out = call(&mut n, &mut c, SimTime::from_secs(60), &[reading("12.10")]).unwrap();
        assert_eq!(out.stored.len(), 1);
    }

    #[test]
    fn resent_history_is_deduplicated() {
        let mut n = net(0.0, 1);
        let mut c = collector();
        let t = SimTime::from_secs(3 * 3600 + 15);
        call(&mut n, &mut c, t, &[reading("12.10"), reading("12.20")]).unwrap();
        // same answer offset one hour later: the older record repeats
        let later = t + Duration::from_secs(3600);
        let out = call(&mut n, &mut c, later, &[reading("12.20"), reading("12.30")]).unwrap();
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.stored.len(), 1);
        assert_eq!(c.store.records().len(), 3);
    }

    #[test]
    fn unreachable_device_is_no_answer() {
        let mut n = net(0.0, 1);
        n.add_handset("0977000009", 1, false);
        let mut c = collector();
        let err = c.poll_device(&mut n, "0977000009", SimTime::from_secs(15)).unwrap_err();
        assert!(matches!(err, CollectorError::NoAnswer(_)));
        assert_eq!(c.stats.no_answer, 1);
    }

    #[test]
    fn alarm_from_known_and_unknown_callers() {
        let mut c = collector();
        let note = c.on_alarm_call(DEVICE, 7, SimTime::from_secs(67_800)).unwrap();
        assert_eq!(note.to_line(), "2010-11-28T00:50:00\t0977000001\tLOW_VOLTAGE");
        assert_eq!(c.store.records()[0].source, Source::Alarm);
        assert!(c.store.records()[0].values.iter().all(Option::is_none));
        c.on_alarm_call(DEVICE, 8, SimTime::from_secs(67_830)).unwrap();
        assert_eq!(c.store.records().len(), 2);
        assert!(matches!(c.on_alarm_call("0999", 9, SimTime::from_secs(1)), Err(CollectorError::UnknownCaller(_))));
        assert_eq!(c.store.records().len(), 2);
    }

    #[test]
    fn impaired_channel_salvage_is_seed_deterministic() {
        let records = [reading("12.10"), reading("12.20"), reading("12.30")];
        let run = |seed| {
            let mut n = net(0.05, seed);
            let mut c = collector();
            let _ = call(&mut n, &mut c, SimTime::from_secs(3600), &records);
            c.store.records().to_vec()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn dial_schedule() {
        let cfg = CollectorConfig::default();
        let times = cfg.dial_times(SimTime::from_secs(24 * 3600 + 300));
        assert_eq!(times.len(), 9);
        assert_eq!(times[1], SimTime::from_secs(3 * 3600 + 15));
        let bad = CollectorConfig {
            poll_cadence: Duration::from_secs(1800),
            ..CollectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
