//! Telemetry framing over the twelve keypad tones.
//!
//! A record is five decimal fields separated and bracketed by `#`; the two
//! rightmost digits of every field are hundredths. Records are concatenated
//! oldest first, sharing the `#` at record boundaries, so a single record is
//! exactly `#f1#f2#f3#f4#f5#`.

use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use thiserror::Error;

use crate::reading::{field_cap, round_hundredths, Reading};
use crate::time::SimTime;

pub const FIELDS_PER_RECORD: usize = 5;
pub const MAX_FIELD_DIGITS: usize = 6;
pub const MIN_FIELD_DIGITS: usize = 2;
pub const MAX_RECORDS_PER_CALL: usize = 3;
pub const DEFAULT_TONE_RATE: f64 = 2.0;

/// Upper bound on separator placements tried while repairing one call.
const MAX_REPAIR_CANDIDATES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DtmfError {
    #[error("value {0} outside 0.00..=9999.99")]
    OutOfRange(Decimal),
    #[error("bad framing: {0}")]
    BadFraming(String),
    #[error("{0} fields is not a whole number of records")]
    BadFieldCount(usize),
    #[error("non-digit `{0}` inside a field")]
    NonDigit(char),
    #[error("{0} records per transmission; expected 1..=3")]
    BadRecordCount(usize),
    #[error("`{0}` is not a keypad tone")]
    InvalidSymbol(char),
}

/// One of the twelve keypad tones. A-D are deliberately absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToneSymbol {
    Digit(u8),
    Star,
    Pound,
}

impl ToneSymbol {
    pub fn digit(d: u8) -> Self {
        assert!(d < 10, "digit out of range");
        ToneSymbol::Digit(d)
    }

    pub fn as_char(self) -> char {
        match self {
            ToneSymbol::Digit(d) => char::from(b'0' + d),
            ToneSymbol::Star => '*',
            ToneSymbol::Pound => '#',
        }
    }

    pub fn from_char(c: char) -> Result<Self, DtmfError> {
        match c {
            '0'..='9' => Ok(ToneSymbol::Digit(c as u8 - b'0')),
            '*' => Ok(ToneSymbol::Star),
            '#' => Ok(ToneSymbol::Pound),
            other => Err(DtmfError::InvalidSymbol(other)),
        }
    }
}

impl fmt::Display for ToneSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Tones emitted at a constant rate, whatever the keying speed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneSequence {
    pub symbols: Vec<ToneSymbol>,
    /// Tones per second.
    pub rate: f64,
}

impl ToneSequence {
    pub fn new(symbols: Vec<ToneSymbol>) -> Self {
        Self {
            symbols,
            rate: DEFAULT_TONE_RATE,
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Seconds on the line.
    pub fn duration(&self) -> f64 {
        self.symbols.len() as f64 / self.rate
    }
}

impl fmt::Display for ToneSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.symbols {
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for ToneSequence {
    type Err = DtmfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .chars()
            .map(ToneSymbol::from_char)
            .collect::<Result<Vec<_>, _>>()
            .map(ToneSequence::new)
    }
}

/// `round(100 × value)`, at least two digits wide.
pub fn encode_field(value: Decimal) -> Result<String, DtmfError> {
    let hundredths = round_hundredths(value);
    if hundredths < Decimal::ZERO || hundredths > field_cap() {
        return Err(DtmfError::OutOfRange(value));
    }
    let scaled = (hundredths * Decimal::ONE_HUNDRED).trunc();
    Ok(format!("{scaled:0>width$}", width = MIN_FIELD_DIGITS))
}

pub fn decode_field(digits: &str) -> Result<Decimal, DtmfError> {
    if digits.is_empty() {
        return Err(DtmfError::BadFraming("empty field".into()));
    }
    if let Some(c) = digits.chars().find(|c| !c.is_ascii_digit()) {
        return Err(DtmfError::NonDigit(c));
    }
    if digits.len() > MAX_FIELD_DIGITS {
        return Err(DtmfError::BadFraming(format!("field `{digits}` wider than {MAX_FIELD_DIGITS} digits")));
    }
    let n: i64 = digits.parse().expect("checked digits");
    Ok(Decimal::new(n, 2))
}

fn push_str(symbols: &mut Vec<ToneSymbol>, text: &str) {
    symbols.extend(text.chars().map(|c| ToneSymbol::from_char(c).expect("digits only")));
}

/// Frames 1-3 records, oldest first.
pub fn encode_transmission(records: &[Reading]) -> Result<ToneSequence, DtmfError> {
    if records.is_empty() || records.len() > MAX_RECORDS_PER_CALL {
        return Err(DtmfError::BadRecordCount(records.len()));
    }
    let mut symbols = vec![ToneSymbol::Pound];
    for record in records {
        for value in record.values() {
            push_str(&mut symbols, &encode_field(value)?);
            symbols.push(ToneSymbol::Pound);
        }
    }
    Ok(ToneSequence::new(symbols))
}

fn split_fields(tones: &ToneSequence) -> Result<Vec<String>, DtmfError> {
    if tones.symbols.contains(&ToneSymbol::Star) {
        return Err(DtmfError::BadFraming("`*` is not part of a data frame".into()));
    }
    let text = tones.to_string();
    let inner = text
        .strip_prefix('#')
        .and_then(|t| t.strip_suffix('#'))
        .ok_or_else(|| DtmfError::BadFraming("frame must begin and end with `#`".into()))?;
    if inner.is_empty() {
        return Err(DtmfError::BadFraming("no fields".into()));
    }
    Ok(inner.split('#').map(str::to_string).collect())
}

/// Strict inverse of [`encode_transmission`]. Decoded readings carry
/// `taken_at = 0`; timestamps are reconstructed by the receiver.
pub fn decode_transmission(tones: &ToneSequence) -> Result<Vec<Reading>, DtmfError> {
    let fields = split_fields(tones)?;
    if fields.iter().any(String::is_empty) {
        return Err(DtmfError::BadFraming("empty field".into()));
    }
    if fields.len() % FIELDS_PER_RECORD != 0 {
        return Err(DtmfError::BadFieldCount(fields.len()));
    }
    fields
        .chunks(FIELDS_PER_RECORD)
        .map(|group| {
            let mut values = [Decimal::ZERO; FIELDS_PER_RECORD];
            for (slot, digits) in values.iter_mut().zip(group) {
                *slot = decode_field(digits)?;
            }
            Ok(Reading::from_values(values, SimTime::ZERO))
        })
        .collect()
}

/// Tones needed for `records` records whose fields are all
/// `max_field_digits` wide.
pub fn transmission_tone_count(records: usize, max_field_digits: usize) -> usize {
    if records == 0 {
        0
    } else {
        1 + records * FIELDS_PER_RECORD * (max_field_digits + 1)
    }
}

/// Worst-case seconds on the line for a batch.
pub fn call_budget(records: usize, max_field_digits: usize, rate: f64) -> f64 {
    let tones = transmission_tone_count(records, max_field_digits);
    if tones == 0 {
        0.0
    } else {
        tones as f64 / rate
    }
}

/// One record recovered from an impaired call. `None` marks a field that
/// lost at least one digit on the line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SalvagedRecord {
    /// Index within the transmitted batch, oldest first.
    pub position: usize,
    pub values: [Option<Decimal>; FIELDS_PER_RECORD],
}

impl SalvagedRecord {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Salvage {
    /// Records the batch is judged to have carried.
    pub batch_len: usize,
    pub records: Vec<SalvagedRecord>,
    pub dropped: usize,
    pub damaged_fields: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Tone(ToneSymbol),
    Erased,
}

#[derive(Clone, Default)]
struct FieldParse {
    digits: String,
    erased: usize,
}

/// Parses one candidate placement of separators; `None` if the grammar
/// cannot hold.
fn parse_candidate(slots: &[Slot], as_pound: &[bool]) -> Option<Vec<[Option<Decimal>; FIELDS_PER_RECORD]>> {
    let is_pound = |i: usize| match slots[i] {
        Slot::Tone(ToneSymbol::Pound) => true,
        Slot::Erased => as_pound[i],
        _ => false,
    };
    if slots.len() < 2 || !is_pound(0) || !is_pound(slots.len() - 1) {
        return None;
    }
    let mut fields = Vec::new();
    let mut current = FieldParse::default();
    for i in 1..slots.len() {
        if is_pound(i) {
            fields.push(std::mem::take(&mut current));
            continue;
        }
        match slots[i] {
            Slot::Tone(ToneSymbol::Digit(d)) => current.digits.push(char::from(b'0' + d)),
            Slot::Erased => current.erased += 1,
            _ => return None,
        }
    }
    if fields.is_empty() || fields.len() % FIELDS_PER_RECORD != 0 {
        return None;
    }
    let mut records = Vec::with_capacity(fields.len() / FIELDS_PER_RECORD);
    for group in fields.chunks(FIELDS_PER_RECORD) {
        let mut values = [None; FIELDS_PER_RECORD];
        for (slot, field) in values.iter_mut().zip(group) {
            let width = field.digits.len() + field.erased;
            if width == 0 || width > MAX_FIELD_DIGITS {
                return None;
            }
            if field.erased == 0 {
                *slot = Some(decode_field(&field.digits).ok()?);
            }
        }
        records.push(values);
    }
    Some(records)
}

fn combinations(n: usize, k: usize, mut visit: impl FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if !visit(&idx) {
            return;
        }
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Recovers what it can from a transmission heard with gaps.
///
/// `heard` holds one slot per emitted tone: `None` where the receiver
/// detected silence at a tone position. Each erasure is either a lost
/// separator or a lost digit. The decoder tries the fewest lost separators
/// that restore a whole number of five-field records; when several
/// placements fit, only records identical under every placement are kept.
pub fn salvage(heard: &[Option<ToneSymbol>]) -> Salvage {
    let mut slots: Vec<Slot> = heard
        .iter()
        .map(|s| s.map_or(Slot::Erased, Slot::Tone))
        .collect();
    // A frame always opens and closes with `#`; losing either shows up as a
    // digit at the edge.
    if !matches!(slots.first(), Some(Slot::Tone(ToneSymbol::Pound)) | Some(Slot::Erased)) {
        slots.insert(0, Slot::Erased);
    }
    if !matches!(slots.last(), Some(Slot::Tone(ToneSymbol::Pound)) | Some(Slot::Erased)) {
        slots.push(Slot::Erased);
    }
    let erasures: Vec<usize> = slots
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == Slot::Erased)
        .map(|(i, _)| i)
        .collect();

    for lost_pounds in 0..=erasures.len() {
        if binomial(erasures.len(), lost_pounds) > MAX_REPAIR_CANDIDATES {
            break;
        }
        let mut candidates: Vec<Vec<[Option<Decimal>; FIELDS_PER_RECORD]>> = Vec::new();
        let mut as_pound = vec![false; slots.len()];
        combinations(erasures.len(), lost_pounds, |chosen| {
            as_pound.iter_mut().for_each(|b| *b = false);
            for &c in chosen {
                as_pound[erasures[c]] = true;
            }
            if let Some(records) = parse_candidate(&slots, &as_pound) {
                candidates.push(records);
            }
            true
        });
        if candidates.is_empty() {
            continue;
        }
        let batch_len = candidates[0].len();
        if candidates.iter().any(|c| c.len() != batch_len) {
            return Salvage {
                batch_len,
                dropped: batch_len,
                ..Salvage::default()
            };
        }
        let mut out = Salvage {
            batch_len,
            ..Salvage::default()
        };
        for position in 0..batch_len {
            let first = candidates[0][position];
            if candidates.iter().all(|c| c[position] == first) {
                out.damaged_fields += first.iter().filter(|v| v.is_none()).count();
                out.records.push(SalvagedRecord {
                    position,
                    values: first,
                });
            } else {
                out.dropped += 1;
            }
        }
        return out;
    }
    // Nothing fits; the batch size itself is unknown.
    Salvage::default()
}

/// Rebuilds the erasure pattern from tone arrival times.
///
/// Tones leave the handset exactly `spacing` apart, so a gap of `k`
/// spacings means `k - 1` tones went missing in between.
pub fn erasures_from_arrivals(arrivals: &[(SimTime, ToneSymbol)], spacing_ms: u64) -> Vec<Option<ToneSymbol>> {
    let mut heard = Vec::with_capacity(arrivals.len());
    let mut previous: Option<SimTime> = None;
    for &(at, symbol) in arrivals {
        if let Some(prev) = previous {
            let gap = at.as_millis().saturating_sub(prev.as_millis());
            let slots = ((gap as f64) / spacing_ms as f64).round() as usize;
            heard.extend(std::iter::repeat_n(None, slots.saturating_sub(1)));
        }
        heard.push(Some(symbol));
        previous = Some(at);
    }
    heard
}
