//! Simulation time, the deterministic event scheduler, and clocks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{NaiveDateTime, TimeDelta};

/// Milliseconds since the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(secs: u64) -> Self {
        SimTime(secs * 1000)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * 1000.0).round().max(0.0) as u64)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn whole_secs(self) -> u64 {
        self.0 / 1000
    }

    pub fn saturating_sub(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_sub(d.as_millis() as u64))
    }

    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0 + rhs.as_millis() as u64)
    }
}

impl Sub<SimTime> for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

/// Maps simulation time onto the calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calendar {
    pub start: NaiveDateTime,
}

pub const ISO_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

impl Calendar {
    pub fn new(start: NaiveDateTime) -> Self {
        Self { start }
    }

    pub fn at(&self, t: SimTime) -> NaiveDateTime {
        self.start + TimeDelta::milliseconds(t.0 as i64)
    }

    /// Whole-second calendar time, as written to the store.
    pub fn at_secs(&self, t: SimTime) -> NaiveDateTime {
        self.start + TimeDelta::seconds(t.whole_secs() as i64)
    }

    pub fn sim_time(&self, at: NaiveDateTime) -> Option<SimTime> {
        let ms = (at - self.start).num_milliseconds();
        u64::try_from(ms).ok().map(SimTime)
    }

    /// Seconds since local midnight at `t`.
    pub fn seconds_of_day(&self, t: SimTime) -> f64 {
        use chrono::Timelike;
        let at = self.at(t);
        f64::from(at.num_seconds_from_midnight()) + f64::from(at.nanosecond()) / 1e9
    }
}

pub fn format_iso(at: NaiveDateTime) -> String {
    at.format(ISO_FORMAT).to_string()
}

pub fn parse_iso(text: &str) -> Result<NaiveDateTime, chrono::ParseError> {
    NaiveDateTime::parse_from_str(text.trim(), ISO_FORMAT)
}

/// Source of "now" for components that must also run against real time.
pub trait Clock {
    fn now(&self) -> SimTime;
}

/// Clock driven by the scheduler.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn set(&mut self, t: SimTime) {
        debug_assert!(t >= self.now, "simulation time moved backwards");
        self.now = t;
    }
}

impl Clock for SimClock {
    fn now(&self) -> SimTime {
        self.now
    }
}

/// Wall clock measured from a fixed origin.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: SystemTime,
}

impl SystemClock {
    pub fn starting_now() -> Self {
        Self {
            origin: SystemTime::now(),
        }
    }

    pub fn origin_unix_secs(&self) -> u64 {
        self.origin
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

impl Clock for SystemClock {
    fn now(&self) -> SimTime {
        let elapsed = SystemTime::now()
            .duration_since(self.origin)
            .unwrap_or_default();
        SimTime(elapsed.as_millis() as u64)
    }
}

struct Entry<E> {
    at: SimTime,
    priority: u8,
    seq: u64,
    event: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (SimTime, u8, u64) {
        (self.at, self.priority, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Deterministic discrete-event queue.
///
/// Events pop in `(time, priority, insertion order)` order, so equal-time
/// events with equal priority fire in the order they were scheduled.
pub struct Scheduler<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    clock: SimClock,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            clock: SimClock::default(),
        }
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    /// Lower `priority` fires first among events at the same instant.
    pub fn schedule(&mut self, at: SimTime, priority: u8, event: E) {
        let at = at.max(self.now());
        self.heap.push(Entry {
            at,
            priority,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: Duration, priority: u8, event: E) {
        let at = self.now() + delay;
        self.schedule(at, priority, event);
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.at)
    }

    /// Pops the next event at or before `horizon`, advancing the clock.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<(SimTime, E)> {
        if self.peek_time()? > horizon {
            return None;
        }
        let entry = self.heap.pop()?;
        self.clock.set(entry.at);
        Some((entry.at, entry.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
