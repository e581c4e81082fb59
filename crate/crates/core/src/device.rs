//! Firmware of the monitoring device: power-on, the polling main loop,
//! hourly logging into a two-slot history, the low-voltage alarm, and the
//! ring interrupt that triggers an answer-and-transmit.
//!
//! The agent never touches the clock or the phone line directly. It hands
//! back timed key presses ([`Plan`]) and is told what each press did.

use std::collections::VecDeque;
use std::str::FromStr;
use std::time::Duration;

use rust_decimal::Decimal;
use thiserror::Error;

use crate::dtmf::{encode_transmission, ToneSymbol, DEFAULT_TONE_RATE};
use crate::keypad::{self, Key, KeyEvent};
use crate::modbus::ModbusError;
use crate::reading::{Field, Reading};
use crate::registers::{poll_reading, RegisterMap, SerialLink, CONTROLLER_ADDRESS};
use crate::telco::{tone_period, KeyEffect, Network, TelcoError, POWER_HOLD};
use crate::time::SimTime;

pub const HISTORY_SLOTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub number: String,
    pub poll_interval: Duration,
    pub log_interval: Duration,
    pub lvd_cutoff: Decimal,
    pub alert_number: String,
    pub collector_number: String,
    pub modbus_address: u8,
    pub key_hold: Duration,
    pub key_gap: Duration,
    pub answer_hold: Duration,
    pub hang_up_hold: Duration,
    /// How long an alarm call is left ringing before hanging up.
    pub alarm_ring_hold: Duration,
    /// Main-loop delay between the ring interrupt and the flag check.
    pub service_latency: Duration,
    /// The handset's tone buffer rate, used to wait out the drain.
    pub tone_rate: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            number: "0977000001".into(),
            poll_interval: Duration::from_secs(30),
            log_interval: Duration::from_secs(3600),
            lvd_cutoff: Decimal::from_str("11.50").unwrap(),
            alert_number: "0211000000".into(),
            collector_number: "0211000000".into(),
            modbus_address: CONTROLLER_ADDRESS,
            key_hold: Duration::from_millis(100),
            key_gap: Duration::from_millis(100),
            answer_hold: Duration::from_millis(500),
            hang_up_hold: Duration::from_millis(200),
            alarm_ring_hold: Duration::from_secs(8),
            service_latency: Duration::from_millis(100),
            tone_rate: DEFAULT_TONE_RATE,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("handset fault: {0}")]
    HandsetFault(TelcoError),
    #[error("controller poll timed out: {0}")]
    PollTimeout(ModbusError),
    #[error("alert call failed: {0}")]
    CallFailed(TelcoError),
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: &str| Err(DeviceError::InvalidConfig(m.into()));
        if self.poll_interval.is_zero() {
            return bad("poll_interval must be positive");
        }
        if self.poll_interval > self.log_interval {
            return bad("poll_interval must not exceed log_interval");
        }
        if self.log_interval.as_millis() % self.poll_interval.as_millis() != 0 {
            return bad("log_interval must be a multiple of poll_interval");
        }
        let (lo, hi) = (Decimal::new(1050, 2), Decimal::new(1250, 2));
        if self.lvd_cutoff < lo || self.lvd_cutoff > hi {
            return bad("lvd_cutoff must lie within 10.50..=12.50 V");
        }
        for number in [&self.number, &self.alert_number] {
            if number.is_empty() || !number.chars().all(|c| c.is_ascii_digit()) {
                return bad("phone numbers must be non-empty digit strings");
            }
        }
        if !(self.tone_rate > 0.0) {
            return bad("tone_rate must be positive");
        }
        Ok(())
    }

    pub fn is_poll_boundary(&self, at: SimTime) -> bool {
        at.as_millis() % self.poll_interval.as_millis() as u64 == 0
    }

    fn log_index(&self, at: SimTime) -> u64 {
        at.as_millis() / self.log_interval.as_millis() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Off,
    Booting { ready_at: SimTime },
    Idle,
    Transferring,
    Alarming,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceState {
    pub transfer_flag: bool,
    /// Logged snapshots awaiting transfer, oldest first.
    pub history: VecDeque<Reading>,
    /// Latest successful poll.
    pub current: Option<Reading>,
    /// Snapshot taken at the most recent log boundary, not yet sent.
    pub logged: Option<Reading>,
    pub last_log_at: Option<SimTime>,
    /// The last poll failed; `current` is older than one poll interval.
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Press {
    pub at: SimTime,
    pub event: KeyEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    Transfer,
    Alarm,
}

/// Key presses to perform, in order, at the given instants.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub kind: PlanKind,
    pub presses: Vec<Press>,
    /// Records carried, for a transfer.
    pub records: Vec<Reading>,
}

impl Plan {
    pub fn finishes_at(&self) -> SimTime {
        self.presses
            .last()
            .map(|p| p.at + p.event.hold)
            .unwrap_or(SimTime::ZERO)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tick {
    pub polled: Option<Result<Reading, DeviceError>>,
    pub logged: bool,
    pub plan: Option<Plan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    kind: PlanKind,
    remaining: usize,
    failed: bool,
}

#[derive(Debug, Clone)]
pub struct DeviceAgent {
    pub config: DeviceConfig,
    pub map: RegisterMap,
    mode: Mode,
    pub state: DeviceState,
    in_flight: Option<InFlight>,
    last_log_index: Option<u64>,
    /// Every snapshot ever logged, for auditing delivery.
    pub log_book: Vec<Reading>,
    pub alarms_raised: usize,
    pub transfers_completed: usize,
}

impl DeviceAgent {
    pub fn new(config: DeviceConfig, map: RegisterMap) -> Result<Self, DeviceError> {
        config.validate()?;
        Ok(Self {
            config,
            map,
            mode: Mode::Off,
            state: DeviceState::default(),
            in_flight: None,
            last_log_index: None,
            log_book: Vec::new(),
            alarms_raised: 0,
            transfers_completed: 0,
        })
    }

    pub fn mode(&self, at: SimTime) -> Mode {
        match self.mode {
            Mode::Booting { ready_at } if at >= ready_at => Mode::Idle,
            m => m,
        }
    }

    fn refresh(&mut self, at: SimTime) {
        if let Mode::Booting { ready_at } = self.mode {
            if at >= ready_at {
                self.mode = Mode::Idle;
                // boundaries before readiness were never observed
                self.last_log_index = Some(self.config.log_index(ready_at));
            }
        }
    }

    /// Holds POWER long enough to switch the handset on. Returns when the
    /// device will be ready; a no-op once booted.
    pub fn boot(&mut self, net: &mut Network, at: SimTime) -> Result<SimTime, DeviceError> {
        self.refresh(at);
        match self.mode {
            Mode::Off => {}
            Mode::Booting { ready_at } => return Ok(ready_at),
            _ => return Ok(at),
        }
        let hold = KeyEvent::new(Key::Power, POWER_HOLD);
        match net.press_key(&self.config.number, hold, at) {
            Ok(KeyEffect::PoweringOn { ready_at }) => {
                self.mode = Mode::Booting { ready_at };
                Ok(ready_at)
            }
            Ok(other) => Err(DeviceError::HandsetFault(TelcoError::IgnoredKey {
                number: format!("{}: {other:?}", self.config.number),
                key: Key::Power,
            })),
            Err(e) => Err(DeviceError::HandsetFault(e)),
        }
    }

    /// The ring interrupt. Sets the transfer flag at most once per call;
    /// returns whether this edge set it.
    pub fn on_ring_edge(&mut self, at: SimTime) -> bool {
        self.refresh(at);
        if self.state.transfer_flag || self.mode != Mode::Idle {
            return false;
        }
        self.state.transfer_flag = true;
        true
    }

    /// One pass of the main loop at `at`: serve a pending transfer, else
    /// poll on poll boundaries, log on log boundaries and check the battery.
    pub fn tick(&mut self, at: SimTime, link: &mut impl SerialLink) -> Tick {
        self.refresh(at);
        let mut out = Tick::default();
        match self.mode {
            Mode::Off | Mode::Booting { .. } | Mode::Transferring => return out,
            Mode::Idle if self.state.transfer_flag => {
                out.plan = Some(self.start_transfer(at));
                return out;
            }
            Mode::Idle | Mode::Alarming => {}
        }
        if !self.config.is_poll_boundary(at) {
            return out;
        }

        let index = self.config.log_index(at);
        let log_now = self.last_log_index.is_none_or(|last| index > last);
        if log_now {
            self.last_log_index = Some(index);
            if let Some(previous) = self.state.logged.take() {
                if self.state.history.len() == HISTORY_SLOTS {
                    self.state.history.pop_front();
                }
                self.state.history.push_back(previous);
            }
        }

        match poll_reading(link, &self.map, self.config.modbus_address, at) {
            Ok(raw) => {
                let reading = raw.clamped_to_wire().0.rounded();
                self.state.current = Some(reading);
                self.state.stale = false;
                if log_now {
                    self.state.logged = Some(reading);
                    self.state.last_log_at = Some(at);
                    self.log_book.push(reading);
                    out.logged = true;
                }
                // cutoff compares the measurement, not its two-decimal wire form
                if raw.get(Field::BatteryVoltage) <= self.config.lvd_cutoff && self.mode == Mode::Idle {
                    out.plan = Some(self.start_alarm(at));
                }
                out.polled = Some(Ok(reading));
            }
            Err(e) => {
                self.state.stale = true;
                out.polled = Some(Err(DeviceError::PollTimeout(e)));
            }
        }
        out
    }

    fn key(&self, key: Key, hold: Duration) -> KeyEvent {
        KeyEvent::new(key, hold)
    }

    fn tone_key(&self, symbol: ToneSymbol) -> KeyEvent {
        keypad::press(symbol, self.config.key_hold).expect("single key press")
    }

    /// Records to send: history oldest first, then the freshest reading.
    pub fn outgoing(&self) -> Vec<Reading> {
        let mut records: Vec<Reading> = self.state.history.iter().copied().collect();
        if let Some(current) = self.state.current {
            records.push(current);
        }
        records
    }

    fn start_transfer(&mut self, at: SimTime) -> Plan {
        let c = &self.config;
        let records = self.outgoing();
        let mut presses = vec![Press {
            at,
            event: self.key(Key::Start, c.answer_hold),
        }];
        let mut t = at + c.answer_hold + c.key_gap;
        let mut drained = at + c.answer_hold;
        if let Ok(tones) = encode_transmission(&records) {
            let period = tone_period(c.tone_rate);
            let mut last_emit: Option<SimTime> = None;
            for &symbol in &tones.symbols {
                let event = self.tone_key(symbol);
                presses.push(Press { at: t, event });
                let release = t + event.hold;
                let emit = last_emit.map_or(release, |last| release.max(last + period));
                last_emit = Some(emit);
                drained = emit + period;
                t = release + c.key_gap;
            }
        }
        presses.push(Press {
            at: drained,
            event: self.key(Key::Power, c.hang_up_hold),
        });
        self.mode = Mode::Transferring;
        self.in_flight = Some(InFlight {
            kind: PlanKind::Transfer,
            remaining: presses.len(),
            failed: false,
        });
        Plan {
            kind: PlanKind::Transfer,
            presses,
            records,
        }
    }

    fn start_alarm(&mut self, at: SimTime) -> Plan {
        let c = &self.config;
        let mut presses = Vec::new();
        let mut t = at;
        for ch in c.alert_number.chars() {
            let event = self.tone_key(ToneSymbol::from_char(ch).expect("validated digits"));
            presses.push(Press { at: t, event });
            t = t + event.hold + c.key_gap;
        }
        presses.push(Press {
            at: t,
            event: self.key(Key::Start, c.answer_hold),
        });
        let hang_up = t + c.answer_hold + c.alarm_ring_hold;
        presses.push(Press {
            at: hang_up,
            event: self.key(Key::Power, c.hang_up_hold),
        });
        self.mode = Mode::Alarming;
        self.alarms_raised += 1;
        self.in_flight = Some(InFlight {
            kind: PlanKind::Alarm,
            remaining: presses.len(),
            failed: false,
        });
        Plan {
            kind: PlanKind::Alarm,
            presses,
            records: Vec::new(),
        }
    }

    /// What a planned press did. Returns an error the first time a step of
    /// the current plan fails.
    pub fn on_key(&mut self, result: &Result<KeyEffect, TelcoError>) -> Result<(), DeviceError> {
        let Some(mut flight) = self.in_flight else {
            return Ok(());
        };
        flight.remaining -= 1;
        let mut error = None;
        if let Err(e) = result {
            if !flight.failed {
                error = Some(match flight.kind {
                    PlanKind::Transfer => DeviceError::HandsetFault(e.clone()),
                    PlanKind::Alarm => DeviceError::CallFailed(e.clone()),
                });
            }
            flight.failed = true;
        }
        if flight.remaining == 0 {
            self.in_flight = None;
            match flight.kind {
                PlanKind::Transfer => self.on_transfer_complete(!flight.failed),
                PlanKind::Alarm => self.mode = Mode::Idle,
            }
        } else {
            self.in_flight = Some(flight);
        }
        error.map_or(Ok(()), Err)
    }

    /// A delivered batch clears the queue; a failed one leaves it for the
    /// next call.
    pub fn on_transfer_complete(&mut self, delivered: bool) {
        if delivered {
            self.state.history.clear();
            self.state.logged = None;
            self.transfers_completed += 1;
        }
        self.state.transfer_flag = false;
        self.mode = Mode::Idle;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{ControllerPort, PlantConfig, PlantState};
    use crate::telco::TelcoConfig;

    fn s(secs: u64) -> SimTime {
        SimTime::from_secs(secs)
    }

    fn network() -> Network {
        let mut net = Network::new(TelcoConfig::default());
        net.add_handset("0977000001", 1, false);
        net.add_handset("0211000000", 8, true);
        net
    }

    fn agent() -> DeviceAgent {
        DeviceAgent::new(DeviceConfig::default(), RegisterMap::default()).unwrap()
    }

    fn plant(battery: f64) -> PlantState<f64> {
        PlantState {
            battery_voltage: battery,
            array_voltage: 13.66,
            ..PlantState::initial(&PlantConfig::default(), 0.0)
        }
    }

    fn tick(a: &mut DeviceAgent, at: SimTime, battery: f64) -> Tick {
        let state = plant(battery);
        let map = RegisterMap::default();
        a.tick(at, &mut ControllerPort::new(&state, &map))
    }

    #[test]
    fn boots_in_24_seconds() {
        let mut net = network();
        let mut a = agent();
        assert_eq!(a.boot(&mut net, SimTime::ZERO).unwrap(), s(24));
        assert_eq!(a.mode(s(23)), Mode::Booting { ready_at: s(24) });
        assert_eq!(a.mode(s(24)), Mode::Idle);
        assert_eq!(a.boot(&mut net, s(30)).unwrap(), s(30));
    }

    #[test]
    fn missing_handset_is_a_fault() {
        let mut net = Network::new(TelcoConfig::default());
        let err = agent().boot(&mut net, SimTime::ZERO).unwrap_err();
        assert!(matches!(err, DeviceError::HandsetFault(_)));
    }

    fn ready() -> DeviceAgent {
        let mut a = agent();
        a.boot(&mut network(), SimTime::ZERO).unwrap();
        a
    }

    #[test]
    fn ring_burst_sets_the_flag_once() {
        let mut a = ready();
        let set: Vec<bool> = (0..7).map(|i| a.on_ring_edge(s(40) + Duration::from_millis(i))).collect();
        assert_eq!(set.iter().filter(|&&b| b).count(), 1);
        let plan = tick(&mut a, s(41), 13.0).plan.unwrap();
        assert_eq!(plan.kind, PlanKind::Transfer);
        assert!(!a.on_ring_edge(s(42)), "absorbed while transferring");
    }

    #[test]
    fn low_battery_dials_the_alert_number_every_tick() {
        let mut a = ready();
        for k in 1..=3 {
            let t = tick(&mut a, s(30 * k), 11.20);
            let plan = t.plan.expect("alarm");
            assert_eq!(plan.kind, PlanKind::Alarm);
            let dialed: String = plan
                .presses
                .iter()
                .filter_map(|p| match p.event.key {
                    Key::Tone(sym) => Some(sym.as_char()),
                    _ => None,
                })
                .collect();
            assert_eq!(dialed, "0211000000");
            for _ in 0..plan.presses.len() {
                a.on_key(&Ok(KeyEffect::DigitDialed)).unwrap();
            }
        }
        assert_eq!(a.alarms_raised, 3);
        assert!(tick(&mut a, s(120), 11.51).plan.is_none());
    }

    #[test]
    fn hourly_log_fills_two_slots_then_evicts() {
        let mut a = ready();
        tick(&mut a, s(30), 13.0);
        assert!(a.state.history.is_empty() && a.state.logged.is_none());
        for hour in 1..=4 {
            let t = tick(&mut a, s(3600 * hour), 12.0 + hour as f64 * 0.1);
            assert!(t.logged);
        }
        assert_eq!(a.state.history.len(), 2);
        let out = a.outgoing();
        assert_eq!(out.len(), 3);
        let volts: Vec<String> = out.iter().map(|r| r.battery_voltage.to_string()).collect();
        assert_eq!(volts, ["12.20", "12.30", "12.40"]);
        assert_eq!(a.log_book.len(), 4);
    }

    #[test]
    fn fresh_device_sends_one_record_and_a_transfer_clears_the_queue() {
        let mut a = ready();
        tick(&mut a, s(30), 13.0);
        a.on_ring_edge(s(40));
        let plan = tick(&mut a, s(40), 13.0).plan.unwrap();
        assert_eq!(plan.records.len(), 1);
        assert_eq!(plan.presses[0].event.key, Key::Start);
        assert_eq!(plan.presses.last().unwrap().event.key, Key::Power);
        for _ in 0..plan.presses.len() {
            a.on_key(&Ok(KeyEffect::DigitDialed)).unwrap();
        }
        assert_eq!(a.mode(s(100)), Mode::Idle);
        assert!(!a.state.transfer_flag);
    }

    #[test]
    fn failed_transfer_keeps_history() {
        let mut a = ready();
        tick(&mut a, s(3600), 13.0);
        tick(&mut a, s(7200), 13.0);
        a.on_ring_edge(s(7210));
        let plan = tick(&mut a, s(7210), 13.0).plan.unwrap();
        assert_eq!(plan.records.len(), 2);
        let n = plan.presses.len();
        for i in 0..n {
            let r = if i == n - 1 {
                Err(TelcoError::CallDropped(crate::telco::CallId(0)))
            } else {
                Ok(KeyEffect::DigitDialed)
            };
            let _ = a.on_key(&r);
        }
        assert_eq!(a.state.history.len(), 1);
        assert!(a.state.logged.is_some());
        assert_eq!(a.outgoing().len(), 2);
        assert_eq!(a.transfers_completed, 0);
    }

    #[test]
    fn unreachable_controller_marks_stale() {
        let mut a = ready();
        tick(&mut a, s(30), 13.0);
        let state = plant(13.0);
        let map = RegisterMap::default();
        let mut port = ControllerPort::new(&state, &map);
        port.online = false;
        let t = a.tick(s(60), &mut port);
        assert!(matches!(t.polled, Some(Err(DeviceError::PollTimeout(_)))));
        assert!(a.state.stale);
        assert!(a.state.current.is_some());
    }

    #[test]
    fn transfer_waits_for_the_tone_buffer() {
        let mut a = ready();
        tick(&mut a, s(30), 13.0);
        a.on_ring_edge(s(40));
        let plan = tick(&mut a, s(40), 13.0).plan.unwrap();
        let tones = encode_transmission(&plan.records).unwrap();
        let hang_up = plan.presses.last().unwrap().at;
        let on_line = hang_up.since(s(40)).as_secs_f64();
        assert!(on_line >= tones.duration());
        assert!(on_line < tones.duration() + 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = DeviceConfig {
            poll_interval: Duration::from_secs(7200),
            ..DeviceConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DeviceConfig {
            lvd_cutoff: Decimal::new(1300, 2),
            ..DeviceConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(DeviceConfig::default().validate().is_ok());
    }
}
