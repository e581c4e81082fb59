//! Scenario files and the end-to-end simulation run.
//!
//! A scenario is TOML. Every key has a default, so a file only names what
//! it changes; see `systest.scenario` for the annotated full set.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use rust_decimal::Decimal;
use serde::Deserialize;
use thiserror::Error;

use crate::collector::{Collector, CollectorConfig, CollectorError, CollectorStats};
use crate::device::{DeviceAgent, DeviceConfig, Press};
use crate::plant::{ControllerPort, DailyWindow, LoadWindow, Moonlight, Plant, PlantConfig};
use crate::reading::{Field, Reading};
use crate::registers::{parse_address, parse_scalar, RegisterMap};
use crate::store::{Notification, Store, StoredRecord};
use crate::telco::{CallId, CallSession, EndReason, Impairment, KeyEffect, Network, RingPlan, SessionState, TelcoConfig, TelcoError};
use crate::time::{format_iso, parse_iso, Calendar, Scheduler, SimTime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScenarioSection {
    name: String,
    start: String,
    duration_s: u64,
    seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            start: "2010-11-27T06:00:00".into(),
            duration_s: 24 * 3600 + 300,
            seed: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadSection {
    start: String,
    end: String,
    watts: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MoonlightSection {
    start: String,
    end: String,
    #[serde(default = "moonlight_amps")]
    amps: f64,
}

fn moonlight_amps() -> f64 {
    0.01
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PlantSection {
    array_watts: f64,
    array_mpp_voltage: f64,
    array_open_circuit_voltage: f64,
    pwm_drop: f64,
    battery_capacity_ah: f64,
    nominal_voltage: f64,
    ocv_empty: f64,
    ocv_full: f64,
    internal_resistance: f64,
    absorb_voltage: f64,
    float_voltage: f64,
    absorb_hours: f64,
    initial_soc: f64,
    sunrise: String,
    sunset: String,
    weather: f64,
    step_s: u64,
    load: Vec<LoadSection>,
    moonlight: Option<MoonlightSection>,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantConfig::<f64>::default();
        Self {
            array_watts: p.array_watts,
            array_mpp_voltage: p.array_mpp_voltage,
            array_open_circuit_voltage: p.array_open_circuit_voltage,
            pwm_drop: p.pwm_drop,
            battery_capacity_ah: p.battery_capacity_ah,
            nominal_voltage: p.nominal_voltage,
            ocv_empty: p.ocv_empty,
            ocv_full: p.ocv_full,
            internal_resistance: p.internal_resistance,
            absorb_voltage: p.absorb_voltage,
            float_voltage: p.float_voltage,
            absorb_hours: p.absorb_duration_s / 3600.0,
            initial_soc: p.initial_soc,
            sunrise: "07:00".into(),
            sunset: "19:00".into(),
            weather: p.weather,
            step_s: 30,
            load: Vec::new(),
            moonlight: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterOverride {
    address: String,
    scalar: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DeviceSection {
    number: String,
    poll_interval_s: u64,
    log_interval_s: u64,
    lvd_cutoff: Option<f64>,
    alert_number: Option<String>,
    modbus_address: u8,
    alarm_ring_hold_s: f64,
    registers: BTreeMap<String, RegisterOverride>,
}

impl Default for DeviceSection {
    fn default() -> Self {
        let d = DeviceConfig::default();
        Self {
            number: d.number,
            poll_interval_s: d.poll_interval.as_secs(),
            log_interval_s: d.log_interval.as_secs(),
            lvd_cutoff: None,
            alert_number: None,
            modbus_address: d.modbus_address,
            alarm_ring_hold_s: d.alarm_ring_hold.as_secs_f64(),
            registers: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CollectorSection {
    number: String,
    poll_cadence_s: u64,
    dial_offset_s: u64,
    tariff_per_minute: f64,
}

impl Default for CollectorSection {
    fn default() -> Self {
        let c = CollectorConfig::default();
        Self {
            number: c.number,
            poll_cadence_s: c.poll_cadence.as_secs(),
            dial_offset_s: c.dial_offset.as_secs(),
            tariff_per_minute: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TelcoSection {
    tone_rate: f64,
    ring_on_s: f64,
    ring_off_s: f64,
    ring_timeout_s: f64,
    edges_per_burst: u32,
    tone_drop_probability: f64,
    impairment_seed: Option<u64>,
}

impl Default for TelcoSection {
    fn default() -> Self {
        let t = TelcoConfig::default();
        Self {
            tone_rate: t.tone_rate,
            ring_on_s: t.ring_on.as_secs_f64(),
            ring_off_s: t.ring_off.as_secs_f64(),
            ring_timeout_s: t.ring_timeout.as_secs_f64(),
            edges_per_burst: t.edges_per_burst,
            tone_drop_probability: 0.0,
            impairment_seed: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScenarioFile {
    scenario: ScenarioSection,
    plant: PlantSection,
    device: DeviceSection,
    collector: CollectorSection,
    telco: TelcoSection,
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub start: NaiveDateTime,
    pub duration: Duration,
    pub seed: u64,
    pub plant: PlantConfig<f64>,
    pub plant_step: Duration,
    pub device: DeviceConfig,
    pub registers: RegisterMap,
    pub collector: CollectorConfig,
    pub telco: TelcoConfig,
    /// Impairment seed pinned in the file rather than derived from `seed`.
    pub impairment_seed_pinned: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::from_toml(MINIMAL).expect("defaults are valid")
    }
}

/// The one key every scenario must set.
pub const MINIMAL: &str = "[device]\nlvd_cutoff = 11.5\n";

/// 1-based line of `key` inside `[section]`, if it is written out.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn header_line(text: &str, section: &str) -> Option<usize> {
    text.lines()
        .position(|l| l.trim().starts_with('[') && l.trim().trim_matches(|c| c == '[' || c == ']').trim() == section)
        .map(|i| i + 1)
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    text: &'a str,
}

impl Checker<'_> {
    fn fail<T>(&self, section: &str, key: &str, message: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError {
            line: line_of(self.text, section, key).or_else(|| line_of(self.text, "", section)),
            message: format!("{section}.{key}: {}", message.into()),
        })
    }

    fn positive(&self, section: &str, key: &str, v: f64) -> Result<f64, ConfigError> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            self.fail(section, key, format!("must be positive, got {v}"))
        }
    }

    fn fraction(&self, section: &str, key: &str, v: f64) -> Result<f64, ConfigError> {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            self.fail(section, key, format!("must lie in 0..=1, got {v}"))
        }
    }

    fn time_of_day(&self, section: &str, key: &str, v: &str) -> Result<f64, ConfigError> {
        NaiveTime::parse_from_str(v.trim(), "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(v.trim(), "%H:%M:%S"))
            .map(|t| f64::from(t.num_seconds_from_midnight()))
            .or_else(|_| self.fail(section, key, format!("`{v}` is not HH:MM")))
    }

    fn number(&self, section: &str, key: &str, v: &str) -> Result<String, ConfigError> {
        if !v.is_empty() && v.chars().all(|c| c.is_ascii_digit()) {
            Ok(v.to_string())
        } else {
            self.fail(section, key, format!("`{v}` is not a dialable digit string"))
        }
    }

    fn decimal(&self, section: &str, key: &str, v: f64) -> Result<Decimal, ConfigError> {
        Decimal::from_str(&v.to_string()).or_else(|e| self.fail(section, key, e.to_string()))
    }

    fn secs(&self, section: &str, key: &str, v: f64) -> Result<Duration, ConfigError> {
        Duration::try_from_secs_f64(v).or_else(|_| self.fail(section, key, format!("`{v}` is not a duration")))
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e.to_string()))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        let c = Checker { text };

        let sc = &file.scenario;
        let start = parse_iso(&sc.start).or_else(|_| c.fail("scenario", "start", format!("`{}` is not YYYY-MM-DDTHH:MM:SS", sc.start)))?;

        let p = &file.plant;
        let sunrise = c.time_of_day("plant", "sunrise", &p.sunrise)?;
        let sunset = c.time_of_day("plant", "sunset", &p.sunset)?;
        if sunset <= sunrise {
            return c.fail("plant", "sunset", "must be after sunrise");
        }
        let mut loads = Vec::new();
        for l in &p.load {
            let start = c.time_of_day("plant.load", "start", &l.start)?;
            let end = c.time_of_day("plant.load", "end", &l.end)?;
            if !(l.watts >= 0.0) {
                return c.fail("plant.load", "watts", format!("must not be negative, got {}", l.watts));
            }
            loads.push(LoadWindow {
                window: DailyWindow::new(start, end),
                watts: l.watts,
            });
        }
        let moonlight = match &p.moonlight {
            Some(m) => Some(Moonlight {
                window: DailyWindow::new(
                    c.time_of_day("plant.moonlight", "start", &m.start)?,
                    c.time_of_day("plant.moonlight", "end", &m.end)?,
                ),
                amps: c.positive("plant.moonlight", "amps", m.amps)?,
            }),
            None => None,
        };
        if p.ocv_full <= p.ocv_empty {
            return c.fail("plant", "ocv_full", "must exceed ocv_empty");
        }
        if p.internal_resistance < 0.0 {
            return c.fail("plant", "internal_resistance", "must not be negative");
        }
        let plant = PlantConfig {
            array_watts: c.positive("plant", "array_watts", p.array_watts)?,
            array_mpp_voltage: c.positive("plant", "array_mpp_voltage", p.array_mpp_voltage)?,
            array_open_circuit_voltage: c.positive("plant", "array_open_circuit_voltage", p.array_open_circuit_voltage)?,
            pwm_drop: p.pwm_drop,
            battery_capacity_ah: c.positive("plant", "battery_capacity_ah", p.battery_capacity_ah)?,
            nominal_voltage: c.positive("plant", "nominal_voltage", p.nominal_voltage)?,
            ocv_empty: p.ocv_empty,
            ocv_full: p.ocv_full,
            internal_resistance: p.internal_resistance,
            absorb_voltage: c.positive("plant", "absorb_voltage", p.absorb_voltage)?,
            float_voltage: c.positive("plant", "float_voltage", p.float_voltage)?,
            absorb_duration_s: p.absorb_hours.max(0.0) * 3600.0,
            initial_soc: c.fraction("plant", "initial_soc", p.initial_soc)?,
            daylight: DailyWindow::new(sunrise, sunset),
            weather: c.fraction("plant", "weather", p.weather)?,
            moonlight,
            loads,
        };
        plant.validate().map_err(|e| ConfigError {
            line: None,
            message: format!("plant: {e}"),
        })?;
        if p.step_s == 0 {
            return c.fail("plant", "step_s", "must be positive");
        }

        let d = &file.device;
        let col = &file.collector;
        if d.poll_interval_s == 0 {
            return c.fail("device", "poll_interval_s", "must be positive");
        }
        if d.poll_interval_s > d.log_interval_s {
            return c.fail("device", "poll_interval_s", "must not exceed log_interval_s");
        }
        if d.log_interval_s % d.poll_interval_s != 0 {
            return c.fail("device", "log_interval_s", "must be a multiple of poll_interval_s");
        }
        let Some(cutoff) = d.lvd_cutoff else {
            return Err(ConfigError {
                line: header_line(text, "device"),
                message: "device.lvd_cutoff is required (volts, e.g. 11.5)".into(),
            });
        };
        let lvd_cutoff = c.decimal("device", "lvd_cutoff", cutoff)?;
        if !(10.5..=12.5).contains(&cutoff) {
            return c.fail("device", "lvd_cutoff", format!("must lie within 10.5..=12.5 V, got {cutoff}"));
        }
        let collector_number = c.number("collector", "number", &col.number)?;
        let device_number = c.number("device", "number", &d.number)?;
        if device_number == collector_number {
            return c.fail("device", "number", "must differ from the collector number");
        }
        let alert_number = match &d.alert_number {
            Some(n) => c.number("device", "alert_number", n)?,
            None => collector_number.clone(),
        };
        let device = DeviceConfig {
            number: device_number.clone(),
            poll_interval: Duration::from_secs(d.poll_interval_s),
            log_interval: Duration::from_secs(d.log_interval_s),
            lvd_cutoff,
            alert_number,
            collector_number: collector_number.clone(),
            modbus_address: d.modbus_address,
            alarm_ring_hold: c.secs("device", "alarm_ring_hold_s", d.alarm_ring_hold_s)?,
            tone_rate: file.telco.tone_rate,
            ..DeviceConfig::default()
        };
        device.validate().map_err(|e| ConfigError {
            line: None,
            message: format!("device: {e}"),
        })?;

        let mut registers = RegisterMap::default();
        for (name, o) in &d.registers {
            let section = format!("device.registers.{name}");
            let field = Field::from_str(name).or_else(|_| c.fail("device.registers", name, format!("unknown field `{name}`")))?;
            let address = parse_address(&o.address).or_else(|e| c.fail(&section, "address", e.to_string()))?;
            let scalar = parse_scalar(&o.scalar).or_else(|e| c.fail(&section, "scalar", e.to_string()))?;
            registers = registers
                .with_override(field, address, scalar)
                .or_else(|e| c.fail(&section, "address", e.to_string()))?;
        }

        if col.poll_cadence_s < d.log_interval_s {
            return c.fail("collector", "poll_cadence_s", "must be at least device.log_interval_s");
        }
        if col.dial_offset_s >= col.poll_cadence_s {
            return c.fail("collector", "dial_offset_s", "must be shorter than poll_cadence_s");
        }
        if col.tariff_per_minute < 0.0 {
            return c.fail("collector", "tariff_per_minute", "must not be negative");
        }
        let tariff = c.decimal("collector", "tariff_per_minute", col.tariff_per_minute)?;
        let collector = CollectorConfig {
            number: collector_number,
            device_numbers: vec![device_number],
            poll_cadence: Duration::from_secs(col.poll_cadence_s),
            dial_offset: Duration::from_secs(col.dial_offset_s),
            tariff_per_minute: tariff,
            log_interval: device.log_interval,
        };

        let t = &file.telco;
        if t.edges_per_burst == 0 {
            return c.fail("telco", "edges_per_burst", "must be at least 1");
        }
        let telco = TelcoConfig {
            tone_rate: c.positive("telco", "tone_rate", t.tone_rate)?,
            ring_on: c.secs("telco", "ring_on_s", c.positive("telco", "ring_on_s", t.ring_on_s)?)?,
            ring_off: c.secs("telco", "ring_off_s", t.ring_off_s)?,
            ring_timeout: c.secs("telco", "ring_timeout_s", c.positive("telco", "ring_timeout_s", t.ring_timeout_s)?)?,
            edges_per_burst: t.edges_per_burst,
            tariff_per_minute: tariff,
            impairment: Impairment {
                tone_drop_probability: c.fraction("telco", "tone_drop_probability", t.tone_drop_probability)?,
                seed: t.impairment_seed.unwrap_or(sc.seed),
            },
            ..TelcoConfig::default()
        };

        Ok(Scenario {
            name: sc.name.clone(),
            start,
            duration: Duration::from_secs(sc.duration_s),
            seed: sc.seed,
            plant,
            plant_step: Duration::from_secs(p.step_s),
            device,
            registers,
            collector,
            telco,
            impairment_seed_pinned: t.impairment_seed.is_some(),
        })
    }

    /// Same scenario under another seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if !self.impairment_seed_pinned {
            self.telco.impairment.seed = seed;
        }
        self
    }

    pub fn calendar(&self) -> Calendar {
        Calendar::new(self.start)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("device: {0}")]
    Device(#[from] crate::device::DeviceError),
    #[error("collector: {0}")]
    Collector(#[from] CollectorError),
}

impl From<io::Error> for ScenarioError {
    fn from(e: io::Error) -> Self {
        ScenarioError::Io("output".into(), e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub at: SimTime,
    pub soc: f64,
    pub battery_voltage: f64,
    pub array_current: f64,
    pub energy_total_kwh: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub calendar: Calendar,
    pub store: Vec<StoredRecord>,
    pub notifications: Vec<Notification>,
    pub sessions: Vec<CallSession>,
    pub tariff_per_minute: Decimal,
    pub collector_number: String,
    pub trace: Vec<TracePoint>,
    pub log_book: Vec<Reading>,
    pub collector_stats: CollectorStats,
    pub alarms_raised: usize,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    PlantStep,
    DeviceTick,
    DeviceService,
    Press(Press),
    RingEdge { call: CallId, first: bool },
    RingTimeout(CallId),
    CollectorDial(String),
}

// same-instant order: physics first, then the phone line, then the
// firmware loop, then the server
const P_PLANT: u8 = 0;
const P_PRESS: u8 = 1;
const P_RING: u8 = 2;
const P_SERVICE: u8 = 3;
const P_TICK: u8 = 4;
const P_DIAL: u8 = 5;
const P_TIMEOUT: u8 = 6;

struct Sim {
    calendar: Calendar,
    sched: Scheduler<Event>,
    plant: Plant<f64>,
    registers: RegisterMap,
    net: Network,
    device: DeviceAgent,
    collector: Collector,
    trace: Vec<TracePoint>,
    events: Vec<String>,
    plant_step: Duration,
}

impl Sim {
    fn log(&mut self, at: SimTime, kind: &str, detail: impl AsRef<str>) {
        let line = format!("{}\t{kind}\t{}", format_iso(self.calendar.at_secs(at)), detail.as_ref());
        self.events.push(line);
    }

    fn schedule_ring(&mut self, plan: &RingPlan) {
        let to_device = plan.callee == self.device.config.number;
        for (i, &edge) in plan.edges.iter().enumerate() {
            if i > 0 && !to_device {
                // the server reads caller ID once and never answers
                break;
            }
            self.sched.schedule(edge, P_RING, Event::RingEdge { call: plan.call, first: i == 0 });
        }
        self.sched.schedule(plan.timeout_at, P_TIMEOUT, Event::RingTimeout(plan.call));
    }

    fn call_finished(&mut self, call: CallId, at: SimTime) -> Result<(), ScenarioError> {
        let session = self.net.session(call).clone();
        if session.caller != self.collector.config.number {
            return Ok(());
        }
        match self.collector.on_call_ended(&session, self.net.tone_period()) {
            Ok(out) => {
                let detail = format!("call {call}: {} stored, {} duplicate", out.stored.len(), out.duplicates);
                self.log(at, "poll", detail);
            }
            Err(CollectorError::Store(e)) => return Err(CollectorError::Store(e).into()),
            Err(e) => self.log(at, "poll-error", format!("call {call}: {e}")),
        }
        Ok(())
    }

    fn handle(&mut self, at: SimTime, event: Event) -> Result<(), ScenarioError> {
        match event {
            Event::PlantStep => {
                let dt = self.plant_step.as_secs_f64();
                let s = *self.plant.step(dt);
                self.trace.push(TracePoint {
                    at,
                    soc: s.soc,
                    battery_voltage: s.battery_voltage,
                    array_current: s.array_current,
                    energy_total_kwh: s.energy_total_kwh,
                });
            }
            Event::DeviceTick | Event::DeviceService => {
                let mut port = ControllerPort::new(&self.plant.state, &self.registers);
                let tick = self.device.tick(at, &mut port);
                if let Some(Err(e)) = &tick.polled {
                    let e = e.to_string();
                    self.log(at, "device", e);
                }
                if let Some(plan) = tick.plan {
                    let kind = format!("{:?} plan, {} presses, {} records", plan.kind, plan.presses.len(), plan.records.len());
                    self.log(at, "device", kind);
                    for press in plan.presses {
                        self.sched.schedule(press.at, P_PRESS, Event::Press(press));
                    }
                }
            }
            Event::Press(press) => {
                let number = self.device.config.number.clone();
                let result = self.net.press_key(&number, press.event, at);
                let finished = match &result {
                    Ok(KeyEffect::Dialed(plan)) => {
                        let plan = plan.clone();
                        self.schedule_ring(&plan);
                        None
                    }
                    Ok(KeyEffect::HungUp { call }) | Err(TelcoError::CallDropped(call)) => Some(*call),
                    _ => None,
                };
                if let Err(e) = self.device.on_key(&result) {
                    self.log(at, "device", e.to_string());
                }
                if let Some(call) = finished {
                    self.call_finished(call, at + press.event.hold)?;
                }
            }
            Event::RingEdge { call, first } => {
                let session = self.net.session(call);
                if session.state != SessionState::Ringing {
                    return Ok(());
                }
                if session.callee == self.device.config.number {
                    if self.device.on_ring_edge(at) {
                        let wake = at + self.device.config.service_latency;
                        self.sched.schedule(wake, P_SERVICE, Event::DeviceService);
                    }
                } else if first && session.callee == self.collector.config.number {
                    let caller = session.caller.clone();
                    match self.collector.on_alarm_call(&caller, call.0, at) {
                        Ok(n) => self.log(at, "alarm", n.to_line()),
                        Err(e) => self.log(at, "alarm-error", e.to_string()),
                    }
                }
            }
            Event::RingTimeout(call) => {
                if self.net.ring_timeout(call, at) {
                    self.log(at, "no-answer", format!("call {call}"));
                    self.call_finished(call, at)?;
                }
            }
            Event::CollectorDial(number) => match self.collector.poll_device(&mut self.net, &number, at) {
                Ok(plan) => {
                    self.log(at, "dial", format!("call {} to {number}", plan.call));
                    self.schedule_ring(&plan);
                }
                Err(e) => self.log(at, "no-answer", e.to_string()),
            },
        }
        Ok(())
    }
}

/// Runs `scenario` to its horizon, entirely in simulated time.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    run_with_store(scenario, Store::in_memory())
}

pub fn run_with_store(scenario: &Scenario, store: Store) -> Result<RunOutput, ScenarioError> {
    let calendar = scenario.calendar();
    let horizon = SimTime::ZERO + scenario.duration;
    let mut net = Network::new(scenario.telco.clone());
    net.add_handset(&scenario.device.number, 1, false);
    net.add_handset(&scenario.collector.number, 8, true);

    let plant = Plant::new(scenario.plant.clone(), calendar.seconds_of_day(SimTime::ZERO));
    let device = DeviceAgent::new(scenario.device.clone(), scenario.registers.clone())?;
    let collector = Collector::new(scenario.collector.clone(), calendar, store)?;
    let mut sim = Sim {
        calendar,
        sched: Scheduler::new(),
        plant,
        registers: scenario.registers.clone(),
        net,
        device,
        collector,
        trace: Vec::new(),
        events: Vec::new(),
        plant_step: scenario.plant_step,
    };

    let ready = sim.device.boot(&mut sim.net, SimTime::ZERO)?;
    sim.log(SimTime::ZERO, "boot", format!("ready at {ready}"));

    for (step, priority, event) in [
        (scenario.plant_step, P_PLANT, Event::PlantStep),
        (scenario.device.poll_interval, P_TICK, Event::DeviceTick),
    ] {
        let mut t = SimTime::ZERO + step;
        while t <= horizon {
            sim.sched.schedule(t, priority, event.clone());
            t = t + step;
        }
    }
    for t in scenario.collector.dial_times(horizon) {
        for number in &scenario.collector.device_numbers {
            sim.sched.schedule(t, P_DIAL, Event::CollectorDial(number.clone()));
        }
    }

    while let Some((at, event)) = sim.sched.pop_until(horizon) {
        sim.handle(at, event)?;
    }

    Ok(RunOutput {
        calendar,
        store: sim.collector.store.records().to_vec(),
        notifications: sim.collector.notifications.clone(),
        sessions: sim.net.sessions().to_vec(),
        tariff_per_minute: scenario.collector.tariff_per_minute,
        collector_number: scenario.collector.number.clone(),
        trace: sim.trace,
        log_book: sim.device.log_book.clone(),
        collector_stats: sim.collector.stats,
        alarms_raised: sim.device.alarms_raised,
        events: sim.events,
    })
}

fn outcome(session: &CallSession) -> &'static str {
    match session.state {
        SessionState::Ended(EndReason::HungUp) if session.truncated > 0 => "dropped",
        SessionState::Ended(EndReason::HungUp) => "completed",
        SessionState::Ended(EndReason::NoAnswer) => "no-answer",
        SessionState::Ended(EndReason::Abandoned) => "unanswered",
        SessionState::Ringing => "ringing",
        SessionState::Connected => "connected",
    }
}

impl RunOutput {
    pub fn store_text(&self) -> String {
        self.store.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn notifications_text(&self) -> String {
        self.notifications.iter().map(|n| n.to_line() + "\n").collect()
    }

    /// Minutes billed to calls placed by `originator`.
    pub fn billed_minutes(&self, originator: &str) -> u64 {
        self.sessions
            .iter()
            .filter(|s| s.caller == originator)
            .map(CallSession::billed_minutes)
            .sum()
    }

    /// One line per call, then a total per originator.
    pub fn billing_text(&self) -> String {
        let mut out = String::from("call\tplaced\tcaller\tcallee\toutcome\tconnected_s\tminutes\tcost\n");
        let mut totals: BTreeMap<&str, (u64, Decimal)> = BTreeMap::new();
        for s in &self.sessions {
            let cost = s.cost(self.tariff_per_minute);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.1}\t{}\t{:.2}\n",
                s.id,
                format_iso(self.calendar.at_secs(s.placed_at)),
                s.caller,
                s.callee,
                outcome(s),
                s.connected().as_secs_f64(),
                s.billed_minutes(),
                cost
            ));
            let entry = totals.entry(&s.caller).or_default();
            entry.0 += s.billed_minutes();
            entry.1 += cost;
        }
        for (caller, (minutes, cost)) in totals {
            out.push_str(&format!("total\t\t{caller}\t\t\t\t{minutes}\t{cost:.2}\n"));
        }
        out
    }

    /// Writes `store.tsv`, `notifications.log`, `billing.tsv` and
    /// `events.log` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("store.tsv"), self.store_text())?;
        fs::write(dir.join("notifications.log"), self.notifications_text())?;
        fs::write(dir.join("billing.tsv"), self.billing_text())?;
        fs::write(dir.join("events.log"), self.events.iter().map(|e| e.clone() + "\n").collect::<String>())?;
        Ok(())
    }
}

/// The bundled field-test scenario.
pub const SYSTEST: &str = include_str!("../scenarios/systest.scenario");
